"""Canonical divergence-free initial data.

Every preset is the spectral curl of a compactly supported vector potential,
truncated to the dealiasing band and rescaled to a prescribed L_3 norm.  The
curl makes the data exactly solenoidal; the support sits inside the central
quarter of the box (translated presets excepted, they are meant to leave the
observation window).
"""

from __future__ import annotations

import re

import numpy as np

from .spectral import Grid, VectorField, fwd, inv, lp_norm_data, project_hat

PRESETS = ("bump", "taylor_green_localized", "two_bump", "oscillatory", "translated", "rough")


class UnknownPresetError(KeyError):
    pass


def smooth_bump(r: np.ndarray, radius: float) -> np.ndarray:
    """``(1 - (r/R)^2)^6`` on ``r < R``.

    C^5 rather than C-infinity: at desk resolutions its truncated spectrum
    rings far less outside the support than the exponential bump does.
    """
    s2 = np.minimum((r / radius) ** 2, 1.0)
    return (1.0 - s2) ** 6


def _potential_to_field(grid: Grid, psi: np.ndarray) -> np.ndarray:
    """Band-limited curl of a physical vector potential, physical output."""
    kx, ky, kz = grid.wavevector
    a = fwd(psi) * grid.dealias_mask
    curl = 1j * np.stack([ky * a[2] - kz * a[1], kz * a[0] - kx * a[2], kx * a[1] - ky * a[0]])
    return inv(project_hat(curl, grid), grid)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _bump_potential(grid: Grid, center, radius: float, direction) -> np.ndarray:
    x = grid.coordinates(centered=True)
    c = np.asarray(center, dtype=float)[:, None, None, None]
    # periodic distance so translated bumps wrap cleanly
    d = x - c
    L = grid.box_length
    d = (d + L / 2) % L - L / 2
    r = np.sqrt(np.sum(d * d, axis=0))
    b = smooth_bump(r, radius)
    e = _unit(direction)
    return b[None] * e[:, None, None, None], d, b


def _normalise(grid: Grid, data: np.ndarray, target: float) -> np.ndarray:
    n3 = lp_norm_data(data, grid, 3)
    if n3 == 0:
        return data
    return data * (target / n3)


def parse_preset(name: str) -> tuple[str, int | None]:
    """``"oscillatory(16)"`` -> ``("oscillatory", 16)``."""
    m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(\s*(\d+)\s*\))?\s*", name)
    if not m:
        raise UnknownPresetError(name)
    base, arg = m.group(1), m.group(2)
    if base not in PRESETS:
        raise UnknownPresetError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return base, int(arg) if arg is not None else None


def preset_initial_data(name: str, grid: Grid, target_L3_norm: float = 1.0, seed: int = 0,
                        radius_scale: float = 1.0, center_offset=(0.0, 0.0, 0.0),
                        direction=(0.0, 0.0, 1.0)) -> VectorField:
    """Build preset initial data with ``||v0||_3 = target_L3_norm``.

    Presets: ``bump``, ``taylor_green_localized``, ``two_bump``,
    ``oscillatory(m)`` (wavelength ``L/m``), ``translated(m)`` (bump shifted by
    ``L/4 + m L/16`` along x) and ``rough`` (bump plus random high modes).
    """
    base, arg = parse_preset(name)
    if target_L3_norm < 0:
        raise ValueError("target L3 norm must be nonnegative")
    if target_L3_norm == 0:
        return VectorField.zeros(grid)
    L = grid.box_length
    R = L / 8 * radius_scale
    c0 = np.asarray(center_offset, dtype=float)
    if base == "bump":
        psi, _, _ = _bump_potential(grid, c0, R, direction)
    elif base == "taylor_green_localized":
        _, d, b = _bump_potential(grid, c0, R, (0, 0, 1))
        k = 2 * np.pi / R
        cell = np.sin(k * d[0]) * np.sin(k * d[1]) * np.cos(k * d[2]) / k
        psi = np.zeros((3,) + grid.shape)
        psi[2] = b * cell * R
    elif base == "two_bump":
        p1, _, _ = _bump_potential(grid, c0 + np.array([R / 2, 0, 0]), R / 2, direction)
        p2, _, _ = _bump_potential(grid, c0 - np.array([R / 2, 0, 0]), R / 2, direction)
        psi = p1 - p2
    elif base == "oscillatory":
        m = 8 if arg is None else arg
        _, d, b = _bump_potential(grid, c0, R, (0, 0, 1))
        k = 2 * np.pi * m / L
        psi = np.zeros((3,) + grid.shape)
        psi[2] = b * np.sin(k * d[0]) / k
    elif base == "translated":
        m = 1 if arg is None else arg
        shift = np.array([L / 4 + m * L / 16, 0.0, 0.0]) if m > 0 else np.zeros(3)
        psi, _, _ = _bump_potential(grid, c0 + shift, R, direction)
    elif base == "rough":
        rng = np.random.default_rng(seed)
        psi, d, b = _bump_potential(grid, c0, R, direction)
        for _ in range(6):
            kvec = rng.normal(size=3)
            kvec *= 2 * np.pi * rng.integers(6, max(7, (grid.resolution - 1) // 3 - 2)) / L / np.linalg.norm(kvec)
            phase = rng.uniform(0, 2 * np.pi)
            amp = _unit(rng.normal(size=3))
            wave = np.sin(np.tensordot(kvec, d, axes=1) + phase) / np.linalg.norm(kvec) * 4
            psi = psi + b[None] * wave[None] * amp[:, None, None, None]
    else:  # pragma: no cover - guarded by parse_preset
        raise UnknownPresetError(name)
    data = _potential_to_field(grid, psi)
    return VectorField(grid, _normalise(grid, data, target_L3_norm), "physical", 0.0)


def bump_family(grid: Grid, n: int = 10, seed: int = 0, target_L3_norm: float = 1.0) -> list[VectorField]:
    """Seeded variants of the bump preset: random swirl axis, sub-cell centre
    jitter and radius in ``[0.75, 0.9] * L/8``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scale = rng.uniform(0.75, 0.9)
        jitter = rng.uniform(-1, 1, size=3) * 0.1 * grid.box_length / 8 * (1 - scale)
        direction = rng.normal(size=3)
        out.append(preset_initial_data("bump", grid, target_L3_norm, radius_scale=scale,
                                       center_offset=jitter, direction=direction))
    return out
