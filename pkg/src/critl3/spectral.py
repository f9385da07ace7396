"""Periodic-box field algebra: grids, FFTs, differential operators, projection,
mollification and (mixed) Lebesgue norms.

Conventions
-----------
* The box is ``[0, L)^3`` with ``N`` points per axis, viscosity 1.
* Spectral arrays are unnormalised ``rfftn`` coefficients over the last three
  axes, so a constant field ``c`` has zero mode ``c * N**3``.
* Tensors follow ``(a (x) b)_ij = a_i b_j`` and ``(div F)_i = d_j F_ij``;
  ``grad(u)_ij = d_j u_i``.
* First-derivative wavenumbers have the Nyquist entry zeroed; the Laplacian
  and heat symbols use the full ``|k|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy.integrate import trapezoid

PHYSICAL = "physical"
SPECTRAL = "spectral"
_AXES = (-3, -2, -1)


class MalformedFieldError(ValueError):
    """Raised when array shapes or metadata disagree with the grid."""


def fft_workers() -> int:
    return sfft.get_workers()


def _fft_size_ok(n: int) -> bool:
    if n % 3 == 0:
        n //= 3
    return n & (n - 1) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic discretisation of the cube ``[0, box_length)^3``."""

    box_length: float
    resolution: int

    def __post_init__(self):
        n = self.resolution
        if not isinstance(n, (int, np.integer)) or n < 8 or not _fft_size_ok(int(n)):
            raise ValueError(f"resolution must be >= 8 and a power of two (or three times one), got {n!r}")
        if not self.box_length > 0:
            raise ValueError(f"box_length must be positive, got {self.box_length!r}")

    @property
    def spacing(self) -> float:
        return self.box_length / self.resolution

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def volume(self) -> float:
        return self.box_length ** 3

    @property
    def shape(self) -> tuple[int, int, int]:
        n = self.resolution
        return (n, n, n)

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        n = self.resolution
        return (n, n, n // 2 + 1)

    def rescaled(self, factor: float) -> "Grid":
        """Same resolution on a box of edge ``box_length / factor``."""
        return Grid(self.box_length / factor, self.resolution)

    def coordinates(self, centered: bool = False) -> np.ndarray:
        """Stacked coordinate arrays, shape ``(3, N, N, N)``.

        With ``centered=True`` the box centre is the origin, i.e. coordinates
        run over ``[-L/2, L/2)``.
        """
        x = np.arange(self.resolution) * self.spacing
        if centered:
            x = x - self.box_length / 2
        return np.stack(np.meshgrid(x, x, x, indexing="ij"))

    @cached_property
    def _k1(self):
        n = self.resolution
        scale = 2 * np.pi / self.box_length
        k = sfft.fftfreq(n, 1.0 / n) * scale
        kz = sfft.rfftfreq(n, 1.0 / n) * scale
        kd = k.copy()
        kd[n // 2] = 0.0
        kzd = kz.copy()
        kzd[-1] = 0.0
        return k, kz, kd, kzd

    @cached_property
    def wavevector(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Derivative wavenumbers (Nyquist zeroed), broadcastable to the
        spectral shape."""
        _, _, kd, kzd = self._k1
        return (kd[:, None, None], kd[None, :, None], kzd[None, None, :])

    @cached_property
    def k_squared(self) -> np.ndarray:
        """Full ``|k|^2`` including Nyquist entries (Laplacian symbol)."""
        k, kz, _, _ = self._k1
        return k[:, None, None] ** 2 + k[None, :, None] ** 2 + kz[None, None, :] ** 2

    @cached_property
    def kd_squared(self) -> np.ndarray:
        kx, ky, kz = self.wavevector
        return kx ** 2 + ky ** 2 + kz ** 2

    @cached_property
    def inverse_kd_squared(self) -> np.ndarray:
        k2 = self.kd_squared
        with np.errstate(divide="ignore"):
            inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
        return inv

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keep integer modes with ``|n_i| <= (N-1)//3``."""
        n = self.resolution
        cut = (n - 1) // 3
        m = np.abs(sfft.fftfreq(n, 1.0 / n)) <= cut
        mz = sfft.rfftfreq(n, 1.0 / n) <= cut
        return m[:, None, None] & m[None, :, None] & mz[None, None, :]

    @cached_property
    def hermitian_weight(self) -> np.ndarray:
        """Multiplicity of each rfft coefficient in the full spectrum."""
        n = self.resolution
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.broadcast_to(w[None, None, :], self.spectral_shape)


# ---------------------------------------------------------------------------
# raw-array kernels (used directly by the solvers)

def fwd(a: np.ndarray) -> np.ndarray:
    return sfft.rfftn(a, axes=_AXES)


def inv(a: np.ndarray, grid: Grid) -> np.ndarray:
    return sfft.irfftn(a, s=grid.shape, axes=_AXES)


def project_hat(uh: np.ndarray, grid: Grid) -> np.ndarray:
    """Leray projection of spectral vector coefficients, shape (3, ...)."""
    kx, ky, kz = grid.wavevector
    kdotu = kx * uh[0] + ky * uh[1] + kz * uh[2]
    kdotu *= grid.inverse_kd_squared
    out = np.empty_like(uh)
    out[0] = uh[0] - kx * kdotu
    out[1] = uh[1] - ky * kdotu
    out[2] = uh[2] - kz * kdotu
    return out


def div_hat(fh: np.ndarray, grid: Grid) -> np.ndarray:
    """Spectral divergence over the last component index."""
    kx, ky, kz = grid.wavevector
    return 1j * (kx * fh[..., 0, :, :, :] + ky * fh[..., 1, :, :, :] + kz * fh[..., 2, :, :, :])


def grad_hat(fh: np.ndarray, grid: Grid) -> np.ndarray:
    """Spectral gradient appended as a trailing component index."""
    kx, ky, kz = grid.wavevector
    return np.stack([1j * kx * fh, 1j * ky * fh, 1j * kz * fh], axis=-4)


def sym_outer(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Full 3x3 array ``a_i b_j`` of physical vectors (b defaults to a)."""
    if b is None:
        b = a
    return a[:, None] * b[None, :]


def neg_projected_div(flux: np.ndarray, grid: Grid) -> np.ndarray:
    """``-P div F`` for a physical 3x3 flux, dealiased; spectral output."""
    fh = fwd(flux)
    fh *= grid.dealias_mask
    return -project_hat(div_hat(fh, grid), grid)


# ---------------------------------------------------------------------------
# field containers

@dataclass(frozen=True, eq=False)
class VectorField:
    """One time slice of a scalar, vector or tensor field.

    ``data`` has shape ``(*components, N, N, N)`` when physical and
    ``(*components, N, N, N//2+1)`` (complex) when spectral.
    """

    grid: Grid
    data: np.ndarray
    representation: str = PHYSICAL
    time: float = 0.0

    def __post_init__(self):
        if self.representation not in (PHYSICAL, SPECTRAL):
            raise MalformedFieldError(f"unknown representation {self.representation!r}")
        want = self.grid.shape if self.representation == PHYSICAL else self.grid.spectral_shape
        if self.data.ndim < 3 or tuple(self.data.shape[-3:]) != want:
            raise MalformedFieldError(
                f"{self.representation} data of shape {self.data.shape} does not match grid {want}")
        if self.time < 0:
            raise MalformedFieldError("time stamp must be nonnegative")

    @property
    def components(self) -> tuple[int, ...]:
        return tuple(self.data.shape[:-3])

    @property
    def is_spectral(self) -> bool:
        return self.representation == SPECTRAL

    def physical(self) -> "VectorField":
        return transform(self, PHYSICAL)

    def spectral(self) -> "VectorField":
        return transform(self, SPECTRAL)

    def with_data(self, data: np.ndarray, representation: str | None = None,
                  time: float | None = None) -> "VectorField":
        return VectorField(self.grid, data, representation or self.representation,
                           self.time if time is None else time)

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_same(self, other)
        return self.with_data(self.data + _as(other, self.representation).data)

    def __sub__(self, other: "VectorField") -> "VectorField":
        _check_same(self, other)
        return self.with_data(self.data - _as(other, self.representation).data)

    def __mul__(self, scalar: float) -> "VectorField":
        return self.with_data(self.data * scalar)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, grid: Grid, components: tuple[int, ...] = (3,), time: float = 0.0):
        return cls(grid, np.zeros(components + grid.shape), PHYSICAL, time)


def _check_same(a: VectorField, b: VectorField):
    if a.grid != b.grid:
        raise MalformedFieldError("fields live on different grids")
    if a.components != b.components:
        raise MalformedFieldError("fields have different component shapes")


def _as(u: VectorField, representation: str) -> VectorField:
    return u if u.representation == representation else transform(u, representation)


def transform(u: VectorField, target: str) -> VectorField:
    """Convert between physical and spectral representations."""
    if target not in (PHYSICAL, SPECTRAL):
        raise MalformedFieldError(f"unknown representation {target!r}")
    if u.representation == target:
        return u
    if target == SPECTRAL:
        return VectorField(u.grid, fwd(u.data), SPECTRAL, u.time)
    return VectorField(u.grid, inv(u.data, u.grid), PHYSICAL, u.time)


def _spectral_data(u: VectorField) -> np.ndarray:
    return u.data if u.is_spectral else fwd(u.data)


def _like(u: VectorField, hat: np.ndarray) -> VectorField:
    """Wrap spectral coefficients in the representation of ``u``."""
    if u.is_spectral:
        return VectorField(u.grid, hat, SPECTRAL, u.time)
    return VectorField(u.grid, inv(hat, u.grid), PHYSICAL, u.time)


def leray_project(u: VectorField) -> VectorField:
    if u.components != (3,):
        raise MalformedFieldError("Leray projection needs a 3-vector field")
    return _like(u, project_hat(_spectral_data(u), u.grid))


def grad(u: VectorField) -> VectorField:
    return _like(u, grad_hat(_spectral_data(u), u.grid))


def div(u: VectorField) -> VectorField:
    if not u.components or u.components[-1] != 3:
        raise MalformedFieldError("divergence needs a trailing component of size 3")
    return _like(u, div_hat(_spectral_data(u), u.grid))


def curl(u: VectorField) -> VectorField:
    if u.components != (3,):
        raise MalformedFieldError("curl needs a 3-vector field")
    kx, ky, kz = u.grid.wavevector
    a = _spectral_data(u)
    out = 1j * np.stack([ky * a[2] - kz * a[1], kz * a[0] - kx * a[2], kx * a[1] - ky * a[0]])
    return _like(u, out)


def laplacian(u: VectorField) -> VectorField:
    return _like(u, -u.grid.k_squared * _spectral_data(u))


def dealias(u: VectorField) -> VectorField:
    return _like(u, _spectral_data(u) * u.grid.dealias_mask)


def advect(w: VectorField, u: VectorField) -> VectorField:
    """``w . grad u`` with the product formed on the grid and dealiased."""
    if w.grid != u.grid:
        raise MalformedFieldError("fields live on different grids")
    wp = _as(w, PHYSICAL).data
    gu = inv(grad_hat(_spectral_data(u), u.grid), u.grid)
    prod = np.einsum("...jxyz,jxyz->...xyz", gu, wp)
    return _like(u, fwd(prod) * u.grid.dealias_mask)


def outer(a: VectorField, b: VectorField) -> VectorField:
    """Dealiased tensor product ``a (x) b`` (physical output)."""
    _check_same(a, b)
    t = sym_outer(_as(a, PHYSICAL).data, _as(b, PHYSICAL).data)
    return VectorField(a.grid, inv(fwd(t) * a.grid.dealias_mask, a.grid), PHYSICAL, a.time)


def solve_poisson(rhs: VectorField) -> VectorField:
    """Zero-mean ``p`` with ``-Laplacian p = rhs``."""
    return _like(rhs, _spectral_data(rhs) * rhs.grid.inverse_kd_squared)


# ---------------------------------------------------------------------------
# mollification

@dataclass(frozen=True)
class Mollifier:
    """Convolution kernel of radius ``radius``.

    ``gaussian``: periodised sampled Gaussian of standard deviation ``radius``,
    normalised to unit mass on the grid (a positive kernel, so the discrete
    convolution is an L_p contraction).  ``spectral_cutoff``: removes every
    mode with ``|k| > pi / radius``.
    """

    radius: float
    kind: str = "gaussian"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("mollifier radius must be positive")
        if self.kind not in ("gaussian", "spectral_cutoff"):
            raise ValueError(f"unknown mollifier kind {self.kind!r}")

    def check(self, grid: Grid):
        if self.radius >= grid.box_length / 4:
            raise ValueError(
                f"mollifier radius {self.radius} must be below box_length/4 = {grid.box_length / 4}")

    def kernel(self, grid: Grid) -> np.ndarray:
        """Physical kernel samples (gaussian kind only), unit discrete mass."""
        if self.kind != "gaussian":
            raise ValueError("only the gaussian mollifier has a compact physical kernel")
        n, L = grid.resolution, grid.box_length
        x = np.arange(n) * grid.spacing
        x = np.where(x >= L / 2, x - L, x)
        g = np.zeros(n)
        for image in (-1, 0, 1):
            g += np.exp(-0.5 * ((x + image * L) / self.radius) ** 2)
        ker = g[:, None, None] * g[None, :, None] * g[None, None, :]
        return ker / (ker.sum() * grid.cell_volume)

    def symbol(self, grid: Grid) -> np.ndarray:
        self.check(grid)
        if self.kind == "gaussian":
            return fwd(self.kernel(grid)).real * grid.cell_volume
        return (grid.k_squared <= (np.pi / self.radius) ** 2).astype(float)

    def sup_constant(self, grid: Grid) -> float:
        """c(rho) with ``max|(u)_rho| <= c(rho) ||u||_2`` (Cauchy-Schwarz)."""
        if self.kind == "gaussian":
            k = self.kernel(grid)
            return float(np.sqrt(np.sum(k ** 2) * grid.cell_volume))
        nmodes = np.sum(self.symbol(grid) * grid.hermitian_weight)
        return float(np.sqrt(nmodes) / grid.box_length ** 1.5)


def mollify(u: VectorField, m: Mollifier | None) -> VectorField:
    if m is None:
        return u
    return _like(u, _spectral_data(u) * m.symbol(u.grid))


# ---------------------------------------------------------------------------
# norms

def pointwise_magnitude(data: np.ndarray) -> np.ndarray:
    """Euclidean (Frobenius) magnitude over the component axes."""
    if data.ndim == 3:
        return np.abs(data)
    sq = np.sum(data.reshape((-1,) + data.shape[-3:]) ** 2, axis=0)
    return np.sqrt(sq)


def lp_norm_data(data: np.ndarray, grid: Grid, p: float) -> float:
    if p < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    mag = pointwise_magnitude(data)
    if np.isinf(p):
        return float(mag.max())
    if p == 2:
        return float(np.sqrt(np.sum(mag * mag) * grid.cell_volume))
    return float((np.sum(mag ** p) * grid.cell_volume) ** (1.0 / p))


def lp_norm(u: VectorField, p: float) -> float:
    """Riemann-sum L_p norm of the pointwise Euclidean magnitude."""
    if p < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    return lp_norm_data(_as(u, PHYSICAL).data, u.grid, p)


def spectral_l2_squared(u: VectorField) -> float:
    """``||u||_2^2`` from the rfft coefficients (Parseval)."""
    uh = _spectral_data(u)
    g = u.grid
    s = np.sum(np.abs(uh.reshape((-1,) + g.spectral_shape)) ** 2 * g.hermitian_weight)
    return float(s * g.volume / g.resolution ** 6)


def spectral_inner(ah: np.ndarray, bh: np.ndarray, grid: Grid) -> float:
    """``int a . b dx`` from spectral coefficients of matching shape."""
    prod = (ah * np.conj(bh)).real.reshape((-1,) + grid.spectral_shape)
    return float(np.sum(prod * grid.hermitian_weight) * grid.volume / grid.resolution ** 6)


def inner(a: VectorField, b: VectorField) -> float:
    _check_same(a, b)
    return spectral_inner(_spectral_data(a), _spectral_data(b), a.grid)


@dataclass(frozen=True)
class MixedNormSpec:
    """Spatial exponent ``s`` and temporal exponent ``l`` of ``||.||_{s,l,Q_T}``."""

    s: float
    l: float

    def __post_init__(self):
        if not (self.s >= 1 and self.l >= 1):
            raise ValueError(f"mixed-norm exponents must be >= 1, got ({self.s}, {self.l})")

    def label(self) -> str:
        def fmt(x):
            return "inf" if np.isinf(x) else f"{x:g}"
        return f"({fmt(self.s)},{fmt(self.l)})"


@dataclass(eq=False)
class FieldHistory:
    """Time-ordered slices on a single grid."""

    slices: list[VectorField]
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.times is None:
            self.times = np.array([s.time for s in self.slices], dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if len(self.slices) != len(self.times):
            raise MalformedFieldError("slices and times differ in length")
        if len(self.times):
            if self.times[0] < 0 or np.any(np.diff(self.times) <= 0):
                raise MalformedFieldError("history times must be nonnegative and strictly increasing")
            g = self.slices[0].grid
            if any(s.grid != g for s in self.slices):
                raise MalformedFieldError("history slices must share one grid")

    @classmethod
    def from_array(cls, grid: Grid, times: Sequence[float], data: np.ndarray) -> "FieldHistory":
        """Wrap a stacked physical array ``(n_times, *components, N, N, N)``."""
        times = np.asarray(times, dtype=float)
        return cls([VectorField(grid, data[i], PHYSICAL, float(t)) for i, t in enumerate(times)], times)

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i) -> VectorField:
        return self.slices[i]

    @property
    def grid(self) -> Grid:
        return self.slices[0].grid

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def restrict(self, T: float) -> "FieldHistory":
        """Slices with ``t <= T`` (prefix of the history)."""
        n = int(np.searchsorted(self.times, T * (1 + 1e-12), side="right"))
        return FieldHistory(self.slices[:n], self.times[:n])

    def map(self, fn) -> "FieldHistory":
        return FieldHistory([fn(s) for s in self.slices], self.times.copy())

    def slice_norms(self, s: float) -> np.ndarray:
        return np.array([lp_norm(u, s) for u in self.slices])


def time_integral(values: np.ndarray, times: np.ndarray) -> float:
    """Trapezoidal rule on the stored slice times."""
    return float(trapezoid(values, times)) if len(times) > 1 else 0.0


def mixed_from_slice_norms(norms: np.ndarray, times: np.ndarray, l: float) -> float:
    if np.isinf(l):
        return float(np.max(norms))
    if len(times) < 2:
        raise ValueError("a finite temporal exponent needs at least two time slices")
    return time_integral(norms ** l, times) ** (1.0 / l)


def mixed_norm(h: FieldHistory, spec: MixedNormSpec) -> float:
    """``(int_0^T ||u(t)||_s^l dt)^(1/l)``; supremum over slices when l = inf."""
    if len(h) == 0:
        raise ValueError("mixed norm of an empty history")
    return mixed_from_slice_norms(h.slice_norms(spec.s), h.times, spec.l)


def random_smooth_field(grid: Grid, rng: np.random.Generator, components=(3,),
                        kmax: int | None = None, solenoidal: bool = False) -> VectorField:
    """Random real field with modes inside the dealiasing band (or |n| <= kmax)."""
    shape = components + grid.spectral_shape
    hat = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    n = grid.resolution
    nn = np.sqrt(grid.k_squared) * grid.box_length / (2 * np.pi)
    cut = (n - 1) // 3 if kmax is None else kmax
    hat *= grid.dealias_mask * (nn <= cut) * np.exp(-0.15 * nn ** 2)
    data = inv(hat, grid)
    data = fwd(data)  # enforce Hermitian symmetry of the stored coefficients
    if solenoidal:
        data = project_hat(data, grid)
    return VectorField(grid, inv(data, grid), PHYSICAL, 0.0)
