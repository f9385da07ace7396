"""Free-space Oseen construction: the potential ``Phi`` with ``Laplacian Phi = Gamma``
(``Gamma`` the heat kernel) and the third-order kernel ``K`` built from it.

Everything is expressed through the dimensionless radial variable
``z = |x|^2 / (4 t)``.  With ``rho = sqrt(z)`` and the heat mass inside the
ball of radius ``|x|``,

    M(rho) = erf(rho) - 2 rho exp(-rho^2) / sqrt(pi),

the decaying solution of ``Laplacian Phi = Gamma`` is

    Phi(x, t) = -M / (4 pi |x|) - 2 t (4 pi t)^(-3/2) exp(-z).

Writing ``Phi' / r = G1(|x|^2)``, third derivatives take the form

    d_i d_j d_k Phi = g2 (delta_ij x_k + delta_ik x_j + delta_jk x_i) + g3 x_i x_j x_k

with ``g2 = 2 G1'`` and ``g3 = 4 G1''``.  ``G1`` is a multiple of
``h(z) = M / rho^3``; its derivatives are taken by five-point finite
differences in ``z`` (the parabolic scaling is factored out exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .reports import EstimateReport

_SQRT_PI = math.sqrt(math.pi)
_SERIES_Z = 1.5
_SERIES_TERMS = 40

# coefficients of h(z) = (4/sqrt(pi)) sum_n (-1)^n z^n / (n! (2n+3))
_H_COEFFS = np.array([(4 / _SQRT_PI) * (-1) ** n / (math.factorial(n) * (2 * n + 3))
                      for n in range(_SERIES_TERMS)])


def _h(z: np.ndarray) -> np.ndarray:
    """``M(sqrt z) / z^(3/2)``, an entire function of ``z`` (so negative z is fine)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < _SERIES_Z
    if np.any(small):
        out[small] = np.polynomial.polynomial.polyval(z[small], _H_COEFFS)
    big = ~small
    if np.any(big):
        zb = z[big]
        rho = np.sqrt(zb)
        m = erf(rho) - 2 * rho * np.exp(-zb) / _SQRT_PI
        out[big] = m / (zb * rho)
    return out


def _h_derivatives(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Five-point central differences for ``h'`` and ``h''``."""
    z = np.asarray(z, dtype=float)
    d = 1e-3 * np.maximum(2 * z, 1.0)
    hm2, hm1, h0, hp1, hp2 = (_h(z + k * d) for k in (-2, -1, 0, 1, 2))
    d1 = (hm2 - 8 * hm1 + 8 * hp1 - hp2) / (12 * d)
    d2 = (-hm2 + 16 * hm1 - 30 * h0 + 16 * hp1 - hp2) / (12 * d * d)
    return d1, d2


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("Oseen kernel needs t > 0")
    return t


def heat_kernel(x, t) -> np.ndarray:
    """``Gamma(x, t) = (4 pi t)^(-3/2) exp(-|x|^2 / 4t)``; ``x`` has shape ``(..., 3)``."""
    t = _check_t(t)
    r2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    return (4 * np.pi * t) ** -1.5 * np.exp(-r2 / (4 * t))


def oseen_phi(x, t) -> np.ndarray:
    """Decaying solution of ``Laplacian Phi = Gamma(., t)``.

    ``x`` has shape ``(..., 3)``; ``t`` broadcasts against ``x[..., 0]``.
    """
    t = _check_t(t)
    r2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    z = r2 / (4 * t)
    # M / (4 pi r) = h(z) z / (8 pi sqrt t), regular at r = 0
    return -_h(z) * z / (8 * np.pi * np.sqrt(t)) - 2 * t * (4 * np.pi * t) ** -1.5 * np.exp(-z)


def phi_third_derivatives(x, t) -> np.ndarray:
    """``d_i d_j d_k Phi`` in ``x``, shape ``(..., 3, 3, 3)``."""
    t = _check_t(t)
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x ** 2, axis=-1)
    z = r2 / (4 * t)
    h1, h2 = _h_derivatives(z)
    # G1(u) = t^(-3/2) h(u / 4t) / (32 pi)
    g2 = 2 * t ** -2.5 * h1 / (128 * np.pi)
    g3 = 4 * t ** -3.5 * h2 / (512 * np.pi)
    eye = np.eye(3)
    sym = (np.einsum("ij,...k->...ijk", eye, x)
           + np.einsum("ik,...j->...ijk", eye, x)
           + np.einsum("jk,...i->...ijk", eye, x))
    cube = np.einsum("...i,...j,...k->...ijk", x, x, x)
    return g2[..., None, None, None] * sym + g3[..., None, None, None] * cube


def oseen_kernel(x, t) -> np.ndarray:
    """``K_mjs = delta_mj d_y_i d_y_i d_y_s Phi - d_y_m d_y_j d_y_s Phi`` at ``y = 0``.

    Derivatives in ``y`` of ``Phi(x - y, t)`` flip the sign of each odd-order
    ``x`` derivative, hence ``K = D3[m,j,s] - delta_mj trace_s`` with ``D3`` the
    ``x``-derivative tensor.  Shape ``(..., 3, 3, 3)``.
    """
    d3 = phi_third_derivatives(x, t)
    trace = np.einsum("...iis->...s", d3)
    return d3 - np.einsum("mj,...s->...mjs", np.eye(3), trace)


def kernel_magnitude(K: np.ndarray) -> np.ndarray:
    """Max over the 27 components (the tensor norm used for the bound)."""
    return np.max(np.abs(K), axis=(-3, -2, -1))


@dataclass
class OseenKernelSample:
    x: np.ndarray
    t: float
    phi_value: float
    K_tensor: np.ndarray
    K0_bound: float = field(init=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.K0_bound = 1.0 / (float(self.x @ self.x) + self.t) ** 2

    @property
    def normalized(self) -> float:
        return float(kernel_magnitude(self.K_tensor) / self.K0_bound)

    @classmethod
    def evaluate(cls, x, t: float) -> "OseenKernelSample":
        x = np.asarray(x, dtype=float)
        return cls(x, float(t), float(oseen_phi(x, t)), oseen_kernel(x, t))


@dataclass
class KernelSampleSet:
    """Sample points ``xs`` (n, 3), times ``ts`` and the shape ray of each point."""

    xs: np.ndarray
    ts: np.ndarray
    ray: np.ndarray

    def __len__(self):
        return len(self.ts)


def _ray_window(xi: float, r_range, t_range) -> tuple[float, float]:
    """Admissible parabolic radii ``d`` for the shape ``|x| = d xi / sqrt(1 + xi^2)``."""
    q = math.sqrt(1 + xi * xi)
    lo = max(r_range[0] * q / xi, math.sqrt(t_range[0]) * q)
    hi = min(r_range[1] * q / xi, math.sqrt(t_range[1]) * q)
    return lo, hi


def kernel_bound_samples(n: int = 200, seed: int = 0, r_range=(0.01, 10.0),
                         t_range=(1e-4, 10.0), n_scales: int = 10,
                         xi_range=(0.1, 30.0)) -> KernelSampleSet:
    """Samples laid out on fixed-shape rays.

    A ray fixes a direction and the ratio ``xi = |x| / sqrt(t)``; along it the
    parabolic radius ``d = sqrt(|x|^2 + t)`` runs log-uniformly over the part
    of the window ``|x| in r_range, t in t_range`` the ray can reach.  The
    ``xi`` values are log-stratified (with jitter) across ``xi_range`` and
    include ``xi = 1``, so the full window is spanned.
    """
    if n < n_scales:
        raise ValueError("need at least one full ray of samples")
    rng = np.random.default_rng(seed)
    n_rays = n // n_scales
    lo, hi = np.log(xi_range[0]), np.log(xi_range[1])
    cells = np.linspace(lo, hi, n_rays + 1)
    log_xi = cells[:-1] + rng.uniform(0, 1, n_rays) * np.diff(cells)
    log_xi[0], log_xi[-1] = lo, hi
    log_xi[n_rays // 2] = 0.0
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs, ts, ray = [], [], []
    for k, (lx, e) in enumerate(zip(log_xi, dirs)):
        xi = math.exp(lx)
        d_lo, d_hi = _ray_window(xi, r_range, t_range)
        for d in np.geomspace(d_lo, d_hi, n_scales):
            t = d * d / (1 + xi * xi)
            xs.append(e * xi * math.sqrt(t))
            ts.append(t)
            ray.append(k)
    return KernelSampleSet(np.array(xs), np.array(ts), np.array(ray))


def verify_kernel_bound(samples, growth_factor: float = 1.1) -> EstimateReport:
    """Sup of ``|K| (|x|^2 + t)^2`` with an inner-vs-outer shell growth test.

    ``samples`` is a :class:`KernelSampleSet` or a sequence of ``(x, t)``
    pairs.  For a sample set the innermost shell collects, for every shape
    ray, the sample of smallest parabolic radius ``sqrt(|x|^2 + t)`` and the
    outermost shell the one of largest radius, so both shells see the same
    shapes.  Plain pairs use the dyadic shells ``[d_min, 2 d_min]`` and
    ``[d_max / 2, d_max]`` of the parabolic radius, whatever shapes fall in
    them.  Passes when every value is finite and
    ``outer sup <= growth_factor * inner sup``.
    """
    if isinstance(samples, KernelSampleSet):
        xs, ts, ray = samples.xs, samples.ts, samples.ray
        mode = "matched rays"
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("kernel bound needs at least one sample")
        xs = np.array([np.asarray(x, dtype=float) for x, _ in samples])
        ts = np.array([float(t) for _, t in samples])
        ray = None
        mode = "dyadic parabolic shells"
    if len(ts) == 0:
        raise ValueError("kernel bound needs at least one sample")
    K = oseen_kernel(xs, ts)
    par2 = np.sum(xs ** 2, axis=1) + ts
    normalized = kernel_magnitude(K) * par2 ** 2
    if ray is not None:
        inner_vals, outer_vals = [], []
        for k in np.unique(ray):
            idx = np.flatnonzero(ray == k)
            inner_vals.append(normalized[idx[np.argmin(par2[idx])]])
            outer_vals.append(normalized[idx[np.argmax(par2[idx])]])
    else:
        d = np.sqrt(par2)
        inner_vals = normalized[d <= 2 * d.min()]
        outer_vals = normalized[d >= d.max() / 2]
    inner, outer = float(max(inner_vals)), float(max(outer_vals))
    sup = float(normalized.max())
    finite = bool(np.all(np.isfinite(normalized)))
    ratio = outer / inner if inner > 0 else float("nan")
    passed = finite and bool(outer <= growth_factor * inner)
    return EstimateReport(
        name="kernel_bound", lhs=sup, rhs=None, ratio=ratio, passed=passed,
        details={"tensor_norm": "max over components", "n_samples": int(len(ts)),
                 "shell_mode": mode, "inner_shell_sup": inner,
                 "outer_shell_sup": outer, "growth_factor": growth_factor,
                 "x_range": [float(np.linalg.norm(xs, axis=1).min()), float(np.linalg.norm(xs, axis=1).max())],
                 "t_range": [float(ts.min()), float(ts.max())]})
