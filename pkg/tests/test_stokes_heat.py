import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from critl3.oseen import (
    KernelSampleSet,
    OseenKernelSample,
    heat_kernel,
    kernel_bound_samples,
    oseen_kernel,
    oseen_phi,
    phi_third_derivatives,
    verify_kernel_bound,
)
from critl3.presets import bump_family
from critl3.spectral import VectorField, lp_norm
from critl3.stokes_heat import (
    HeatPropagator,
    first_stokes_family_check,
    geometric_times,
    gradient_decay_exponent,
    heat_propagate,
    phi_functions,
    verify_first_stokes_estimate,
    verify_gradient_decay,
)

# (z, phi1, phi2) from 40-digit mpmath
PHI_ORACLE = [
    (-1.0, 0.63212055882855768, 0.36787944117144232),
    (-0.001, 0.99950016662500833, 0.49983337499166806),
    (-25.0, 0.039999999999444482, 0.038400000000022221),
    (-1e-8, 0.99999999500000002, 0.49999999833333334),
]

# Phi and d_i d_j d_k Phi at x = (0.3, -0.4, 0.5), t = 0.7 (mpmath, 40 digits)
X0, T0 = np.array([0.3, -0.4, 0.5]), 0.7
PHI_X0 = -0.050631840747541026
D3_X0 = {(0, 0, 0): -0.004275468098780371, (0, 1, 2): -0.0001459608641896037,
         (2, 2, 1): 0.001686132109757635, (1, 1, 1): 0.005632509061752013}


class TestPhiFunctions:
    @pytest.mark.parametrize("z, p1, p2", PHI_ORACLE)
    def test_against_oracle(self, z, p1, p2):
        e, phi1, phi2 = phi_functions(np.array([z]))
        assert e[0] == pytest.approx(math.exp(z), rel=1e-15)
        assert phi1[0] == pytest.approx(p1, rel=1e-13)
        assert phi2[0] == pytest.approx(p2, rel=1e-13)

    def test_zero(self):
        _, phi1, phi2 = phi_functions(np.zeros(1))
        assert phi1[0] == 1.0 and phi2[0] == 0.5


class TestHeatFlow:
    @pytest.mark.parametrize("k, t", [(1, 0.1), (3, 0.05), (2, 1.0)])
    def test_single_mode_decay(self, grid16, k, t):
        x, y, z = grid16.coordinates()
        v0 = VectorField(grid16, np.stack([np.sin(k * y), 0 * x, 0 * x]))
        v = heat_propagate(v0, t)
        np.testing.assert_allclose(v.data, v0.data * math.exp(-k * k * t), atol=1e-13)

    def test_semigroup(self, bump16):
        prop = HeatPropagator(bump16.grid)
        a = prop.propagate(prop.propagate(bump16, 0.01), 0.02)
        b = prop.propagate(bump16, 0.03)
        np.testing.assert_allclose(a.data, b.data, atol=1e-13)

    def test_history_starts_at_data(self, bump16):
        h = HeatPropagator(bump16.grid).history(bump16, [0.0, 0.1])
        np.testing.assert_array_equal(h[0].data, bump16.data)

    def test_geometric_times(self):
        t = geometric_times(1.0, 10)
        assert t[0] == 0 and t[-1] == pytest.approx(1.0) and np.all(np.diff(t) > 0)


class TestLinearEstimates:
    @pytest.mark.parametrize("s, ref", [(3, -0.5), (4, -0.625), (6, -0.75)])
    def test_reference_exponents(self, s, ref):
        assert gradient_decay_exponent(s) == pytest.approx(ref)

    def test_first_stokes_ratio_scale_invariant(self, bump16):
        a = verify_first_stokes_estimate(bump16, 1.0, 48)
        b = verify_first_stokes_estimate(bump16 * 3.0, 1.0, 48)
        assert a.passed and b.ratio == pytest.approx(a.ratio, rel=1e-10)

    def test_first_stokes_zero_data(self, grid16):
        with pytest.raises(ValueError):
            verify_first_stokes_estimate(VectorField.zeros(grid16), 1.0)

    def test_ratio_bounded_below_by_one(self, bump16):
        # sup_t ||v1||_3 >= ||v0||_3
        assert verify_first_stokes_estimate(bump16, 0.5, 48).ratio >= 1.0

    def test_family_check(self, grid16):
        rep = first_stokes_family_check(bump_family(grid16, 3), 1.0, 48)
        assert rep.passed and rep.details["scale_drift"] < 1e-10

    def test_gradient_decay_span(self, bump16):
        with pytest.raises(ValueError):
            verify_gradient_decay(bump16, 3, [0.1, 0.2, 0.5])

    def test_gradient_decay_needs_s3(self, bump16):
        with pytest.raises(ValueError):
            verify_gradient_decay(bump16, 2, np.geomspace(0.02, 1, 5))

    def test_gradient_decay_slope(self, bump16):
        rep = verify_gradient_decay(bump16, 3, np.geomspace(0.02, 1, 8))
        assert rep.passed and rep.fitted_exponent < -0.43


class TestOseen:
    def test_phi_value(self):
        assert oseen_phi(X0, T0) == pytest.approx(PHI_X0, rel=1e-13)

    @pytest.mark.parametrize("ijk", list(D3_X0))
    def test_third_derivatives(self, ijk):
        d3 = phi_third_derivatives(X0, T0)
        assert d3[ijk] == pytest.approx(D3_X0[ijk], rel=1e-6)

    def test_third_derivatives_symmetric(self):
        d3 = phi_third_derivatives(X0, T0)
        np.testing.assert_allclose(d3, np.transpose(d3, (1, 0, 2)), atol=1e-15)
        np.testing.assert_allclose(d3, np.transpose(d3, (2, 1, 0)), atol=1e-15)

    def test_kernel_from_derivatives(self):
        d3 = phi_third_derivatives(X0, T0)
        K = oseen_kernel(X0, T0)
        trace = np.einsum("iis->s", d3)
        assert K[0, 1, 2] == pytest.approx(d3[0, 1, 2])
        assert K[1, 1, 0] == pytest.approx(d3[1, 1, 0] - trace[0])

    def test_laplacian_is_heat_kernel(self):
        # second differences of Phi against Gamma
        h = 1e-3
        lap = 0.0
        for e in np.eye(3):
            lap += (oseen_phi(X0 + h * e, T0) - 2 * oseen_phi(X0, T0) + oseen_phi(X0 - h * e, T0)) / h ** 2
        assert lap == pytest.approx(heat_kernel(X0, T0), rel=1e-5)

    @given(lam=st.floats(0.1, 10), ux=st.floats(-1, 1), uy=st.floats(-1, 1), t=st.floats(0.01, 2))
    def test_parabolic_homogeneity(self, lam, ux, uy, t):
        x = np.array([ux, uy, 0.3])
        K1 = oseen_kernel(x, t)
        K2 = oseen_kernel(lam * x, lam * lam * t)
        np.testing.assert_allclose(K2 * lam ** 4, K1, rtol=1e-5, atol=1e-9 * np.abs(K1).max())

    def test_regular_at_origin(self):
        assert np.isfinite(oseen_phi(np.zeros(3), 1.0))
        np.testing.assert_allclose(oseen_kernel(np.zeros(3), 1.0), 0.0, atol=1e-14)

    def test_rejects_nonpositive_time(self):
        with pytest.raises(ValueError):
            oseen_phi(X0, 0.0)

    def test_sample_normalisation(self):
        s = OseenKernelSample.evaluate(X0, T0)
        assert s.K0_bound == pytest.approx(1.0 / (X0 @ X0 + T0) ** 2)
        assert s.normalized > 0

    def test_samples_cover_window(self):
        s = kernel_bound_samples(200, seed=0)
        r = np.linalg.norm(s.xs, axis=1)
        assert len(s) == 200
        assert r.min() >= 0.01 * (1 - 1e-12) and r.max() <= 10 * (1 + 1e-12)
        assert s.ts.min() >= 1e-4 * (1 - 1e-12) and s.ts.max() <= 10 * (1 + 1e-12)

    def test_bound_on_sample_set(self):
        rep = verify_kernel_bound(kernel_bound_samples(100, seed=3))
        assert rep.passed and rep.details["shell_mode"] == "matched rays"

    def test_bound_on_plain_pairs(self):
        pairs = [(np.array([1.0, 0, 0]) * 2.0 ** k, 4.0 ** k) for k in range(-3, 4)]
        rep = verify_kernel_bound(pairs)
        assert rep.details["shell_mode"] == "dyadic parabolic shells"
        # one self-similar ray: inner and outer shells agree
        assert rep.ratio == pytest.approx(1.0, rel=1e-6)

    def test_bound_rejects_empty(self):
        with pytest.raises(ValueError):
            verify_kernel_bound([])

    def test_sample_set_len(self):
        assert len(KernelSampleSet(np.zeros((2, 3)), np.ones(2), np.zeros(2))) == 2
