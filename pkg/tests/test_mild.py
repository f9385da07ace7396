import math

import numpy as np
import pytest

from critl3.mild import (
    C_DUHAMEL_EST,
    BandStore,
    HorizonNotFoundError,
    IterationBlowUpError,
    calibrate_duhamel_constant,
    duhamel_G,
    fixed_point_residual,
    horizon_threshold,
    kappa,
    momentum_residual,
    picard_solve,
    recover_pressure,
    select_horizon,
    uniform_times,
)
from critl3.presets import bump_family, preset_initial_data
from critl3.spectral import PHYSICAL, FieldHistory, Grid, VectorField


def shear_tensor(grid, k, f):
    """F_01 = F_10 = f sin(k x); -P div F = -(0, f k cos(k x), 0)."""
    x, _, _ = grid.coordinates()
    F = np.zeros((3, 3) + grid.shape)
    F[0, 1] = F[1, 0] = f * np.sin(k * x)
    return F


def taylor_green(grid, t=0.0):
    x, y, _ = grid.coordinates()
    d = math.exp(-2 * t)
    return np.stack([np.sin(x) * np.cos(y) * d, -np.cos(x) * np.sin(y) * d, 0 * x])


class TestDuhamel:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_constant_forcing(self, grid16, k):
        times = uniform_times(0.5, 16)
        F = FieldHistory([VectorField(grid16, shear_tensor(grid16, k, 1.0), PHYSICAL, t) for t in times], times)
        w = duhamel_G(F)
        x, _, _ = grid16.coordinates()
        for n in (0, 7, 16):
            t = times[n]
            amp = -k * (1 - math.exp(-k * k * t)) / (k * k)
            np.testing.assert_allclose(w[n].data[1], amp * np.cos(k * x), atol=1e-13)
            np.testing.assert_allclose(w[n].data[[0, 2]], 0, atol=1e-13)

    def test_linear_in_time_forcing(self, grid16):
        # piecewise-linear forcing is integrated exactly
        times = uniform_times(1.0, 8)
        F = FieldHistory([VectorField(grid16, shear_tensor(grid16, 2, t), PHYSICAL, t) for t in times], times)
        w = duhamel_G(F)
        x, _, _ = grid16.coordinates()
        t = 1.0
        amp = -2 * (t / 4 - (1 - math.exp(-4 * t)) / 16)
        np.testing.assert_allclose(w[-1].data[1], amp * np.cos(2 * x), atol=1e-13)

    def test_horizon_mismatch(self, grid16):
        times = uniform_times(0.5, 4)
        F = FieldHistory([VectorField(grid16, shear_tensor(grid16, 1, 1.0), PHYSICAL, t) for t in times], times)
        with pytest.raises(ValueError):
            duhamel_G(F, T=1.0)

    def test_band_store_round_trip(self, grid16, rng):
        s = BandStore(grid16, 2)
        hat = rng.standard_normal((3,) + grid16.spectral_shape) * grid16.dealias_mask
        s.put(1, hat.astype(complex))
        np.testing.assert_array_equal(s.get(1), hat)
        assert not s.get(0).any()


class TestHorizon:
    def test_threshold(self):
        assert horizon_threshold() == pytest.approx(1 / (16 * C_DUHAMEL_EST))
        with pytest.raises(ValueError):
            horizon_threshold(0.0)

    def test_kappa_monotone(self, bump16):
        ks = [kappa(bump16, T, 32) for T in (1e-3, 1e-2, 1e-1)]
        assert ks[0] < ks[1] < ks[2]

    def test_select_is_largest_dyadic(self, bump16):
        thr = horizon_threshold()
        T = select_horizon(bump16, thr, n_steps=64)
        assert math.log2(T) == int(math.log2(T))
        assert kappa(bump16, T, 64) <= thr < kappa(bump16, 2 * T, 64)

    def test_small_threshold_unattainable(self, grid32):
        v0 = preset_initial_data("bump", grid32)
        with pytest.raises(HorizonNotFoundError):
            select_horizon(v0, 0.05)

    def test_small_time_exponent(self, grid32):
        # Hoelder plus scaling for L3 data: kappa ~ T^(1/5)
        v0 = preset_initial_data("bump", grid32)
        T = np.geomspace(1e-6, 1e-3, 4)
        slope = np.polyfit(np.log(T), np.log([kappa(v0, t) for t in T]), 1)[0]
        assert slope == pytest.approx(0.2, abs=0.05)

    def test_zero_data_kappa(self, grid16):
        assert kappa(VectorField.zeros(grid16), 0.1, 8) == 0.0

    def test_not_found(self, bump16):
        with pytest.raises(HorizonNotFoundError):
            select_horizon(bump16 * 1e4, 1e-3, T_min=1e-3, n_steps=16)


class TestPicard:
    def test_zero_data(self, grid16):
        sol = picard_solve(VectorField.zeros(grid16), 0.1, n_steps=8)
        assert sol.converged and sol.iterations == 1 and sol.final_residual == 0.0
        assert not sol.velocity_slice(8).data.any()

    def test_small_data_contracts(self, bump16):
        T = select_horizon(bump16, horizon_threshold(), n_steps=64)
        sol = picard_solve(bump16, T, n_steps=32)
        assert sol.converged and max(sol.ratios) <= 0.5
        assert sol.final_residual < 1e-10
        assert fixed_point_residual(sol) == pytest.approx(sol.final_residual, rel=1e-10)

    def test_blow_up(self, grid16):
        with pytest.raises(IterationBlowUpError):
            picard_solve(preset_initial_data("bump", grid16, 300.0), 0.1, n_steps=32)

    @pytest.mark.parametrize("kw", [{"tol": 0.0}, {"k_max": 0}])
    def test_bad_arguments(self, bump16, kw):
        with pytest.raises(ValueError):
            picard_solve(bump16, 0.1, n_steps=4, **kw)

    def test_metadata_keys(self, bump16):
        meta = picard_solve(bump16, 2.0 ** -10, n_steps=8).metadata()
        assert {"T", "converged", "iterations", "kappa", "contraction_ratios"} <= set(meta)


class TestPressureAndMomentum:
    def test_taylor_green_pressure(self, grid16):
        x, y, _ = grid16.coordinates()
        h = FieldHistory([VectorField(grid16, taylor_green(grid16), PHYSICAL, 0.0)])
        q = recover_pressure(h)[0].data
        np.testing.assert_allclose(q, (np.cos(2 * x) + np.cos(2 * y)) / 4, atol=1e-13)

    def test_taylor_green_momentum_second_order(self, grid16):
        res = []
        for n in (16, 32):
            times = uniform_times(0.2, n)
            h = FieldHistory([VectorField(grid16, taylor_green(grid16, t), PHYSICAL, t) for t in times], times)
            res.append(momentum_residual(h, recover_pressure(h)).max())
        assert res[1] == pytest.approx(res[0] / 4, rel=0.05)

    def test_projected_form_agrees(self, grid16):
        times = uniform_times(0.1, 8)
        h = FieldHistory([VectorField(grid16, taylor_green(grid16, t), PHYSICAL, t) for t in times], times)
        np.testing.assert_allclose(momentum_residual(h), momentum_residual(h, recover_pressure(h)), atol=1e-12)

    def test_needs_three_slices(self, grid16):
        h = FieldHistory([VectorField.zeros(grid16, time=t) for t in (0.0, 0.1)])
        with pytest.raises(ValueError):
            momentum_residual(h)


@pytest.mark.slow
def test_calibration_below_frozen_constant():
    g = Grid(2 * math.pi, 16)
    rep = calibrate_duhamel_constant(bump_family(g, 2), n_random=2, n_steps=32)
    assert rep.lhs <= C_DUHAMEL_EST
