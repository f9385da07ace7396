import json
import math

import numpy as np
import pytest

from critl3.presets import PRESETS, UnknownPresetError, bump_family, parse_preset, preset_initial_data
from critl3.reports import ConvergenceTrace, EstimateReport, fit_power_law, observed_order
from critl3.spectral import Grid, div, inner, lp_norm


class TestPresets:
    @pytest.mark.parametrize("name", ["bump", "taylor_green_localized", "two_bump", "oscillatory(4)",
                                      "translated(1)", "rough"])
    def test_unit_norm_and_solenoidal(self, grid32, name):
        v0 = preset_initial_data(name, grid32)
        assert lp_norm(v0, 3) == pytest.approx(1.0, abs=1e-10)
        assert np.max(np.abs(div(v0).data)) < 1e-10

    def test_zero_target(self, grid16):
        v0 = preset_initial_data("bump", grid16, 0.0)
        assert not v0.data.any()

    @pytest.mark.parametrize("target", [0.5, 2.0])
    def test_target_norm(self, grid16, target):
        assert lp_norm(preset_initial_data("two_bump", grid16, target), 3) == pytest.approx(target, abs=1e-10)

    def test_support_in_central_quarter(self, grid32):
        v0 = preset_initial_data("bump", grid32)
        x = grid32.coordinates(centered=True)
        outside = np.max(np.abs(x), axis=0) > grid32.box_length / 4
        mag = np.sqrt(np.sum(v0.data ** 2, axis=0))
        # band-limited, so only truncation ringing is left outside
        assert mag[outside].max() < 0.05 * mag.max()

    def test_oscillatory_decorrelates(self):
        g = Grid(2 * math.pi, 64)
        # offset breaks the parity that makes the centred overlap vanish identically
        b = preset_initial_data("bump", g, center_offset=(0.2, 0.0, 0.0))
        ips = [abs(inner(b, preset_initial_data(f"oscillatory({m})", g))) for m in (2, 4, 8, 16)]
        assert all(ips[i + 1] < ips[i] for i in range(3))
        assert ips[-1] < 0.1 * ips[0]

    @pytest.mark.parametrize("text, parsed", [("bump", ("bump", None)), ("oscillatory(16)", ("oscillatory", 16)),
                                              (" translated ( 2 ) ", ("translated", 2))])
    def test_parse(self, text, parsed):
        assert parse_preset(text) == parsed

    @pytest.mark.parametrize("text", ["vortex", "bump(", "oscillatory(x)"])
    def test_unknown(self, text):
        with pytest.raises(UnknownPresetError):
            parse_preset(text)

    def test_registry(self):
        assert "bump" in PRESETS and len(PRESETS) == 6

    def test_family_deterministic(self, grid16):
        a = bump_family(grid16, 3, seed=5)
        b = bump_family(grid16, 3, seed=5)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.data, v.data)


class TestReports:
    def test_json_round_trip_with_nan(self):
        r = EstimateReport("x", lhs=1.0, rhs=float("nan"), passed=True, details={"a": np.float64(2.0)})
        d = json.loads(r.to_json())
        assert d["rhs"] is None and d["pass"] is True and d["details"]["a"] == 2.0
        back = EstimateReport.from_dict(d)
        assert back.name == "x" and back.passed

    def test_line(self):
        assert EstimateReport("y", lhs=1.0, passed=False).line().startswith("[FAIL] y")

    @pytest.mark.parametrize("p", [-0.5, 0.25, 2.0])
    def test_power_law(self, p):
        x = np.geomspace(0.01, 1, 7)
        slope, intercept = fit_power_law(x, 3 * x ** p)
        assert slope == pytest.approx(p) and intercept == pytest.approx(math.log(3))

    def test_power_law_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fit_power_law([1, 2], [0, 1])

    def test_observed_order(self):
        assert observed_order([4e-4, 1e-4], [0.2, 0.1]) == pytest.approx(2.0)

    def test_trace_monotone(self):
        with pytest.raises(ValueError):
            ConvergenceTrace("h", [1, 2, 1], "err", [1, 1, 1])

    def test_trace_csv(self):
        tr = ConvergenceTrace("h", [1.0, 0.5], "err", [0.1, 0.025], 2.0, {"aux": [1.0, 2.0]})
        lines = tr.to_csv().splitlines()
        assert lines[0] == "h,err,aux" and lines[2] == "0.5,0.025,2.0"
