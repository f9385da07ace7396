import json
import math

import numpy as np
import pytest

from critl3.config import ConfigError, load_config, load_config_with_sources
from critl3.io import CSV_SCHEMAS, OutputDir, RunManifest, load_snapshot, save_snapshot, verify_manifest
from critl3.lab import ExperimentConfig
from critl3.reports import EstimateReport
from critl3.spectral import Grid, VectorField, random_smooth_field


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestConfig:
    def test_no_file_gives_defaults(self):
        cfg, src = load_config_with_sources(None)
        assert cfg == ExperimentConfig()
        assert set(src.values()) == {"default"}

    def test_empty_file_gives_defaults(self, tmp_path):
        assert load_config(write(tmp_path, "")) == ExperimentConfig()

    def test_file_values(self, tmp_path):
        p = write(tmp_path, "[grid]\nresolution = 48\n[run]\nT = 0.01\npreset = two_bump\n"
                            "[tolerances]\nuniqueness = 1e-4\n")
        cfg, src = load_config_with_sources(p)
        assert cfg.resolution == 48 and cfg.T == 0.01 and cfg.preset == "two_bump"
        assert cfg.tol("uniqueness", 1.0) == 1e-4
        assert src["resolution"] == "file" and src["rho"] == "default"

    def test_negative_dt_named(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            load_config(write(tmp_path, "[run]\ndt = -1\n"))
        assert any("run.dt" in v for v in e.value.violations)

    def test_unknown_key_lists_valid(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            load_config(write(tmp_path, "[run]\nhorizon = 1\n"))
        msg = e.value.violations[0]
        assert "run.horizon" in msg and "run.T" in msg and "grid.resolution" in msg

    def test_all_violations_reported(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            load_config(write(tmp_path, "[grid]\nresolution = 20\n[run]\nrho = 5\npreset = vortex\n"))
        assert len(e.value.violations) == 3

    @pytest.mark.parametrize("text", ["[grid]\nresolution = abc\n", "[weird]\na = 1\n", "no section\n",
                                      "[tolerances]\nx = big\n"])
    def test_malformed(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_flag_wins(self, tmp_path):
        p = write(tmp_path, "[grid]\nresolution = 48\n")
        cfg, src = load_config_with_sources(p, {"resolution": 16, "seed": None})
        assert cfg.resolution == 16 and src["resolution"] == "flag" and src["seed"] == "default"

    def test_rho_bound(self):
        with pytest.raises(ConfigError):
            load_config(None, {"rho": 2 * math.pi / 4})


class TestSnapshots:
    @pytest.mark.parametrize("components", [(3,), (3, 3), ()])
    def test_round_trip(self, tmp_path, rng, components):
        g = Grid(2.0, 8)
        u = random_smooth_field(g, rng, components=components)
        u = VectorField(g, u.data, time=0.25)
        paths = save_snapshot(u, tmp_path / "u")
        assert len(paths) == int(np.prod(components)) + 1  # plus the sidecar
        back = load_snapshot(tmp_path / "u")
        np.testing.assert_array_equal(back.data, u.data)
        assert back.grid == g and back.time == 0.25

    def test_little_endian_layout(self, tmp_path, grid16):
        x, _, _ = grid16.coordinates()
        u = VectorField(grid16, np.stack([x, 0 * x, 0 * x]))
        save_snapshot(u, tmp_path / "v")
        raw = np.fromfile(tmp_path / "v.x.f64", dtype="<f8").reshape(grid16.shape)
        np.testing.assert_array_equal(raw, x)


class TestOutputDir:
    def test_manifest_verifies_and_detects_tamper(self, tmp_path):
        out = OutputDir(tmp_path / "o")
        out.report(EstimateReport("a", lhs=1.0, passed=True))
        out.csv_schema("energy_ledger")
        out.text("t.csv", "x\n1\n")
        out.manifest(RunManifest(["critl3"], {"k": 1}, "0"))
        assert verify_manifest(out.path) == []
        m = json.loads((out.path / "manifest.json").read_text())
        assert set(m["files"]) == {"a.json", "schema.energy_ledger.json", "t.csv"}
        (out.path / "t.csv").write_text("x\n2\n")
        assert verify_manifest(out.path) == ["t.csv"]

    def test_missing_file_detected(self, tmp_path):
        out = OutputDir(tmp_path)
        p = out.text("gone.txt", "x")
        out.manifest(RunManifest([], {}, "0"))
        p.unlink()
        assert verify_manifest(tmp_path) == ["gone.txt"]

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            OutputDir(blocker / "sub")

    def test_schemas_cover_ledger_header(self):
        assert list(CSV_SCHEMAS["energy_ledger"]) == ["t", "kinetic", "dissipation", "work", "residual"]
