"""Output files: field snapshots, reports, traces and the run manifest."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .reports import ConvergenceTrace, EstimateReport, _clean
from .spectral import PHYSICAL, Grid, VectorField

MANIFEST = "manifest.json"

# column documentation written next to every CSV kind
CSV_SCHEMAS = {
    "energy_ledger": {
        "t": "time",
        "kinetic": "1/2 ||v2||_2^2",
        "dissipation": "||grad v2||_2^2 (rate)",
        "work": "int v1 (x) v : grad v2 (rate)",
        "residual": "kinetic + int dissipation - int work, cumulative",
    },
    "contraction": {
        "k": "Picard iterate index",
        "diff_norm_5": "||v^(k) - v^(k-1)||_{5,Q_T}",
        "ratio": "diff_norm_5(k) / diff_norm_5(k-1)",
    },
    "trace": {
        "<parameter>": "refinement or family parameter (first column)",
        "<metric>": "measured metric (second column)",
        "<extra>": "further diagnostics, one column each",
    },
}


def _component_names(components: tuple[int, ...]) -> list[str]:
    if components == ():
        return ["s"]
    if components == (3,):
        return ["x", "y", "z"]
    idx = np.ndindex(*components)
    return ["".join("xyz"[i] if n == 3 else str(i) for i, n in zip(ix, components)) for ix in idx]


def save_snapshot(field_: VectorField, stem: str | Path) -> list[Path]:
    """Write ``<stem>.<comp>.f64`` (flat little-endian float64) plus ``<stem>.json``."""
    stem = Path(stem)
    u = field_.physical()
    names = _component_names(u.components)
    flat = u.data.reshape((-1,) + u.grid.shape)
    paths = []
    for name, comp in zip(names, flat):
        p = stem.with_name(f"{stem.name}.{name}.f64")
        p.write_bytes(np.ascontiguousarray(comp, dtype="<f8").tobytes())
        paths.append(p)
    side = stem.with_name(stem.name + ".json")
    side.write_text(json.dumps({
        "box_length": u.grid.box_length, "resolution": u.grid.resolution, "time_stamp": u.time,
        "representation": PHYSICAL, "component_names": names,
        "components": list(u.components)}, indent=2, sort_keys=True) + "\n")
    paths.append(side)
    return paths


def load_snapshot(stem: str | Path) -> VectorField:
    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    g = Grid(float(meta["box_length"]), int(meta["resolution"]))
    comps = []
    for name in meta["component_names"]:
        raw = stem.with_name(f"{stem.name}.{name}.f64").read_bytes()
        comps.append(np.frombuffer(raw, dtype="<f8").reshape(g.shape))
    data = np.stack(comps).reshape(tuple(meta.get("components", [len(comps)])) + g.shape)
    return VectorField(g, data.astype(float), PHYSICAL, float(meta["time_stamp"]))


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Record of one output directory; the only file it does not checksum is itself."""

    command: list[str]
    config: dict
    version: str
    platform: dict = field(default_factory=lambda: {
        "python": sys.version.split()[0], "numpy": np.__version__,
        "machine": platform.machine(), "system": platform.system()})
    wall_clock_s: float = 0.0
    files: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": _clean(self.config), "version": self.version,
                "platform": self.platform, "wall_clock_s": self.wall_clock_s, "files": self.files}


class OutputDir:
    """Single-writer output directory that indexes what it writes."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            probe = self.path / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as e:
            raise OSError(f"output directory {self.path} is not writable: {e}") from e
        self.written: list[Path] = []

    def _track(self, p: Path) -> Path:
        if p not in self.written:
            self.written.append(p)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path / name
        p.write_text(content, encoding="utf-8")
        return self._track(p)

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def report(self, rep: EstimateReport) -> Path:
        return self.text(f"{rep.name}.json", rep.to_json() + "\n")

    def trace(self, name: str, tr: ConvergenceTrace) -> Path:
        p = self.text(f"{name}.csv", tr.to_csv())
        self.json(f"{name}.meta.json", {"parameter": tr.parameter, "metric": tr.metric,
                                        "fitted_rate": tr.fitted_rate, "pass": tr.passed})
        return p

    def csv_schema(self, kind: str) -> Path:
        return self.json(f"schema.{kind}.json", CSV_SCHEMAS[kind])

    def snapshot(self, stem: str, f: VectorField) -> list[Path]:
        return [self._track(p) for p in save_snapshot(f, self.path / stem)]

    def figure(self, name: str, fig) -> Path:
        p = self.path / name
        # fixed metadata keeps reruns byte-identical
        fig.savefig(p, dpi=100, metadata={"Software": None})
        return self._track(p)

    def manifest(self, m: RunManifest) -> Path:
        m.files = {p.relative_to(self.path).as_posix(): sha256(p)
                   for p in sorted(self.written) if p.name != MANIFEST}
        p = self.path / MANIFEST
        p.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def verify_manifest(directory: str | Path) -> list[str]:
    """Names of files whose checksum no longer matches (empty when intact)."""
    d = Path(directory)
    m = json.loads((d / MANIFEST).read_text())
    bad = []
    for name, digest in m["files"].items():
        p = d / name
        if not p.is_file() or sha256(p) != digest:
            bad.append(name)
    return bad
