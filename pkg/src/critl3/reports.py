"""Estimate reports, convergence traces and log-log fitting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


def _clean(x):
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if not math.isfinite(x) else x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_clean(v) for v in x]
    return x


@dataclass
class EstimateReport:
    """Outcome of checking one inequality or scaling law."""

    name: str
    lhs: float | None = None
    rhs: float | None = None
    ratio: float | None = None
    fitted_exponent: float | None = None
    reference_exponent: float | None = None
    passed: bool = False
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "ratio": self.ratio,
            "fitted_exponent": self.fitted_exponent,
            "reference_exponent": self.reference_exponent,
            "pass": bool(self.passed),
        }
        if self.details:
            d["details"] = self.details
        return _clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        return cls(d["name"], d.get("lhs"), d.get("rhs"), d.get("ratio"),
                   d.get("fitted_exponent"), d.get("reference_exponent"),
                   bool(d["pass"]), d.get("details", {}))

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        bits = [f"[{verdict}] {self.name}"]
        for key in ("lhs", "rhs", "ratio", "fitted_exponent", "reference_exponent"):
            v = getattr(self, key)
            if v is not None:
                bits.append(f"{key}={v:.6g}")
        return " ".join(bits)


@dataclass
class ConvergenceTrace:
    """Metric values against a strictly monotone parameter sequence."""

    parameter: str
    values: list[float]
    metric: str
    metrics: list[float]
    fitted_rate: float | None = None
    extra: dict[str, list[float]] = field(default_factory=dict)
    passed: bool = False

    def __post_init__(self):
        d = np.diff(np.asarray(self.values, dtype=float))
        if len(self.values) != len(self.metrics):
            raise ValueError("parameter and metric lists differ in length")
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("trace parameter values must be strictly monotone")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = [self.parameter, self.metric] + list(self.extra)
        w.writerow(cols)
        for i, p in enumerate(self.values):
            row = [p, self.metrics[i]] + [self.extra[k][i] for k in self.extra]
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def fit_power_law(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two points for a power-law fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive data")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def observed_order(errors: Sequence[float], params: Sequence[float]) -> float:
    """Rate ``p`` in ``err ~ param^p`` from the last two refinement levels."""
    e0, e1 = errors[-2], errors[-1]
    h0, h1 = params[-2], params[-1]
    return float(math.log(e0 / e1) / math.log(h0 / h1))
