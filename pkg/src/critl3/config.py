"""INI configuration for experiments.

Layout::

    [grid]
    resolution = 48
    box_length = 6.283185307179586

    [run]
    preset = bump
    T = 0.001
    dt = 1e-5
    n_steps = 256
    rho = 0
    seed = 0
    target_L3_norm = 1

    [tolerances]
    uniqueness = 1e-3

Values given on the command line override the file; the source of every
effective value is kept for the run manifest.
"""

from __future__ import annotations

import configparser
import math
from pathlib import Path

from .lab import ExperimentConfig
from .presets import UnknownPresetError, parse_preset
from .spectral import Grid

# section -> key -> converter
SCHEMA = {
    "grid": {"resolution": int, "box_length": float},
    "run": {"preset": str, "T": float, "dt": float, "n_steps": int, "rho": float,
            "seed": int, "target_L3_norm": float},
}
TOLERANCE_SECTION = "tolerances"


class ConfigError(ValueError):
    """Every problem found in a configuration, not just the first."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


def _valid_keys() -> str:
    keys = [f"{s}.{k}" for s, ks in SCHEMA.items() for k in ks]
    return ", ".join(keys + [f"{TOLERANCE_SECTION}.<name>"])


def _read(path) -> tuple[dict, dict, list[str]]:
    values, tolerances, errors = {}, {}, []
    if path is None:
        return values, tolerances, errors
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise ConfigError([f"unparsable config file {path}: {e}"]) from e
    for section in cp.sections():
        if section == TOLERANCE_SECTION:
            for key, raw in cp.items(section):
                try:
                    tolerances[key] = float(raw)
                except ValueError:
                    errors.append(f"{section}.{key}: {raw!r} is not a number")
            continue
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]; valid keys: {_valid_keys()}")
            continue
        for key, raw in cp.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                errors.append(f"unknown key {section}.{key}; valid keys: {_valid_keys()}")
                continue
            try:
                values[key] = conv(raw)
            except ValueError:
                errors.append(f"{section}.{key}: cannot read {raw!r} as {conv.__name__}")
    return values, tolerances, errors


def validate(cfg: ExperimentConfig) -> list[str]:
    """Physical and structural violations of a config (empty when valid)."""
    errors = []
    try:
        Grid(cfg.box_length, cfg.resolution)
    except ValueError as e:
        errors.append(f"grid: {e}")
    if cfg.T is not None and not (cfg.T > 0 and math.isfinite(cfg.T)):
        errors.append(f"run.T must be positive, got {cfg.T}")
    if cfg.dt is not None and not (cfg.dt > 0 and math.isfinite(cfg.dt)):
        errors.append(f"run.dt must be positive, got {cfg.dt}")
    if cfg.n_steps < 1:
        errors.append(f"run.n_steps must be >= 1, got {cfg.n_steps}")
    if cfg.rho < 0:
        errors.append(f"run.rho must be nonnegative, got {cfg.rho}")
    elif cfg.rho >= cfg.box_length / 4:
        errors.append(f"run.rho = {cfg.rho} must be below box_length/4 = {cfg.box_length / 4}")
    if cfg.target_L3_norm < 0:
        errors.append(f"run.target_L3_norm must be nonnegative, got {cfg.target_L3_norm}")
    try:
        parse_preset(cfg.preset)
    except UnknownPresetError as e:
        errors.append(f"run.preset: {e}")
    for k, v in cfg.tolerances.items():
        if not v > 0:
            errors.append(f"{TOLERANCE_SECTION}.{k} must be positive, got {v}")
    return errors


def load_config_with_sources(path=None, overrides: dict | None = None) -> tuple[ExperimentConfig, dict]:
    """Config plus ``{field: "default" | "file" | "flag"}``.

    ``overrides`` entries that are None are ignored, so argparse namespaces
    can be passed through directly.
    """
    if path is not None and not Path(path).is_file():
        raise ConfigError([f"config file {path} does not exist"])
    values, tolerances, errors = _read(path)
    sources = {k: "default" for ks in SCHEMA.values() for k in ks}
    sources.update({k: "file" for k in values})
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if not any(k in ks for ks in SCHEMA.values()):
            errors.append(f"unknown override {k}; valid keys: {_valid_keys()}")
            continue
        values[k] = v
        sources[k] = "flag"
    cfg = ExperimentConfig(**values, tolerances=tolerances)
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg, sources


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Validated config from an INI file (may be None) and flag overrides."""
    return load_config_with_sources(path, overrides)[0]
