"""Run configuration: INI-style ``[section]`` / ``key = value`` text.

Parsing is fail-closed: unknown sections or keys, type mismatches and
missing required keys raise ``ConfigError`` carrying the offending line.
Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

MODES = ("psi", "vpr", "build-prior", "simulate-data", "diagnose", "oracle")
PRIOR_FAMILIES = ("uniform", "gaussian", "smoothed", "windowed")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    t = s.lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _str(s):
    return s


def _floats(s):
    """Comma- or whitespace-separated numbers."""
    parts = s.replace(",", " ").split()
    if not parts:
        raise ValueError("empty number list")
    return [float(p) for p in parts]


def _ints(s):
    parts = s.replace(",", " ").split()
    if not parts:
        raise ValueError("empty integer list")
    return [int(p) for p in parts]


def _cells(s):
    """``iz ix; iz ix; ...`` cell positions."""
    out = []
    for chunk in s.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        iz, ix = chunk.replace(",", " ").split()
        out.append((int(iz), int(ix)))
    if not out:
        raise ValueError("empty cell list")
    return out


def _paths(s):
    return [p for p in s.replace(",", " ").split() if p]


_PATH, _PATHS = "path", "paths"
_TYPE_NAMES = {_int: "integer", _float: "number", _bool: "boolean", _str: "string",
               _floats: "number list", _ints: "integer list", _cells: "cell list"}

# section -> key -> (parser | "path" | "paths", default)
_PRIOR_KEYS = {
    "family": (_str, "uniform"),
    "mean": (_floats, None),          # scalar, per-depth list, or per-cell list
    "std": (_floats, None),
    "mean_file": (_PATH, None),
    "std_file": (_PATH, None),
    "sigma2": (_float, 500.0),
    "base": (_str, "uniform"),
    "lower": (_floats, None),         # optional narrower box for this prior
    "upper": (_floats, None),
    "correlation": (_PATH, None),     # offset table written by build-prior
    "max_jitter": (_float, 1e-2),
}

SCHEMA = {
    "run": {
        "mode": (_str, None),
        "seed": (_int, 0),
        "threads": (_int, 1),
        "out_dir": (_str, "runs"),
    },
    "grid": {
        "nz": (_int, None),
        "nx": (_int, None),
        "dx": (_float, 1.0),
        "water_rows": (_int, 0),
        "water_velocity": (_float, 1500.0),
    },
    "bounds": {
        "lower": (_floats, None),         # scalar, per-depth list, or per-cell list
        "upper": (_floats, None),
        "unbounded": (_bool, False),
    },
    "forward": {
        "kind": (_str, "linear"),
        "matrix": (_PATH, None),
        "data": (_PATH, None),
        "sigma_d": (_float, 0.1),
        "sponge": (_int, 20),
    },
    "survey": {
        "f0": (_float, 10.0),
        "dt": (_float, 0.002),
        "nt": (_int, 500),
        "amplitude": (_float, 1.0),
        "sources": (_cells, None),
        "receivers": (_cells, None),
        "receiver_row": (_int, None),
    },
    "prior": dict(_PRIOR_KEYS),
    "prior_new": dict(_PRIOR_KEYS),
    "optimizer": {
        "iterations": (_int, 5000),
        "samples": (_int, None),          # 2 for psi, 10 for vpr
        "lr": (_float, 1e-2),
        "pattern_width": (_int, 3),
        "init_std": (_float, 1.0),
        "path_gradient": (_bool, True),
        "analytic_entropy": (_bool, False),
        "early_stop": (_bool, False),
    },
    "vpr": {
        "q_old": (_PATH, None),
        "clamp": (_float, 50.0),
        "warm_start": (_bool, True),
        "whiten": (_bool, False),
    },
    "diagnose": {
        "q": (_PATH, None),
        "prior_section": (_str, "prior"),
        "n_samples": (_int, 2000),
        "cells": (_ints, None),
        "bins": (_int, 50),
        "window": (_ints, None),          # z0 x0 height width
        "truth": (_PATH, None),
        "reference_mean": (_PATH, None),  # CSV columns written by the oracle mode
        "reference_cov": (_PATH, None),
        "data": (_PATH, None),
    },
    "build_prior": {
        "images": (_PATHS, None),
        "window": (_int, 20),
        "n_subimages": (_int, 1000),
    },
    "simulate": {
        "velocity": (_PATH, None),
        "noise_seed": (_int, 0),
    },
    "oracle": {
        "n": (_int, 10),
        "k": (_int, 12),
        "sigma_d": (_float, 1.0),
        "std_a": (_float, 1.5),
        "mean_b": (_float, 0.3),
        "std_b": (_float, 0.75),
        "problem_seed": (_int, 0),
    },
}

MODE_SAMPLES = {"psi": 2, "vpr": 10}


@dataclass
class RunConfig:
    mode: str
    values: dict = field(default_factory=dict)    # section -> key -> parsed value
    lines: dict = field(default_factory=dict)     # (section, key) -> line number
    text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str, default=None):
        v = self.values.get(section, {}).get(key)
        if v is not None:
            return v
        d = SCHEMA[section][key][1]
        return default if d is None else d

    def has(self, section: str, key: str) -> bool:
        return self.values.get(section, {}).get(key) is not None

    def has_section(self, section: str) -> bool:
        return section in self.values

    def require(self, section: str, key: str):
        if not self.has(section, key):
            raise ConfigError(f"missing required key '{key}' in section [{section}]")
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    @property
    def threads(self) -> int:
        return self.get("run", "threads")

    @property
    def iterations(self) -> int:
        return self.get("optimizer", "iterations")

    @property
    def samples(self) -> int:
        return self.get("optimizer", "samples", MODE_SAMPLES.get(self.mode, 2))

    def override(self, section: str, key: str, value) -> None:
        self.values.setdefault(section, {})[key] = value

    def to_text(self) -> str:
        """Canonical text with every path made absolute; re-parses to the same values."""
        out = []
        for sec, keys in self.values.items():
            out.append(f"[{sec}]")
            for k, v in keys.items():
                out.append(f"{k} = {_format(v)}")
            out.append("")
        return "\n".join(out)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        if v and isinstance(v[0], tuple):
            return "; ".join(f"{a} {b}" for a, b in v)
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, base_dir=None, mode: str | None = None,
                 check_files: bool = True) -> RunConfig:
    """Parse and validate; ``mode`` (e.g. from the CLI subcommand) wins over ``[run] mode``."""
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    values: dict = {}
    lines: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in section [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key '{key}' in section [{section}]", lineno)
        kind = SCHEMA[section][key][0]
        try:
            if kind == _PATH:
                parsed = str((base / val).resolve()) if val else None
                if parsed is None:
                    raise ValueError("empty path")
            elif kind == _PATHS:
                parsed = [str((base / p).resolve()) for p in _paths(val)]
                if not parsed:
                    raise ValueError("empty path list")
            else:
                parsed = kind(val)
        except ValueError as exc:
            tname = {_PATH: "path", _PATHS: "path list"}.get(kind) or _TYPE_NAMES[kind]
            raise ConfigError(f"[{section}] {key}: expected {tname}, got {val!r} ({exc})",
                              lineno) from None
        values[section][key] = parsed
        lines[(section, key)] = lineno

    cfg_mode = values.get("run", {}).get("mode")
    mode = mode or cfg_mode
    if mode is None:
        raise ConfigError("missing required key 'mode' in section [run]")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}",
                          lines.get(("run", "mode")))
    values.setdefault("run", {})["mode"] = mode
    cfg = RunConfig(mode, values, lines, text, base)
    validate(cfg, check_files=check_files)
    return cfg


def load_config(path, mode: str | None = None, check_files: bool = True) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{p}: not valid UTF-8 ({exc})") from None
    return parse_config(text, base_dir=p.parent.resolve(), mode=mode, check_files=check_files)


def _err(cfg, section, key, msg):
    return ConfigError(f"[{section}] {key}: {msg}", cfg.lines.get((section, key)))


def validate(cfg: RunConfig, check_files: bool = True) -> None:
    for sec, key in (("optimizer", "iterations"), ("optimizer", "samples"), ("run", "threads"),
                     ("diagnose", "n_samples")):
        if cfg.has(sec, key) and cfg.values[sec][key] < 1:
            raise _err(cfg, sec, key, "must be at least 1")
    if cfg.has("optimizer", "lr") and not cfg.values["optimizer"]["lr"] > 0:
        raise _err(cfg, "optimizer", "lr", "must be positive")
    if cfg.has("run", "seed") and cfg.values["run"]["seed"] < 0:
        raise _err(cfg, "run", "seed", "must be non-negative")
    for sec in ("prior", "prior_new"):
        if cfg.has(sec, "family") and cfg.values[sec]["family"] not in PRIOR_FAMILIES:
            raise _err(cfg, sec, "family", f"expected one of {', '.join(PRIOR_FAMILIES)}")
        if cfg.has(sec, "base") and cfg.values[sec]["base"] not in ("uniform", "gaussian"):
            raise _err(cfg, sec, "base", "expected 'uniform' or 'gaussian'")
    if cfg.has("forward", "kind") and cfg.values["forward"]["kind"] not in ("linear", "acoustic"):
        raise _err(cfg, "forward", "kind", "expected 'linear' or 'acoustic'")

    mode = cfg.mode
    if mode in ("psi", "vpr", "diagnose", "simulate-data"):
        cfg.require("grid", "nz")
        cfg.require("grid", "nx")
        if not cfg.get("bounds", "unbounded"):
            cfg.require("bounds", "lower")
            cfg.require("bounds", "upper")
    if mode == "psi":
        cfg.require("forward", "data")
        if cfg.get("forward", "kind") == "linear":
            cfg.require("forward", "matrix")
        else:
            cfg.require("survey", "sources")
    if mode == "vpr":
        cfg.require("vpr", "q_old")
        if not cfg.has_section("prior_new"):
            raise ConfigError("missing required section [prior_new]")
    if mode == "diagnose":
        cfg.require("diagnose", "q")
    if mode == "simulate-data":
        cfg.require("simulate", "velocity")
        cfg.require("survey", "sources")
    if mode == "build-prior":
        cfg.require("build_prior", "images")

    if check_files:
        for (sec, key), lineno in cfg.lines.items():
            kind = SCHEMA[sec][key][0]
            if kind not in (_PATH, _PATHS):
                continue
            # outputs are never listed as paths, so every path must already exist
            for p in ([cfg.values[sec][key]] if kind == _PATH else cfg.values[sec][key]):
                if not Path(p).exists():
                    raise ConfigError(f"[{sec}] {key}: file not found: {p}", lineno)
