"""Reproducibility record written next to every run's artifacts."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


@dataclass
class RunManifest:
    mode: str
    seed: int
    iterations: int = 0
    samples: int = 0
    forward_sims: int = 0
    sims_per_eval: int = 0
    clamp_activations: int = 0
    penalized_samples: int = 0
    final_elbo: float = float("nan")
    wall_time: float = 0.0
    config_hash: str = ""
    version: str = __version__
    warnings: list[str] = field(default_factory=list)
    trace: list[tuple[int, float, float]] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        d = asdict(self)
        d.pop("trace")
        d["warnings"] = "; ".join(self.warnings)
        return "".join(f"{k}={v}\n" for k, v in d.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @staticmethod
    def read(path) -> dict[str, str]:
        out = {}
        for line in Path(path).read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
        return out


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_trace(path, trace, value_name: str = "elbo") -> None:
    with open(path, "w") as fh:
        fh.write(f"iteration,{value_name},wall_seconds\n")
        for it, val, wall in trace:
            fh.write(f"{it},{val!r},{wall:.6f}\n")
