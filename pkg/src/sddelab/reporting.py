"""Deterministic report serialization: CSV series, JSON, run manifests.

Floats are written with 17 significant digits so a rerun with the same
config hash reproduces every output file byte for byte (the underlying
statistics are order-insensitive sums, so the bytes only depend on the
config).  Wall-clock time lives in the manifest, never in result files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = [
    "fmt17",
    "canonical_config_hash",
    "write_csv",
    "write_plot_data",
    "write_json",
    "RunManifest",
]


def fmt17(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, float):
        return fmt17(value)
    return value


def canonical_config_hash(config: Mapping) -> str:
    """SHA-256 over a canonical JSON encoding (sorted keys, 17-digit floats)."""
    blob = json.dumps(_canonical(dict(config)), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_csv(path: str, rows: Sequence[tuple[float, str, float, float]]) -> None:
    """Fixed-schema series file: time, statistic, value, std_error."""
    with open(path, "w") as fh:
        fh.write("time,statistic,value,std_error\n")
        for t, stat, value, se in rows:
            fh.write(f"{fmt17(t)},{stat},{fmt17(value)},{fmt17(se)}\n")


def write_plot_data(path: str, xs: Sequence[float], ys: Sequence[float],
                    label: str = "x y") -> None:
    """Two-column whitespace series with a single comment header."""
    with open(path, "w") as fh:
        fh.write(f"# {label}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{fmt17(x)} {fmt17(y)}\n")


def write_json(path: str, payload: Mapping) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunManifest:
    """What a run was and what it left behind."""

    config_hash: str
    code_version: str
    master_seed: int
    wall_time_s: float
    outputs: list[str] = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    def write(self, path: str) -> None:
        write_json(path, {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "master_seed": self.master_seed,
            "wall_time_s": self.wall_time_s,
            "outputs": sorted(self.outputs),
            "status": self.status,
            "error": self.error,
        })
