"""Experiment reports: named metric rows written as CSV plus a JSON summary."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ExperimentReport:
    name: str
    config: dict
    seed: int
    metrics: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    deterministic: bool = True

    def add(self, **row) -> None:
        row.setdefault("seed", self.seed)
        self.rows.append(row)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def columns(self) -> list[str]:
        cols = ["seed", "config_hash"]
        for row in self.rows:
            for key in row:
                if key not in cols:
                    cols.append(key)
        if not self.deterministic and "deterministic" not in cols:
            cols.append("deterministic")
        return cols

    def series(self, metric: str, **where) -> np.ndarray:
        vals = [
            r[metric]
            for r in self.rows
            if metric in r and all(r.get(k) == v for k, v in where.items())
        ]
        return np.asarray(vals, dtype=np.float64)

    def summary(self) -> dict:
        out = {}
        for m in self.metrics:
            s = self.series(m)
            s = s[np.isfinite(s)]
            if s.size == 0:
                continue
            out[m] = {
                "mean": float(s.mean()),
                "std": float(s.std()),
                "min": float(s.min()),
                "max": float(s.max()),
                "count": int(s.size),
            }
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = self.columns()
        h = self.config_hash
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                out = {"config_hash": h, **row}
                if not self.deterministic:
                    out.setdefault("deterministic", False)
                writer.writerow({k: _fmt(out.get(k, "")) for k in cols})
        return path

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "deterministic": self.deterministic,
            "rows": len(self.rows),
            "summary": self.summary(),
            "notes": self.notes,
        }


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v
