"""Experiment reports: records, summaries, curves and their serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REPORT_FORMAT = "divdrop.report/1"


def summarize(values: Iterable[float]) -> dict:
    """Mean, spread and percentiles of a metric; both std and standard error."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {"n": 0}
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    q = np.percentile(v, [5, 25, 50, 75, 95])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": std,
        "std_err": std / math.sqrt(v.size),
        "min": float(v.min()),
        "p05": float(q[0]),
        "p25": float(q[1]),
        "median": float(q[2]),
        "p75": float(q[3]),
        "p95": float(q[4]),
        "max": float(v.max()),
    }


def group_summaries(records: Sequence[dict], keys: Sequence[str], metric: str) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if metric in r:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r[metric])
    return [dict(zip(keys, k), metric=metric, **summarize(vals)) for k, vals in groups.items()]


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    records: list[dict] = field(default_factory=list)
    summaries: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    timings: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "format": REPORT_FORMAT,
            "kind": self.kind,
            "config": self.config,
            "records": self.records,
            "summaries": self.summaries,
            "curves": self.curves,
            "failures": self.failures,
        }
        if self.timings is not None:
            doc["timings"] = self.timings
        return _clean(doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_records_csv(self, path) -> None:
        cols: list[str] = []
        for r in self.records:
            for k in r:
                if k not in cols:
                    cols.append(k)
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.records:
                w.writerow(_clean(r))

    def summary_for(self, metric: str, **match) -> dict | None:
        for s in self.summaries:
            if s.get("metric") == metric and all(s.get(k) == v for k, v in match.items()):
                return s
        return None

    def table(self) -> str:
        """Plain-text table of the summaries for terminal output."""
        if not self.summaries:
            return "(no summaries)"
        keys = [k for k in self.summaries[0] if k not in ("metric",) and k not in _STAT_KEYS]
        lines = ["\t".join(keys + ["metric", "mean", "std", "n"])]
        for s in self.summaries:
            mean = s.get("mean")
            std = s.get("std")
            lines.append(
                "\t".join(
                    [str(s.get(k)) for k in keys]
                    + [s["metric"], "nan" if mean is None else f"{mean:.4f}", "nan" if std is None else f"{std:.4f}", str(s.get("n", 0))]
                )
            )
        return "\n".join(lines)


_STAT_KEYS = {"n", "mean", "std", "std_err", "min", "p05", "p25", "median", "p75", "p95", "max"}
