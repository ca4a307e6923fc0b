"""Feature-distance telemetry and correlation analysis.

Records are written one JSON object per line.  Feature keys are strings:
``Emb``, ``HS@2`` (layer 2), a ``/psd`` suffix for the pair-wise scaled
dot-product variant, and ``Soft/KL5`` for soft-label KL at T=5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .errors import CorrelationError, DataError
from .hooks import DistanceSpec, apply_relation, compute_distance, soft_logits, uniform_map

KL_TEMPERATURES = (1, 5, 10, 15, 20)


@dataclass
class DistanceRecord:
    iteration: int
    distances: dict = field(default_factory=dict)
    loss: float = float("nan")
    task_metric: float | None = None
    stage: str = ""

    def to_dict(self) -> dict:
        d = {"iteration": self.iteration, "stage": self.stage, "loss": self.loss,
             "distances": dict(sorted(self.distances.items()))}
        if self.task_metric is not None:
            d["task_metric"] = self.task_metric
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceRecord":
        return cls(int(d["iteration"]), dict(d.get("distances", {})), float(d["loss"]),
                   d.get("task_metric"), d.get("stage", ""))


def feature_key(kind: str, layer: int | None = None, variant: str | None = None) -> str:
    key = kind if layer is None else f"{kind}@{layer}"
    return key if variant is None else f"{key}/{variant}"


def snapshot_distances(student_taps, teacher_taps, student_spec, teacher_spec, batch) -> dict[str, float]:
    """Distances between every recorded teacher/student feature pair.

    Layers are paired with the uniform map.  Raw MSE is reported where the
    shapes agree; hidden-size features also get the pair-wise scaled
    dot-product variant, which is comparable across widths.
    """
    out: dict[str, float] = {}
    mse = DistanceSpec("MSE")
    Ls, Lt = student_spec.layers, teacher_spec.layers

    def both(kind, ls, lt):
        return student_taps.get((kind, ls)), teacher_taps.get((kind, lt))

    pairs = [("Emb", None, None)] + [(k, i, uniform_map(i, Ls, Lt)) for k in ("Att", "Q", "K", "V", "HS")
                                     for i in range(1, Ls + 1)]
    with ag.no_grad():
        for kind, ls, lt in pairs:
            s, t = both(kind, ls, lt)
            if s is None or t is None:
                continue
            if s.shape == t.shape:
                out[feature_key(kind, ls)] = compute_distance(t, s, mse).item()
            if kind != "Att":
                ps = apply_relation(s, None, "pairwise_scaled_dot")
                pt = apply_relation(t, None, "pairwise_scaled_dot")
                out[feature_key(kind, ls, "psd")] = compute_distance(pt, ps, mse).item()
        s, t = both("Soft", None, None)
        if s is not None and t is not None:
            s, t = soft_logits(s, batch), soft_logits(t, batch)
            for T in KL_TEMPERATURES:
                val = compute_distance(t, s, DistanceSpec("KL", temperature=float(T))).item() / (T * T)
                out[feature_key("Soft", None, f"KL{T}")] = max(val, 0.0)
    return out


SNAPSHOT_FEATURES = ("Emb", ("Att", "all"), ("Q", "all"), ("K", "all"), ("V", "all"), ("HS", "all"), "Soft")


# -- statistics --------------------------------------------------------------------------
def _as_pair(x, y, min_len=3):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("series must be 1-D and of equal length")
    if len(x) < min_len:
        raise DataError(f"need at least {min_len} points, got {len(x)}")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _as_pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise CorrelationError("zero variance: correlation undefined")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rank_average(x: Sequence[float]) -> np.ndarray:
    """1-based fractional ranks; tied values share their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _as_pair(x, y)
    return pearson(rank_average(x), rank_average(y))


def normalize_series(values: Sequence[float]) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("empty series")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [0.0] * len(v)
    out = (v - lo) / (hi - lo)
    out[v == lo] = 0.0
    out[v == hi] = 1.0
    return out.tolist()


def smooth(values: Sequence[float], window: int = 5) -> list[float]:
    """Trailing moving average over full windows."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return []
    c = np.cumsum(np.concatenate([[0.0], v]))
    return ((c[window:] - c[:-window]) / window).tolist()


@dataclass
class CorrelationReport:
    against: str
    rows: dict            # key -> (pearson, spearman)
    undefined: list

    def to_dict(self) -> dict:
        return {"against": self.against,
                "rows": {k: {"pearson": p, "spearman": s} for k, (p, s) in self.rows.items()},
                "undefined": self.undefined}

    def format_table(self) -> str:
        width = max([len("feature")] + [len(k) for k in self.rows])
        lines = [f"{'feature':<{width}}  {'pearson':>9}  {'spearman':>9}"]
        for k, (p, s) in self.rows.items():
            lines.append(f"{k:<{width}}  {p:>9.4f}  {s:>9.4f}")
        if self.undefined:
            lines.append("undefined: " + ", ".join(self.undefined))
        return "\n".join(lines)


def correlation_report(records: Sequence[DistanceRecord], against: str = "loss") -> CorrelationReport:
    if len(records) < 3:
        raise DataError(f"correlation needs at least 3 records, got {len(records)}")
    if against == "loss":
        target = [r.loss for r in records]
    elif against == "task_metric":
        if any(r.task_metric is None for r in records):
            raise DataError("task_metric missing from some records")
        target = [r.task_metric for r in records]
    else:
        raise DataError(f"unknown correlation target {against!r}")
    keys = sorted(set().union(*(r.distances for r in records)))
    rows, undefined = {}, []
    for k in keys:
        pts = [(r.distances[k], t) for r, t in zip(records, target) if k in r.distances]
        if len(pts) < 3:
            undefined.append(k)
            continue
        xs, ys = zip(*pts)
        try:
            rows[k] = (pearson(xs, ys), spearman(xs, ys))
        except CorrelationError:
            undefined.append(k)
    return CorrelationReport(against, rows, undefined)


# -- IO -----------------------------------------------------------------------------------------
def dump_record(record: DistanceRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))


class TelemetrySink:
    """Append-only line-delimited record writer (``path=None`` keeps records in memory only)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[DistanceRecord] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: DistanceRecord):
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(dump_record(record) + "\n")


def read_records(path: str | Path) -> list[DistanceRecord]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            out.append(DistanceRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{i + 1}: bad telemetry record ({exc})") from None
    return out
