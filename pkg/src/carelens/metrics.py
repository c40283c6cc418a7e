"""Binary ranking metrics and bootstrap/aggregate evaluation reports.

Tie handling is deterministic and documented per metric: AUROC gives half
credit to score ties; AUPRC and min(Se, P+) sweep distinct scores in
descending order, so tied cases enter a threshold as one group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _checked(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores and labels must be equal-length 1-D and non-empty")
    if np.isnan(s).any():
        raise ValueError("NaN score")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _descending_groups(s: np.ndarray, y: np.ndarray):
    """Yield (tp, fp) cumulative counts after each distinct score group,
    walking scores high to low."""
    order = np.argsort(-s, kind="mergesort")
    tp = fp = 0
    i = 0
    n = s.shape[0]
    while i < n:
        j = i
        while j < n and s[order[j]] == s[order[i]]:
            if y[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        yield tp, fp
        i = j


def auroc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties worth 1/2.

    Computed from average ranks; undefined unless both classes appear.
    """
    s, y = _checked(scores, labels)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("undefined AUROC: needs both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(y.size)
    i = 0
    while i < y.size:
        j = i
        while j < y.size and s[order[j]] == s[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)   # average of ranks i+1 .. j
        i = j
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def auprc(scores, labels) -> float:
    """Average precision: sum of precision x recall-increment over the
    descending-score sweep.  Needs at least one positive."""
    s, y = _checked(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise ValueError("undefined AUPRC: needs at least one positive")
    ap = 0.0
    tp_prev = 0
    for tp, fp in _descending_groups(s, y):
        if tp > tp_prev:
            ap += (tp - tp_prev) / pos * (tp / (tp + fp))
        tp_prev = tp
    return float(ap)


def min_se_pplus(scores, labels) -> float:
    """Best achievable min(sensitivity, precision) over thresholds at the
    distinct observed scores (predict positive when score >= threshold)."""
    s, y = _checked(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise ValueError("undefined min(Se, P+): needs at least one positive")
    best = 0.0
    for tp, fp in _descending_groups(s, y):
        best = max(best, min(tp / pos, tp / (tp + fp)))
    return float(best)


METRICS = {"auroc": auroc, "auprc": auprc, "min_se_pplus": min_se_pplus}


@dataclass
class MetricSummary:
    point: float
    mean: float
    std: float
    replicates: list[float]

    def to_json(self) -> dict:
        return {"point": self.point, "mean": self.mean, "std": self.std,
                "replicates": self.replicates}


@dataclass
class EvalReport:
    metrics: dict[str, MetricSummary]

    @staticmethod
    def from_replicates(points: dict[str, float],
                        replicates: dict[str, list[float]]) -> "EvalReport":
        out = {}
        for name, reps in replicates.items():
            arr = np.asarray(reps)
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            out[name] = MetricSummary(points[name], float(arr.mean()), std,
                                      [float(r) for r in reps])
        return EvalReport(out)

    def format_table(self) -> str:
        """mean(std) per metric, in the usual leading-dot style."""
        lines = []
        for name, m in self.metrics.items():
            lines.append(f"{name:<14} {_dot(m.mean, 4)} ({_dot(m.std, 3)})")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {name: m.to_json() for name, m in self.metrics.items()}


def _dot(x: float, digits: int) -> str:
    s = f"{x:.{digits}f}"
    return s[1:] if s.startswith("0.") else s


def bootstrap_eval(scores, labels, reps: int, seed: int) -> EvalReport:
    """Resample cases with replacement ``reps`` times and summarize each
    metric.  Replicates that lose a class are redrawn from the same stream
    (the sample must contain both classes to begin with)."""
    s, y = _checked(scores, labels)
    if reps < 1:
        raise ValueError("reps must be positive")
    if y.sum() in (0, y.size):
        raise ValueError("bootstrap needs both classes in the sample")
    points = {name: fn(s, y) for name, fn in METRICS.items()}
    rng = np.random.default_rng(np.random.SeedSequence([seed, reps]))
    replicates: dict[str, list[float]] = {name: [] for name in METRICS}
    for _ in range(reps):
        for attempt in range(1000):
            idx = rng.integers(0, y.size, y.size)
            if 0 < y[idx].sum() < y.size:
                break
        else:
            raise RuntimeError("bootstrap: could not draw a two-class replicate")
        for name, fn in METRICS.items():
            replicates[name].append(fn(s[idx], y[idx]))
    return EvalReport.from_replicates(points, replicates)
