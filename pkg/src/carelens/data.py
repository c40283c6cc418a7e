"""Patient dataset schema, file io, normalization, folds, and batching.

File format: UTF-8 text, one JSON object per line.  The first line is a
header ``{"feature_names": [...], "baseline_names": [...]}``; every other
line is one case::

    {"id": "p00001", "baseline": [..S..],
     "visits": [{"t": 0.0, "values": [..N..]}, ...], "label": 0}

Timestamps are hours since the first visit (so ``t`` starts at 0 and is
strictly increasing).  ``values`` may also be an object keyed by feature
name; names missing from the header are an error.  Cases that violate the
schema invariants are skipped with a logged diagnostic naming the case id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    """File-level schema violation that aborts loading (unlike per-case
    problems, which only skip the offending case)."""


@dataclass
class PatientCase:
    """One patient: static baseline vector plus an irregular visit series."""

    id: str
    baseline: np.ndarray     # (S,)
    timestamps: np.ndarray   # (T,) hours, t[0] == 0, strictly increasing
    records: np.ndarray      # (N, T) one row per dynamic feature
    label: int

    @property
    def n_visits(self) -> int:
        return int(self.timestamps.shape[0])

    def validate(self, n_features: int, n_baseline: int) -> None:
        t = self.timestamps
        if t.ndim != 1 or t.shape[0] < 1:
            raise ValueError(f"case {self.id}: needs at least one visit")
        if t[0] != 0.0:
            raise ValueError(f"case {self.id}: timestamps must start at 0")
        if t.shape[0] > 1 and not np.all(np.diff(t) > 0):
            raise ValueError(f"case {self.id}: timestamps must be strictly increasing")
        if self.records.shape != (n_features, t.shape[0]):
            raise ValueError(f"case {self.id}: records shape {self.records.shape} "
                             f"!= ({n_features}, {t.shape[0]})")
        if self.baseline.shape != (n_baseline,):
            raise ValueError(f"case {self.id}: baseline length {self.baseline.shape[0]} "
                             f"!= {n_baseline}")
        if self.label not in (0, 1):
            raise ValueError(f"case {self.id}: label must be 0 or 1")
        for name, arr in (("baseline", self.baseline), ("timestamps", t),
                          ("records", self.records)):
            if not np.isfinite(arr).all():
                raise ValueError(f"case {self.id}: non-finite value in {name}")


@dataclass
class Normalization:
    """Z-score statistics, always computed from the training split only."""

    feature_mean: np.ndarray   # (N,)
    feature_std: np.ndarray    # (N,) floored at STD_FLOOR
    baseline_mean: np.ndarray  # (S,)
    baseline_std: np.ndarray   # (S,)
    baseline_is_flag: np.ndarray  # (S,) bool; flags pass through untouched

    def to_json(self) -> dict:
        return {"feature_mean": self.feature_mean.tolist(),
                "feature_std": self.feature_std.tolist(),
                "baseline_mean": self.baseline_mean.tolist(),
                "baseline_std": self.baseline_std.tolist(),
                "baseline_is_flag": self.baseline_is_flag.astype(int).tolist()}

    @staticmethod
    def from_json(d: dict) -> "Normalization":
        return Normalization(
            np.array(d["feature_mean"], dtype=np.float64),
            np.array(d["feature_std"], dtype=np.float64),
            np.array(d["baseline_mean"], dtype=np.float64),
            np.array(d["baseline_std"], dtype=np.float64),
            np.array(d["baseline_is_flag"], dtype=bool))


@dataclass
class Dataset:
    feature_names: list[str]
    baseline_names: list[str]
    cases: list[PatientCase]
    normalization: Normalization | None = None
    rejects: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_baseline(self) -> int:
        return len(self.baseline_names)

    def __len__(self) -> int:
        return len(self.cases)

    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cases], dtype=np.int64)

    def case(self, case_id: str) -> PatientCase:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(f"no case with id '{case_id}'")

    def subset(self, ids: Iterable[str]) -> list[PatientCase]:
        by_id = {c.id: c for c in self.cases}
        return [by_id[i] for i in ids]


def _parse_values(raw, feature_names: list[str], case_id: str) -> list[float]:
    if isinstance(raw, dict):
        unknown = set(raw) - set(feature_names)
        if unknown:
            # a name outside the header means the file disagrees with its
            # own schema, so give up on the whole file
            raise DatasetFormatError(f"case {case_id}: unknown feature name "
                                     f"'{sorted(unknown)[0]}'")
        missing = set(feature_names) - set(raw)
        if missing:
            raise ValueError(f"case {case_id}: missing feature "
                             f"'{sorted(missing)[0]}'")
        return [float(raw[n]) for n in feature_names]
    if len(raw) != len(feature_names):
        raise ValueError(f"case {case_id}: expected {len(feature_names)} values, "
                         f"got {len(raw)}")
    return [float(v) for v in raw]


def load_dataset(path) -> Dataset:
    """Parse a dataset file; invalid cases are skipped and recorded in
    ``rejects`` with a diagnostic."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    try:
        feature_names = list(header["feature_names"])
        baseline_names = list(header["baseline_names"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed header line") from exc
    ds = Dataset(feature_names, baseline_names, [])
    seen: set[str] = set()
    for ln in lines[1:]:
        obj = json.loads(ln)
        case_id = str(obj.get("id", "<missing id>"))
        try:
            if case_id in seen:
                raise ValueError(f"case {case_id}: duplicate id")
            visits = obj["visits"]
            ts = [float(v["t"]) for v in visits]
            vals = [_parse_values(v["values"], feature_names, case_id)
                    for v in visits]
            case = PatientCase(
                id=case_id,
                baseline=np.array([float(x) for x in obj["baseline"]],
                                  dtype=np.float64),
                timestamps=np.array(ts, dtype=np.float64),
                records=np.array(vals, dtype=np.float64).T
                        if vals else np.zeros((len(feature_names), 0)),
                label=int(obj["label"]))
            case.validate(len(feature_names), len(baseline_names))
        except DatasetFormatError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("rejected %s: %s", case_id, exc)
            ds.rejects.append((case_id, str(exc)))
            continue
        seen.add(case_id)
        ds.cases.append(case)
    return ds


def save_dataset(dataset: Dataset, path) -> None:
    """Write the line-delimited format; floats round-trip bit for bit."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"feature_names": dataset.feature_names,
                             "baseline_names": dataset.baseline_names}) + "\n")
        for c in dataset.cases:
            fh.write(json.dumps({
                "id": c.id,
                "baseline": c.baseline.tolist(),
                "visits": [{"t": float(t), "values": c.records[:, j].tolist()}
                           for j, t in enumerate(c.timestamps)],
                "label": int(c.label)}) + "\n")


def fit_normalization(dataset: Dataset, train_ids: Iterable[str]) -> Normalization:
    """Per-feature z-score stats over all training visits; baseline
    dimensions whose training values all lie in {0, 1} count as flags."""
    train = dataset.subset(train_ids)
    if not train:
        raise ValueError("empty training split")
    s = dataset.n_baseline
    pooled = np.concatenate([c.records for c in train], axis=1)  # (N, sum T)
    f_mean = pooled.mean(axis=1)
    f_std = np.maximum(pooled.std(axis=1), STD_FLOOR)
    base = np.stack([c.baseline for c in train], axis=0)  # (n_train, S)
    is_flag = np.array([np.isin(base[:, j], (0.0, 1.0)).all() for j in range(s)])
    b_mean = np.where(is_flag, 0.0, base.mean(axis=0))
    b_std = np.where(is_flag, 1.0, np.maximum(base.std(axis=0), STD_FLOOR))
    return Normalization(f_mean, f_std, b_mean, b_std, is_flag)


def apply_normalization(dataset: Dataset, norm: Normalization) -> Dataset:
    out_cases = []
    for c in dataset.cases:
        out_cases.append(replace(
            c,
            baseline=(c.baseline - norm.baseline_mean) / norm.baseline_std,
            timestamps=c.timestamps.copy(),
            records=(c.records - norm.feature_mean[:, None])
                    / norm.feature_std[:, None]))
    return Dataset(list(dataset.feature_names), list(dataset.baseline_names),
                   out_cases, normalization=norm)


def normalize(dataset: Dataset, train_ids: Iterable[str]) -> Dataset:
    """Z-score every case with statistics fit on ``train_ids`` only."""
    return apply_normalization(dataset, fit_normalization(dataset, train_ids))


def split_folds(dataset: Dataset, k: int, seed: int) -> list[list[str]]:
    """Shuffle ids and deal them into k folds with sizes differing by at
    most one.  Deterministic under the seed."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds {len(dataset)} cases")
    ids = dataset.ids()
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(ids)]))
    order = rng.permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return folds


def make_batches(dataset: Dataset, ids: Sequence[str], batch_size: int,
                 seed: int) -> list[list[PatientCase]]:
    """Batches of cases sharing an identical visit count (no padding).

    Cases are bucketed by T, shuffled within buckets, chunked to
    ``batch_size``, and the batch order itself is shuffled, all driven by
    the seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, batch_size]))
    buckets: dict[int, list[PatientCase]] = {}
    for c in dataset.subset(ids):
        buckets.setdefault(c.n_visits, []).append(c)
    batches: list[list[PatientCase]] = []
    for t in sorted(buckets):
        group = buckets[t]
        order = rng.permutation(len(group))
        for start in range(0, len(group), batch_size):
            batches.append([group[i] for i in order[start:start + batch_size]])
    batch_order = rng.permutation(len(batches))
    return [batches[i] for i in batch_order]
