"""Training loop (Adam, early stopping on validation AUPRC) and k-fold CV.

``fit`` takes a *raw* dataset: it computes z-score statistics from the
training ids only, carries them inside the returned model, and applies them
to anything the model later scores.  Identical seeds give bit-identical
models.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from .data import Dataset, apply_normalization, fit_normalization, make_batches, split_folds
from .head import cross_entropy, total_loss
from .metrics import METRICS, EvalReport, auprc, auroc
from .model import FittedModel, ModelConfig, batch_tensors, forward_batch, init_params, score_cases
from .optim import adam_step


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    lambda_decorr: float = 1.0
    seed: int = 0
    val_fraction: float = 0.15
    d: int = 32
    heads: int = 4
    d_ff: int | None = None
    per_position_keys: bool = False
    time_aware: bool = True
    pool_positions: bool = False

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr, batch_size, max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if self.lambda_decorr < 0:
            raise ValueError("lambda_decorr must be non-negative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def model_config(self, dataset: Dataset) -> ModelConfig:
        return ModelConfig(n_features=dataset.n_features,
                           n_baseline=dataset.n_baseline,
                           d=self.d, heads=self.heads, d_ff=self.d_ff,
                           per_position_keys=self.per_position_keys,
                           time_aware=self.time_aware,
                           pool_positions=self.pool_positions)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def fit(dataset: Dataset, train_ids: list[str], val_ids: list[str],
        config: TrainConfig) -> FittedModel:
    """Train on raw data; returns the best-validation-AUPRC model."""
    config.validate()
    if not train_ids or not val_ids:
        raise ValueError("train and validation splits must be non-empty")
    if set(train_ids) & set(val_ids):
        raise ValueError("train and validation splits overlap")
    norm = fit_normalization(dataset, train_ids)
    ds = apply_normalization(dataset, norm)
    cfg = config.model_config(dataset)
    store = init_params(cfg, _derive_seed(config.seed, 1))
    val_cases = ds.subset(val_ids)
    val_labels = np.array([c.label for c in val_cases], dtype=np.int64)

    log: list[dict] = []
    best_val = -np.inf
    best_snap = store.snapshot()
    stale = 0
    for epoch in range(config.max_epochs):
        batches = make_batches(ds, train_ids, config.batch_size,
                               _derive_seed(config.seed, 2, epoch))
        loss_sum = ce_sum = 0.0
        seen = 0
        for b_idx, batch in enumerate(batches):
            records, delta, baseline, labels = batch_tensors(batch)
            store.zero_grad()
            lv = store.leaves()
            prob, decorr, _ = forward_batch(lv, records, delta, baseline, cfg)
            ce = cross_entropy(prob, labels)
            loss = ce + config.lambda_decorr * decorr
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite loss at epoch {epoch} "
                                   f"batch {b_idx}")
            loss.backward()
            adam_step(store, config.lr)
            loss_sum += float(loss.data) * len(batch)
            ce_sum += float(ce.data) * len(batch)
            seen += len(batch)
        val_scores = score_cases(store, cfg, val_cases)
        entry = {"epoch": epoch,
                 "train_loss": loss_sum / seen,
                 "train_ce": ce_sum / seen,
                 "val_auprc": auprc(val_scores, val_labels),
                 "val_auroc": auroc(val_scores, val_labels)}
        log.append(entry)
        if entry["val_auprc"] > best_val:
            best_val = entry["val_auprc"]
            best_snap = store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    store.restore(best_snap)
    return FittedModel(store, cfg, list(dataset.feature_names),
                       list(dataset.baseline_names), norm, log)


def split_train_val(ids: list[str], labels: np.ndarray, val_fraction: float,
                    seed: int) -> tuple[list[str], list[str]]:
    """Shuffled split that keeps both classes on both sides when possible."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(ids)]))
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(val_fraction * len(ids))))
    if n_val >= len(ids):
        n_val = len(ids) - 1
    val_idx = list(order[:n_val])
    train_idx = list(order[n_val:])
    labels = np.asarray(labels)
    for cls in (0, 1):
        if not (labels[val_idx] == cls).any() and (labels[train_idx] == cls).sum() > 1:
            give = next(i for i in train_idx if labels[i] == cls)
            take = next((i for i in val_idx
                         if (labels[val_idx] == labels[i]).sum() > 1), val_idx[0])
            train_idx.remove(give)
            val_idx.remove(take)
            val_idx.append(give)
            train_idx.append(take)
    return [ids[i] for i in train_idx], [ids[i] for i in val_idx]


def _run_fold(args) -> dict[str, float]:
    dataset, fold_idx, test_ids, rest_ids, config = args
    labels_by_id = {c.id: c.label for c in dataset.cases}
    rest_labels = np.array([labels_by_id[i] for i in rest_ids])
    train_ids, val_ids = split_train_val(rest_ids, rest_labels,
                                         config.val_fraction,
                                         _derive_seed(config.seed, 3, fold_idx))
    model = fit(dataset, train_ids, val_ids, config)
    scores, labels = model.score(dataset, test_ids)
    return {name: fn(scores, labels) for name, fn in METRICS.items()}


def cross_validate(dataset: Dataset, k: int, config: TrainConfig,
                   workers: int = 1) -> EvalReport:
    """k-fold CV; each fold trains a fresh model on the remaining cases and
    is scored on the held-out fold.  Fold metrics become the replicates."""
    config.validate()
    folds = split_folds(dataset, k, config.seed)
    all_ids = dataset.ids()
    jobs = []
    for i, test_ids in enumerate(folds):
        in_test = set(test_ids)
        rest = [x for x in all_ids if x not in in_test]
        jobs.append((dataset, i, test_ids, rest, config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = []
        for job in jobs:
            try:
                results.append(_run_fold(job))
            except Exception as exc:
                raise RuntimeError(f"fold {job[1]}: {exc}") from exc
    replicates = {name: [r[name] for r in results] for name in METRICS}
    points = {name: float(np.mean(vals)) for name, vals in replicates.items()}
    return EvalReport.from_replicates(points, replicates)
