"""Prediction head: baseline-queried attention over the re-encoded feature
rows, then a sigmoid risk score.

The query comes from the re-encoded baseline row, so static context decides
how much each dynamic feature contributes to the final summary.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var

PROB_CLAMP = 1e-7


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_head_params(store, d: int, n_features: int, rng: np.random.Generator,
                     per_position_keys: bool = False) -> None:
    store.add("head.W_q_base", _uniform(rng, (d, d), d))
    if per_position_keys:
        for i in range(n_features + 1):
            store.add(f"head.W_k_{i}", _uniform(rng, (d, d), d))
    else:
        store.add("head.W_k", _uniform(rng, (d, d), d))
    store.add("head.W_out", _uniform(rng, (1, d), d))
    store.add("head.b_out", np.zeros(1))


def final_attention(fstar: Var, lv: dict[str, Var],
                    per_position_keys: bool = False) -> tuple[Var, Var]:
    """Attend over (B, P, d) rows with the baseline row (last) as query.

    Keys use one shared projection by default, or one per position when
    ``per_position_keys`` is set (the baseline row then owns the last one).
    Returns (patient summary (B, d), attention weights (B, P)).
    """
    fstar = ad.as_var(fstar)
    squeeze = fstar.ndim == 2
    if squeeze:
        fstar = ad.reshape(fstar, (1,) + fstar.shape)
    b_size, p_len, d = fstar.shape
    q = fstar[:, -1, :] @ ad.transpose(lv["head.W_q_base"])      # (B, d)
    if per_position_keys:
        keys = ad.stack([fstar[:, i, :] @ ad.transpose(lv[f"head.W_k_{i}"])
                         for i in range(p_len)], axis=1)
    else:
        keys = fstar @ ad.transpose(lv["head.W_k"])              # (B, P, d)
    zeta = ad.tanh(ad.vsum(ad.reshape(q, (b_size, 1, d)) * keys, axis=-1))
    alpha = ad.softmax(zeta, axis=-1)                            # (B, P)
    summary = ad.reshape(ad.reshape(alpha, (b_size, 1, p_len)) @ fstar,
                         (b_size, d))
    if squeeze:
        return ad.reshape(summary, (d,)), ad.reshape(alpha, (p_len,))
    return summary, alpha


def predict(summary: Var, lv: dict[str, Var]) -> Var:
    """Sigmoid risk probability per row, clamped away from 0 and 1."""
    summary = ad.as_var(summary)
    squeeze = summary.ndim == 1
    if squeeze:
        summary = ad.reshape(summary, (1,) + summary.shape)
    z = summary @ ad.transpose(lv["head.W_out"]) + lv["head.b_out"]
    prob = ad.clip(ad.sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    prob = ad.reshape(prob, (prob.shape[0],))
    return ad.reshape(prob, ()) if squeeze else prob


def cross_entropy(prob: Var, labels) -> Var:
    """Mean binary cross-entropy against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64)
    ll = y * ad.log(prob) + (1.0 - y) * ad.log(1.0 - prob)
    return -ad.vmean(ll)


def total_loss(prob: Var, labels, decorr: Var, lambda_decorr: float) -> Var:
    """Mean cross-entropy plus the weighted covariance penalty."""
    return cross_entropy(prob, labels) + lambda_decorr * decorr
