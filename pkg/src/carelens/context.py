"""Feature-context encoder: multi-head self-attention across the feature
rows, a cross-head covariance penalty, and a post-norm residual block.

Attention here mixes *feature positions* (N dynamic summaries plus the
baseline row), not time steps.  The covariance penalty pushes the batch
covariance of the concatenated head outputs toward a diagonal matrix so
heads stop duplicating one another; it is computed per feature position
and averaged (optionally pooled across positions instead).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var

LN_EPS = 1e-5


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_encoder_params(store, d: int, n_heads: int, d_ff: int,
                        rng: np.random.Generator) -> None:
    if d % n_heads != 0:
        raise ValueError(f"d={d} not divisible by heads={n_heads}")
    d_k = d // n_heads
    for m in range(n_heads):
        for w in ("W_q", "W_k", "W_v"):
            store.add(f"encoder.head{m}.{w}", _uniform(rng, (d_k, d), d))
    store.add("encoder.W_O", _uniform(rng, (d, n_heads * d_k), n_heads * d_k))
    store.add("encoder.ffn.W_1", _uniform(rng, (d_ff, d), d))
    store.add("encoder.ffn.b_1", np.zeros(d_ff))
    store.add("encoder.ffn.W_2", _uniform(rng, (d, d_ff), d_ff))
    store.add("encoder.ffn.b_2", np.zeros(d))
    for ln in ("ln1", "ln2"):
        store.add(f"encoder.{ln}.gain", np.ones(d))
        store.add(f"encoder.{ln}.bias", np.zeros(d))


def multi_head_attention(features: Var, heads: list[dict[str, Var]]
                         ) -> tuple[Var, list[Var]]:
    """Scaled dot-product self-attention over rows of (..., P, d) features.

    Returns the concatenated head outputs (..., P, M*d_k) *before* the
    output projection (that feeds the covariance penalty) and each head's
    attention matrix (..., P, P).
    """
    outs, attns = [], []
    for hp in heads:
        q = features @ ad.transpose(hp["W_q"])
        k = features @ ad.transpose(hp["W_k"])
        v = features @ ad.transpose(hp["W_v"])
        d_k = hp["W_q"].shape[0]
        scores = (q @ ad.t2(k)) * (1.0 / np.sqrt(d_k))
        alpha = ad.softmax(scores, axis=-1)
        outs.append(alpha @ v)
        attns.append(alpha)
    return ad.concat(outs, axis=-1), attns


def decorrelation_loss(u) -> Var:
    """Off-diagonal energy of the batch covariance of (B, K) activations.

    C = (1/B) sum_b (u_b - mean)(u_b - mean)^T;  loss = (|C|_F^2 - |diag|^2)/2.
    Zero for B = 1 or a constant batch; always >= 0.
    """
    u = ad.as_var(u)
    b_size, k = u.shape
    cent = u - ad.vmean(u, axis=0, keepdims=True)
    cov = (ad.transpose(cent) @ cent) * (1.0 / b_size)
    off = 1.0 - np.eye(k)
    return 0.5 * ad.vsum(cov * cov * off)


def decorrelation_total(u_all: Var, pool_positions: bool = False) -> Var:
    """Covariance penalty for (B, P, K) head outputs.

    Per-position covariances averaged over P by default; ``pool_positions``
    instead treats all B*P rows as one sample.
    """
    b_size, p_len, k = u_all.shape
    if pool_positions:
        return decorrelation_loss(ad.reshape(u_all, (b_size * p_len, k)))
    u_t = ad.transpose(u_all, (1, 0, 2))                      # (P, B, K)
    cent = u_t - ad.vmean(u_t, axis=1, keepdims=True)
    cov = (ad.t2(cent) @ cent) * (1.0 / b_size)               # (P, K, K)
    off = 1.0 - np.eye(k)
    per_pos = 0.5 * ad.vsum(cov * cov * off, axis=(1, 2))     # (P,)
    return ad.vmean(per_pos)


def feed_forward(x: Var, p: dict[str, Var]) -> Var:
    """Row-wise max(0, x W1^T + b1) W2^T + b2."""
    return ad.relu(x @ ad.transpose(p["W_1"]) + p["b_1"]) @ ad.transpose(p["W_2"]) + p["b_2"]


def encoder_leaves(lv: dict[str, Var], n_heads: int) -> tuple[list[dict[str, Var]], dict[str, Var]]:
    heads = [{w: lv[f"encoder.head{m}.{w}"] for w in ("W_q", "W_k", "W_v")}
             for m in range(n_heads)]
    rest = {"W_O": lv["encoder.W_O"],
            "W_1": lv["encoder.ffn.W_1"], "b_1": lv["encoder.ffn.b_1"],
            "W_2": lv["encoder.ffn.W_2"], "b_2": lv["encoder.ffn.b_2"],
            "ln1_gain": lv["encoder.ln1.gain"], "ln1_bias": lv["encoder.ln1.bias"],
            "ln2_gain": lv["encoder.ln2.gain"], "ln2_bias": lv["encoder.ln2.bias"]}
    return heads, rest


def encode(features: Var, lv: dict[str, Var], n_heads: int,
           eps: float = LN_EPS) -> tuple[Var, list[Var], Var]:
    """Post-norm residual encoder block over (..., P, d) features.

    Returns (re-encoded features, per-head attention, pre-projection head
    concatenation for the covariance penalty).
    """
    heads, p = encoder_leaves(lv, n_heads)
    u, attns = multi_head_attention(features, heads)
    mixed = ad.layer_norm(features + u @ ad.transpose(p["W_O"]),
                          p["ln1_gain"], p["ln1_bias"], eps)
    out = ad.layer_norm(mixed + feed_forward(mixed, p),
                        p["ln2_gain"], p["ln2_bias"], eps)
    return out, attns, u
