"""Per-feature recurrent embedding and time-damped attention.

Every dynamic feature owns a private single-input GRU; no parameters are
shared across features.  The attention over a feature's hidden states
damps each score by the elapsed time to the newest visit before the
softmax:

    score_t = tanh( c_t / (beta * ln(e + (1 - sigmoid(c_t)) * dt_t)) )

with c_t the query/key dot product, dt_t >= 0 the hours back from the last
visit, and beta > 0 a learned per-feature decay rate.  At dt = 0 the damping
term is exactly 1; larger beta forgets history faster.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import PatientCase

GATES = ("z", "r", "h")
DECAY_FLOOR = 0.01
# softplus(raw) + floor == 1.0 at init
BETA_RAW_INIT = float(np.log(np.expm1(1.0 - DECAY_FLOOR)))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_channel_params(store, n: int, d: int, rng: np.random.Generator) -> None:
    pre = f"channel{n}"
    for g in GATES:
        store.add(f"{pre}.gru.W_{g}", _uniform(rng, (d, 1), 1))
        store.add(f"{pre}.gru.U_{g}", _uniform(rng, (d, d), d))
        store.add(f"{pre}.gru.b_{g}", np.zeros(d))
    store.add(f"{pre}.attn.W_q", _uniform(rng, (d, d), d))
    store.add(f"{pre}.attn.W_k", _uniform(rng, (d, d), d))
    store.add(f"{pre}.attn.beta_raw", BETA_RAW_INIT)


def init_baseline_params(store, d: int, n_baseline: int,
                         rng: np.random.Generator) -> None:
    store.add("baseline.W_emb", _uniform(rng, (d, n_baseline), n_baseline))


def channel_leaves(lv: dict[str, Var], n: int) -> dict[str, Var]:
    pre = f"channel{n}"
    p = {f"{w}_{g}": lv[f"{pre}.gru.{w}_{g}"] for g in GATES for w in ("W", "U", "b")}
    p["W_q"] = lv[f"{pre}.attn.W_q"]
    p["W_k"] = lv[f"{pre}.attn.W_k"]
    p["beta_raw"] = lv[f"{pre}.attn.beta_raw"]
    return p


def decay_rate(beta_raw) -> np.ndarray:
    """Effective decay softplus(raw) + floor, as plain numpy."""
    return np.logaddexp(0.0, np.asarray(beta_raw, dtype=np.float64)) + DECAY_FLOOR


def gru_forward_batch(x, p: dict[str, Var]) -> Var:
    """Scalar-input GRU over a (B, T) series; returns hidden states (B, T, d).

    Gate convention: h_t = (1 - z_t) * h_{t-1} + z_t * cand_t, with the reset
    gate applied to the previous state inside the candidate.
    """
    x = ad.as_var(x)
    b_size, t_len = x.shape
    d = p["b_z"].shape[0]
    w_z, w_r, w_h = (ad.transpose(p[f"W_{g}"]) for g in GATES)   # (1, d)
    u_z, u_r, u_h = (ad.transpose(p[f"U_{g}"]) for g in GATES)   # (d, d)
    h = Var(np.zeros((b_size, d)))
    states = []
    for t in range(t_len):
        xt = x[:, t:t + 1]
        z = ad.sigmoid(xt @ w_z + h @ u_z + p["b_z"])
        r = ad.sigmoid(xt @ w_r + h @ u_r + p["b_r"])
        cand = ad.tanh(xt @ w_h + (r * h) @ u_h + p["b_h"])
        h = (1.0 - z) * h + z * cand
        states.append(h)
    return ad.stack(states, axis=1)


def gru_forward(series, p: dict[str, Var]) -> Var:
    """Single-case wrapper: (T,) series -> (T, d) hidden states."""
    series = np.asarray(series, dtype=np.float64)
    out = gru_forward_batch(series[None, :], p)
    return ad.reshape(out, out.shape[1:])


def time_damped_scores(c: Var, delta: np.ndarray, beta: Var) -> Var:
    """Pre-softmax attention scores with time damping (see module docstring)."""
    damp = ad.log(np.e + (1.0 - ad.sigmoid(c)) * delta)
    return ad.tanh(c / (beta * damp))


def effective_beta(p: dict[str, Var]) -> Var:
    return ad.softplus(p["beta_raw"]) + DECAY_FLOOR


def time_aware_attention_batch(hidden: Var, delta: np.ndarray, p: dict[str, Var],
                               time_aware: bool = True) -> tuple[Var, Var]:
    """Attend over (B, T, d) hidden states; returns (summary (B, d), alphas (B, T)).

    The query comes from the last hidden state.  ``delta`` holds hours back
    from the newest visit; with ``time_aware=False`` the damping is frozen
    at its dt = 0 value.
    """
    b_size, t_len, d = hidden.shape
    q = hidden[:, -1, :] @ ad.transpose(p["W_q"])            # (B, d)
    k = hidden @ ad.transpose(p["W_k"])                      # (B, T, d)
    c = ad.vsum(ad.reshape(q, (b_size, 1, d)) * k, axis=-1)  # (B, T)
    if not time_aware:
        delta = np.zeros((b_size, t_len))
    zeta = time_damped_scores(c, np.asarray(delta, dtype=np.float64),
                              effective_beta(p))
    alpha = ad.softmax(zeta, axis=-1)
    summary = ad.reshape(ad.reshape(alpha, (b_size, 1, t_len)) @ hidden,
                         (b_size, d))
    return summary, alpha


def time_aware_attention(hidden, timestamps, p: dict[str, Var],
                         time_aware: bool = True) -> tuple[Var, Var]:
    """Single-case wrapper: (T, d) states + (T,) timestamps -> ((d,), (T,))."""
    hidden = ad.as_var(hidden)
    t_len, d = hidden.shape
    ts = np.asarray(timestamps, dtype=np.float64)
    delta = (ts[-1] - ts)[None, :]
    f, alpha = time_aware_attention_batch(ad.reshape(hidden, (1, t_len, d)),
                                          delta, p, time_aware)
    return ad.reshape(f, (d,)), ad.reshape(alpha, (t_len,))


def embed_baseline_batch(base, w_emb: Var) -> Var:
    """Linear, bias-free embedding of (B, S) baselines -> (B, d)."""
    return ad.as_var(base) @ ad.transpose(w_emb)


def embed_baseline(base, w_emb: Var) -> Var:
    """Single-case wrapper: (S,) -> (d,)."""
    out = embed_baseline_batch(np.asarray(base, dtype=np.float64)[None, :], w_emb)
    return ad.reshape(out, (out.shape[1],))


def build_feature_matrix(case: PatientCase, lv: dict[str, Var], n_features: int,
                         time_aware: bool = True) -> tuple[Var, list[np.ndarray]]:
    """Rows 0..N-1: per-feature attention summaries; row N: baseline embed.

    Returns the (N+1, d) matrix and the per-feature attention weights.
    """
    delta = (case.timestamps[-1] - case.timestamps)[None, :]
    rows = []
    alphas = []
    for n in range(n_features):
        p = channel_leaves(lv, n)
        hidden = gru_forward_batch(case.records[n][None, :], p)
        f, alpha = time_aware_attention_batch(hidden, delta, p, time_aware)
        rows.append(ad.reshape(f, (f.shape[1],)))
        alphas.append(alpha.data[0])
    rows.append(embed_baseline(case.baseline, lv["baseline.W_emb"]))
    return ad.stack(rows, axis=0), alphas
