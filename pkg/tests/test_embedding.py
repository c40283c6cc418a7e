"""Per-feature GRU, time-damped attention, and baseline embedding."""

from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt

from carelens import autodiff as ad
from carelens import embedding as emb
from carelens.data import PatientCase
from carelens.optim import ParamStore, grad_check


def channel_store(d, n_channels=1, seed=0, with_baseline=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for n in range(n_channels):
        emb.init_channel_params(store, n, d, rng)
    if with_baseline:
        emb.init_baseline_params(store, d, with_baseline, rng)
    return store


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_oracle(series, p):
    """Plain-numpy per-step recurrence, no batching."""
    d = p["b_z"].data.shape[0]
    h = np.zeros(d)
    out = []
    for x in series:
        z = sigmoid(p["W_z"].data[:, 0] * x + p["U_z"].data @ h + p["b_z"].data)
        r = sigmoid(p["W_r"].data[:, 0] * x + p["U_r"].data @ h + p["b_r"].data)
        cand = np.tanh(p["W_h"].data[:, 0] * x + p["U_h"].data @ (r * h)
                       + p["b_h"].data)
        h = (1.0 - z) * h + z * cand
        out.append(h)
    return np.stack(out)


# -- GRU ----------------------------------------------------------------------


def test_gru_zero_parameters_give_zero_states():
    store = channel_store(d=5)
    for name in store.names():
        if ".gru." in name:
            store.value(name)[...] = 0.0
    hidden = emb.gru_forward([1.0, -2.0, 3.5], emb.channel_leaves(store.leaves(), 0))
    npt.assert_array_equal(hidden.data, np.zeros((3, 5)))


def test_gru_single_step_matches_closed_form():
    store = channel_store(d=4, seed=1)
    p = emb.channel_leaves(store.leaves(), 0)
    x = 0.75
    hidden = emb.gru_forward([x], p).data
    z = sigmoid(p["W_z"].data[:, 0] * x + p["b_z"].data)
    cand = np.tanh(p["W_h"].data[:, 0] * x + p["b_h"].data)
    npt.assert_allclose(hidden[0], z * cand, atol=1e-12, rtol=0)


def test_gru_matches_reference_recurrence():
    store = channel_store(d=6, seed=2)
    p = emb.channel_leaves(store.leaves(), 0)
    rng = np.random.default_rng(3)
    for _ in range(5):
        series = rng.normal(size=rng.integers(1, 8))
        npt.assert_allclose(emb.gru_forward(series, p).data,
                            gru_oracle(series, p), atol=1e-12, rtol=0)


def test_gru_batch_rows_independent():
    store = channel_store(d=4, seed=4)
    p = emb.channel_leaves(store.leaves(), 0)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 5))
    batch = emb.gru_forward_batch(x, p).data
    for b in range(3):
        npt.assert_allclose(batch[b], emb.gru_forward(x[b], p).data,
                            atol=1e-13, rtol=0)


def test_gru_saturated_update_gate_freezes_state():
    store = channel_store(d=3, seed=6)
    store.value("channel0.gru.b_z")[...] = -50.0  # z ~ 0 everywhere
    p = emb.channel_leaves(store.leaves(), 0)
    hidden = emb.gru_forward([1.0, 2.0, 3.0], p).data
    npt.assert_allclose(hidden[1], hidden[0], atol=1e-20)
    npt.assert_allclose(hidden[2], hidden[0], atol=1e-20)


# -- decay and time-damped scores ----------------------------------------------


def test_effective_beta_is_one_at_init():
    store = channel_store(d=3)
    beta = emb.effective_beta(emb.channel_leaves(store.leaves(), 0))
    assert abs(float(beta.data) - 1.0) < 1e-12
    assert abs(emb.decay_rate(emb.BETA_RAW_INIT) - 1.0) < 1e-12


def test_decay_rate_respects_floor():
    assert emb.decay_rate(-100.0) >= emb.DECAY_FLOOR
    assert emb.decay_rate(-100.0) < emb.DECAY_FLOOR + 1e-12


def test_scores_at_zero_delta_divide_by_beta_exactly():
    # ln(e + 0) == 1, so the denominator is exactly beta
    c = np.array([0.3, -1.2, 4.0])
    beta = ad.Var(1.7)
    out = emb.time_damped_scores(ad.Var(c), np.zeros(3), beta).data
    npt.assert_array_equal(out, np.tanh(c / 1.7))


def test_scores_match_scalar_formula():
    rng = np.random.default_rng(7)
    for _ in range(30):
        c = float(rng.normal(scale=2))
        dt = float(rng.uniform(0, 300))
        beta = float(rng.uniform(0.05, 3.0))
        got = float(emb.time_damped_scores(ad.Var(np.array([c])),
                                           np.array([dt]), ad.Var(beta)).data[0])
        sig = 1.0 / (1.0 + math.exp(-c))
        want = math.tanh(c / (beta * math.log(math.e + (1.0 - sig) * dt)))
        assert abs(got - want) < 1e-12


def test_score_magnitude_never_grows_with_delta():
    rng = np.random.default_rng(8)
    deltas = np.arange(0.0, 201.0)
    for _ in range(200):
        c = float(rng.normal(scale=2))
        beta = float(emb.decay_rate(rng.uniform(-2, 3)))
        zeta = np.tanh(c / (beta * np.log(np.e + (1 - sigmoid(c)) * deltas)))
        assert (np.diff(np.abs(zeta)) <= 0).all()


def test_larger_beta_damps_positive_scores_more():
    deltas = np.arange(1.0, 100.0)
    for c in (0.5, 1.5, 3.0):
        prev = None
        for beta in (0.2, 0.7, 1.5, 3.0):
            zeta = np.tanh(c / (beta * np.log(np.e + (1 - sigmoid(c)) * deltas)))
            if prev is not None:
                assert (zeta < prev).all()
            prev = zeta


# -- time-aware attention -------------------------------------------------------


def attention_oracle(hidden, timestamps, p, time_aware=True):
    """Scalar loops over the published formula."""
    t_len, d = hidden.shape
    beta = float(np.logaddexp(0.0, p["beta_raw"].data) + emb.DECAY_FLOOR)
    q = p["W_q"].data @ hidden[-1]
    zeta = np.empty(t_len)
    for t in range(t_len):
        k = p["W_k"].data @ hidden[t]
        c = float(q @ k)
        dt = float(timestamps[-1] - timestamps[t]) if time_aware else 0.0
        sig = 1.0 / (1.0 + math.exp(-c))
        zeta[t] = math.tanh(c / (beta * math.log(math.e + (1.0 - sig) * dt)))
    e = np.exp(zeta - zeta.max())
    alpha = e / e.sum()
    return alpha @ hidden, alpha


def test_attention_single_visit_is_identity():
    store = channel_store(d=5, seed=9)
    p = emb.channel_leaves(store.leaves(), 0)
    hidden = np.random.default_rng(10).normal(size=(1, 5))
    f, alpha = emb.time_aware_attention(hidden, [0.0], p)
    npt.assert_array_equal(alpha.data, [1.0])
    npt.assert_allclose(f.data, hidden[0], atol=1e-15)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(11)
    store = channel_store(d=6, seed=12)
    p = emb.channel_leaves(store.leaves(), 0)
    store.value("channel0.attn.beta_raw")[...] = 0.4
    for _ in range(20):
        t_len = int(rng.integers(1, 9))
        hidden = rng.normal(size=(t_len, 6))
        ts = np.concatenate([[0.0], np.cumsum(rng.uniform(0.5, 30, t_len - 1))])
        f, alpha = emb.time_aware_attention(hidden, ts, p)
        f_ref, alpha_ref = attention_oracle(hidden, ts, p)
        npt.assert_allclose(alpha.data, alpha_ref, atol=1e-12, rtol=0)
        npt.assert_allclose(f.data, f_ref, atol=1e-12, rtol=0)


def test_attention_weights_form_distribution():
    store = channel_store(d=4, seed=13)
    p = emb.channel_leaves(store.leaves(), 0)
    rng = np.random.default_rng(14)
    hidden = rng.normal(size=(7, 4))
    ts = np.cumsum(rng.uniform(0.1, 20, 7)) - 0.1
    ts[0] = 0.0
    _, alpha = emb.time_aware_attention(hidden, ts, p)
    assert (alpha.data >= 0).all()
    assert abs(alpha.data.sum() - 1.0) < 1e-12


def test_zero_projections_give_uniform_attention():
    store = channel_store(d=4, seed=15)
    store.value("channel0.attn.W_q")[...] = 0.0
    p = emb.channel_leaves(store.leaves(), 0)
    hidden = np.random.default_rng(16).normal(size=(5, 4))
    _, alpha = emb.time_aware_attention(hidden, [0.0, 1.0, 2.0, 3.0, 4.0], p)
    npt.assert_allclose(alpha.data, np.full(5, 0.2), atol=1e-15)


def test_time_aware_false_ignores_timestamps():
    store = channel_store(d=5, seed=17)
    p = emb.channel_leaves(store.leaves(), 0)
    hidden = np.random.default_rng(18).normal(size=(6, 5))
    near = np.arange(6.0)
    far = np.arange(6.0) * 50.0
    f1, a1 = emb.time_aware_attention(hidden, near, p, time_aware=False)
    f2, a2 = emb.time_aware_attention(hidden, far, p, time_aware=False)
    npt.assert_array_equal(a1.data, a2.data)
    npt.assert_array_equal(f1.data, f2.data)
    _, a3 = emb.time_aware_attention(hidden, far, p, time_aware=True)
    assert not np.array_equal(a1.data, a3.data)


# -- baseline embedding ---------------------------------------------------------


def test_baseline_embed_is_linear_matvec():
    store = channel_store(d=4, with_baseline=3, seed=19)
    w = store.leaf("baseline.W_emb")
    base = np.array([1.5, 0.0, 1.0])
    out = emb.embed_baseline(base, w)
    npt.assert_allclose(out.data, store.value("baseline.W_emb") @ base,
                        atol=1e-15)
    npt.assert_array_equal(emb.embed_baseline(np.zeros(3), w).data, np.zeros(4))
    twice = emb.embed_baseline(2.0 * base, w).data
    npt.assert_allclose(twice, 2.0 * out.data, atol=1e-15)


# -- composition ----------------------------------------------------------------


def make_case(n_feat, t_len, n_base, seed):
    rng = np.random.default_rng(seed)
    ts = np.concatenate([[0.0], np.cumsum(rng.uniform(1, 24, t_len - 1))])
    return PatientCase("c0", rng.normal(size=n_base), ts,
                       rng.normal(size=(n_feat, t_len)), 1)


def test_feature_matrix_rows_match_components():
    store = channel_store(d=5, n_channels=3, with_baseline=2, seed=20)
    lv = store.leaves()
    case = make_case(3, 4, 2, seed=21)
    f_mat, alphas = emb.build_feature_matrix(case, lv, 3)
    assert f_mat.shape == (4, 5)
    assert len(alphas) == 3
    for n in range(3):
        p = emb.channel_leaves(lv, n)
        hidden = emb.gru_forward(case.records[n], p)
        f, alpha = emb.time_aware_attention(hidden.data, case.timestamps, p)
        npt.assert_allclose(f_mat.data[n], f.data, atol=1e-12, rtol=0)
        npt.assert_allclose(alphas[n], alpha.data, atol=1e-12, rtol=0)
    base = emb.embed_baseline(case.baseline, lv["baseline.W_emb"])
    npt.assert_allclose(f_mat.data[3], base.data, atol=1e-15)


def test_channels_have_independent_gradients():
    store = channel_store(d=4, n_channels=3, with_baseline=2, seed=22)
    lv = store.leaves()
    case = make_case(3, 5, 2, seed=23)
    f_mat, _ = emb.build_feature_matrix(case, lv, 3)
    store.zero_grad()
    ad.vsum(f_mat[1]).backward()  # depends on channel 1 and nothing else
    for name in store.names():
        g = store.entry(name).grad
        if name.startswith("channel1."):
            assert np.abs(g).max() > 0.0
        elif name.startswith("channel"):
            npt.assert_array_equal(g, np.zeros_like(g))


def test_embedding_gradients_match_finite_differences():
    store = channel_store(d=4, n_channels=2, with_baseline=2, seed=24)
    case = make_case(2, 3, 2, seed=25)
    rng = np.random.default_rng(26)
    w = rng.normal(size=(3, 4))

    def loss(s):
        f_mat, _ = emb.build_feature_matrix(case, s.leaves(), 2)
        return ad.vsum(f_mat * w)

    errs = grad_check(loss, store, h=3e-5)
    assert max(errs.values()) < 1e-4, errs
