import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmgin import cagam
from dmgin.numeric import ParamSet, grad_check, sigmoid

D = 4


def attn_params(seed=0):
    ps = ParamSet()
    cagam.init_attention(ps, D, np.random.default_rng(seed))
    return ps


def attn_oracle(e, groups, ps, mask):
    wt, wg = ps["cand.wt"].value, ps["cand.wg"].value
    a = e @ wt
    proj = [g @ wg for g in groups]
    logits = [float(a @ p) / math.sqrt(D) if m else -math.inf for p, m in zip(proj, mask)]
    mx = max(logits)
    w = [math.exp(l - mx) if m else 0.0 for l, m in zip(logits, mask)]
    alpha = np.array(w) / sum(w)
    return alpha, sum(al * p for al, p in zip(alpha, proj))


def test_single_group():
    ps = attn_params()
    g = np.random.default_rng(1).normal(size=(1, D))
    alpha, r = cagam.candidate_attention(np.ones(D), g, ps)
    assert alpha.tolist() == [1.0] and np.allclose(r, g[0] @ ps["cand.wg"].value, atol=1e-15)


def test_identical_groups_split_evenly():
    ps = attn_params()
    row = np.random.default_rng(2).normal(size=D)
    alpha, _ = cagam.candidate_attention(np.ones(D), np.stack([row, row]), ps)
    assert np.allclose(alpha, 0.5, atol=1e-15)


def test_matches_oracle():
    for seed in range(20):
        r = np.random.default_rng(seed)
        ps = attn_params(seed)
        e, groups = r.normal(size=D), r.normal(size=(3, D))
        mask = np.array([True, seed % 3 != 0, True])
        alpha, rl = cagam.candidate_attention(e, groups, ps, mask)
        oa, orl = attn_oracle(e, groups, ps, mask)
        assert np.abs(alpha - oa).max() < 1e-10 and np.abs(rl - orl).max() < 1e-10
        assert abs(alpha.sum() - 1) < 1e-9


def test_all_masked_errors():
    with pytest.raises(ValueError):
        cagam.candidate_attention(np.ones(D), np.ones((2, D)), attn_params(), np.zeros(2, bool))


@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_alpha_is_distribution_and_scale_keeps_argmax(seed, c):
    r = np.random.default_rng(seed)
    ps = attn_params(seed)
    e, groups = r.normal(size=D), r.normal(size=(5, D))
    alpha, _ = cagam.candidate_attention(e, groups, ps)
    assert (alpha >= 0).all() and abs(alpha.sum() - 1) < 1e-9
    scaled, _ = cagam.candidate_attention(c * e, groups, ps)
    assert scaled.argmax() == alpha.argmax()
    # logits scale linearly with e
    wt, wg = ps["cand.wt"].value, ps["cand.wg"].value
    base = (groups @ wg) @ (e @ wt)
    assert np.allclose((groups @ wg) @ (c * e @ wt), c * base)


def short_params(d_event=3, seed=0):
    ps = ParamSet()
    cagam.init_short_term(ps, d_event, D, np.random.default_rng(seed))
    return ps


def test_short_term_cases():
    ps = short_params()
    e = np.random.default_rng(0).normal(size=(1, D))
    empty, _ = cagam.short_term_forward(ps, np.zeros((1, 0, 3)), np.zeros((1, 0), bool), e)
    assert np.array_equal(empty, np.zeros((1, D)))
    masked, _ = cagam.short_term_forward(ps, np.ones((1, 2, 3)), np.zeros((1, 2), bool), e)
    assert np.array_equal(masked, np.zeros((1, D)))
    one = np.array([[0.3, -1.0, 2.0]])
    assert np.allclose(cagam.short_term_repr(one, e[0], ps), one[0] @ ps["short.wv"].value, atol=1e-15)


def test_short_term_matches_oracle():
    ps = short_params(seed=3)
    r = np.random.default_rng(3)
    ev, e = r.normal(size=(3, 3)), r.normal(size=D)
    keys = ev @ ps["short.wk"].value
    logits = keys @ e / math.sqrt(D)
    w = np.exp(logits - logits.max())
    oracle = (w / w.sum()) @ (ev @ ps["short.wv"].value)
    assert np.abs(cagam.short_term_repr(ev, e, ps) - oracle).max() < 1e-10


def head_params(d_in=5, hidden=3, seed=0):
    ps = ParamSet()
    cagam.init_head(ps, d_in, hidden, np.random.default_rng(seed))
    return ps


def test_head_zero_weights_give_sigmoid_bias():
    ps = head_params()
    for _, p in ps.items():
        p.value[:] = 0.0
    ps["head.b2"].value[:] = 0.7
    assert cagam.fuse_and_predict(np.ones(2), np.ones(1), np.ones(1), np.ones(1), ps) == pytest.approx(sigmoid(0.7))


def test_head_matches_composed_oracle():
    ps = head_params(seed=5)
    for _, p in ps.items():
        p.value *= 0.1
    parts = [np.array([0.1, -0.2]), np.array([0.3]), np.array([0.05]), np.array([-0.4])]
    x = np.concatenate(parts)
    h = x @ ps["head.w1"].value + ps["head.b1"].value[0]
    h = h / (1 + np.exp(-h))
    z = h @ ps["head.w2"].value[:, 0] + ps["head.b2"].value[0, 0]
    assert abs(cagam.fuse_and_predict(*parts, ps) - 1 / (1 + math.exp(-z))) < 1e-10


@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5))
def test_pctr_strictly_inside_unit_interval(xs):
    ps = head_params(seed=1)
    p = cagam.fuse_and_predict(np.array(xs[:2]), np.array(xs[2:3]), np.array(xs[3:4]), np.array(xs[4:]), ps)
    assert 0.0 <= p <= 1.0
    logit, _ = cagam.head_forward(ps, np.array([xs]) * 1e-3)
    assert 0.0 < float(sigmoid(logit)[0]) < 1.0


def test_attention_backward_grad_check(rng):
    ps = attn_params(3)
    e, groups = rng.normal(size=(2, D)), rng.normal(size=(2, 3, D))
    mask = np.array([[True, True, False], [True, True, True]])
    w = rng.normal(size=(2, D))
    ps.zero_grad()
    _, r, cache = cagam.candidate_attention_forward(ps, e, groups, mask)
    de, dg = cagam.candidate_attention_backward(ps, w, cache)
    loss = lambda p: float((cagam.candidate_attention_forward(p, e, groups, mask)[1] * w).sum())
    assert grad_check(loss, ps) < 1e-6
    h = 1e-6
    ep, em = e.copy(), e.copy()
    ep[1, 2] += h
    em[1, 2] -= h
    num = ((cagam.candidate_attention_forward(ps, ep, groups, mask)[1]
            - cagam.candidate_attention_forward(ps, em, groups, mask)[1]) * w).sum() / (2 * h)
    assert abs(num - de[1, 2]) < 1e-7
