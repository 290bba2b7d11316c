import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmgin import igiem
from dmgin.igiem import (BEHAVIOR_TYPES, BehaviorEvent, EmbeddingTables, EventLog, FeatureShape,
                         InterestGroup)
from dmgin.numeric import ParamSet, grad_check, xavier_init

NOW = 2_000_000_000


def ev(item, btype="click", t=1_000, loc=1, price=0.0):
    return BehaviorEvent(item, btype, t, loc, price)


def mhsa_params(d, seed=0):
    r = np.random.default_rng(seed)
    ps = ParamSet()
    igiem.init_mhsa(ps, d, r)
    return ps


def mhsa_oracle(x, real, ps, n_heads):
    """Per-head scaled dot-product attention written out row by row, then a masked mean."""
    wq, wk, wv, wo = (ps[f"mhsa.{n}"].value for n in ("wq", "wk", "wv", "wo"))
    b, d = x.shape
    dh = d // n_heads
    rows = [i for i in range(b) if real[i]]
    heads_out = np.zeros((b, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ wq[:, sl], x @ wk[:, sl], x @ wv[:, sl]
        for i in range(b):
            scores = [q[i] @ k[j] / math.sqrt(dh) for j in rows]
            mx = max(scores)
            w = [math.exp(s - mx) for s in scores]
            tot = sum(w)
            heads_out[i, sl] = sum((wj / tot) * v[j] for wj, j in zip(w, rows))
    out = heads_out @ wo
    return sum(out[i] for i in rows) / len(rows)


# -- grouping -----------------------------------------------------------------

def test_single_item_one_group():
    groups = igiem.group_sequence([ev(3, t=100 + i) for i in range(10)], {3: 0})
    assert len(groups) == 1 and groups[0].n_events == 10


def test_three_clusters_conserve():
    events = [ev(i % 3, t=10 + i) for i in range(10)]
    groups = igiem.group_sequence(events, {0: 0, 1: 1, 2: 2})
    assert len(groups) == 3 and sum(g.n_events for g in groups) == 10


def test_unknown_items_share_reserved_group():
    groups = igiem.group_sequence([ev(1, t=5), ev(99, t=6), ev(98, t=7)], {1: 0})
    ids = [g.cluster_id for g in groups]
    assert ids == [igiem.UNKNOWN_CLUSTER, 0]
    assert groups[0].n_events == 2


event_lists = st.lists(
    st.tuples(st.integers(0, 12), st.sampled_from(BEHAVIOR_TYPES), st.integers(1, 10**6),
              st.floats(0, 100)),
    min_size=1, max_size=60)


@given(event_lists, st.integers(1, 8))
def test_grouping_invariants(raw, cap):
    events = [BehaviorEvent(i, b, t, 1, p) for i, b, t, p in raw]
    cmap = {i: i % 4 for i in range(10)}  # items 10..12 are unknown
    groups = igiem.group_sequence(events, cmap, now=10**6 + 1, max_per_group=cap)
    assert sum(g.n_events for g in groups) == len(events)
    for g in groups:
        assert len(g.events) <= cap
        ts = [e.timestamp for e in g.events]
        assert ts == sorted(ts)
        assert all(cmap.get(e.item_id, igiem.UNKNOWN_CLUSTER) == g.cluster_id for e in g.events)
        assert g.max_timestamp == max(e.timestamp for e in events
                                      if cmap.get(e.item_id, igiem.UNKNOWN_CLUSTER) == g.cluster_id)
        c = g.stats.counts
        assert c.dtype.kind == "i" and (c >= 0).all() and c.sum() == g.n_events
        assert g.stats.max_time >= g.stats.avg_time >= 0 and g.stats.avg_price >= 0


# -- statistics -----------------------------------------------------------------

def test_stats_single_click_now():
    s = igiem.compute_stats([ev(1, t=500)], now=500)
    assert s.counts.tolist() == [0, 1, 0, 0] and s.max_time == 0 and s.avg_time == 0 and s.avg_price == 0


def test_stats_orders():
    s = igiem.compute_stats([ev(1, "order", 100, price=10.0), ev(1, "order", 200, price=30.0)], now=300)
    assert s.avg_price == 20.0 and s.counts[igiem.CATEGORIES.index("payment")] == 2
    assert s.max_time == 200 and s.avg_time == 150


def test_stats_custom_category_map():
    cmap = dict(igiem.DEFAULT_CATEGORY_MAP, click="weak", **{"add-to-cart": "strong"})
    events = [ev(1, "click", 10), ev(1, "click", 11), ev(1, "click", 12), ev(1, "add-to-cart", 13)]
    s = igiem.compute_stats(events, now=20, category_map=cmap)
    oracle = {c: 0 for c in igiem.CATEGORIES}
    for e in events:
        oracle[cmap[e.behavior_type]] += 1
    assert s.counts.tolist() == [oracle[c] for c in igiem.CATEGORIES]


def test_stats_empty_group_errors():
    with pytest.raises(ValueError):
        igiem.compute_stats([], now=1)


def test_category_map_file(tmp_path):
    igiem.write_category_map(igiem.DEFAULT_CATEGORY_MAP, tmp_path / "c.tsv")
    assert igiem.load_category_map(tmp_path / "c.tsv") == igiem.DEFAULT_CATEGORY_MAP
    (tmp_path / "bad.tsv").write_text("click\tsometimes\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        igiem.load_category_map(tmp_path / "bad.tsv")


def test_event_validation():
    with pytest.raises(ValueError):
        BehaviorEvent(1, "click", 0)
    with pytest.raises(ValueError):
        BehaviorEvent(1, "order", 5, 1, -1.0)


# -- embedding --------------------------------------------------------------------

def tables(seed=0, dims=(3, 2, 2, 4)):
    r = np.random.default_rng(seed)
    return EmbeddingTables(r.normal(size=(10, dims[0])), r.normal(size=(igiem.DEFAULT_N_BUCKETS, dims[1])),
                           r.normal(size=(5, dims[2])), r.normal(size=(len(BEHAVIOR_TYPES) + 1, dims[3])))


def test_behavior_embed_layout():
    tb = tables()
    e = ev(4, "order", t=NOW - 1000, loc=2)
    v = igiem.behavior_embed(e, tb, NOW)
    assert v.shape == (tb.dim,) == (11,)
    assert np.array_equal(v, igiem.behavior_embed(e, tb, NOW))
    bucket = igiem.recency_bucket(1000)
    expect = np.concatenate([tb.item[4], tb.time[bucket], tb.location[2],
                             tb.behavior[igiem.behavior_index("order")]])
    assert np.array_equal(v, expect)


def test_behavior_embed_unknown_ids_use_reserved_row():
    tb = tables()
    v = igiem.behavior_embed(BehaviorEvent(1, "teleport", NOW - 5, 77), tb, NOW)
    assert np.array_equal(v[5:7], tb.location[0]) and np.array_equal(v[7:], tb.behavior[0])


def test_recency_buckets():
    w = math.log(10.0)
    assert igiem.recency_bucket(90, w) != igiem.recency_bucket(9000, w)
    assert igiem.recency_bucket(90, w) == math.floor(math.log1p(90) / w)
    assert igiem.recency_bucket(0) == 0 and igiem.recency_bucket(-5) == 0
    assert igiem.recency_bucket(1e30) == igiem.DEFAULT_N_BUCKETS - 1


# -- intra-group attention -------------------------------------------------------

def test_mhsa_single_event():
    ps = mhsa_params(4)
    x = np.random.default_rng(1).normal(size=(1, 4))
    dyna = igiem.intra_group_mhsa(x, np.array([False]), ps, n_heads=2)
    assert np.allclose(dyna, x[0] @ ps["mhsa.wv"].value @ ps["mhsa.wo"].value, atol=1e-14)


@given(st.integers(0, 10_000), st.integers(2, 7))
def test_mhsa_permutation_invariant(seed, b):
    r = np.random.default_rng(seed)
    ps = mhsa_params(6, seed)
    x = r.normal(size=(b, 6))
    pad = np.zeros(b, bool)
    perm = r.permutation(b)
    a = igiem.intra_group_mhsa(x, pad, ps, 3)
    assert np.abs(igiem.intra_group_mhsa(x[perm], pad, ps, 3) - a).max() < 1e-9


def test_mhsa_matches_dense_oracle():
    for seed in range(20):
        r = np.random.default_rng(seed)
        n_heads = 1 if seed % 2 == 0 else 2
        ps = mhsa_params(4, seed)
        x = r.normal(size=(3, 4))
        pad = np.array([False, False, seed % 3 == 0])
        got = igiem.intra_group_mhsa(x, pad, ps, n_heads)
        assert np.abs(got - mhsa_oracle(x, ~pad, ps, n_heads)).max() < 1e-10


def test_mhsa_padding_and_errors():
    ps = mhsa_params(4)
    x = np.random.default_rng(0).normal(size=(3, 4))
    with pytest.raises(ValueError):
        igiem.intra_group_mhsa(x, np.ones(3, bool), ps, 2)
    with pytest.raises(igiem.DimensionError):
        igiem.intra_group_mhsa(x, np.zeros(3, bool), ps, 3)
    # padded rows do not influence the result
    y = x.copy()
    y[2] = 99.0
    pad = np.array([False, False, True])
    assert np.array_equal(igiem.intra_group_mhsa(x, pad, ps, 2), igiem.intra_group_mhsa(y, pad, ps, 2))


def test_mhsa_backward_grad_check(rng):
    ps = mhsa_params(4, 3)
    x = rng.normal(size=(3, 5, 4))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    w = rng.normal(size=(3, 4))
    ps.zero_grad()
    pooled, cache = igiem.mhsa_forward(ps, x, mask, 2)
    dx = igiem.mhsa_backward(ps, w, cache)
    assert grad_check(lambda p: float((igiem.mhsa_forward(p, x, mask, 2)[0] * w).sum()), ps) < 1e-6
    h = 1e-6
    for idx in [(0, 0, 1), (1, 2, 3), (2, 4, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = ((igiem.mhsa_forward(ps, xp, mask, 2)[0] - igiem.mhsa_forward(ps, xm, mask, 2)[0]) * w).sum() / (2 * h)
        assert abs(num - dx[idx]) < 1e-7


# -- top-k -----------------------------------------------------------------------------

def grp(cid, t):
    return InterestGroup(cid, [], t, 1)


def test_topk_padding():
    out = igiem.topk_groups([grp(0, 5), grp(1, 3), grp(2, 9)], 5)
    assert [g.cluster_id for g in out.groups] == [1, 0, 2] and out.padding == [False] * 3 + [True] * 2


def test_topk_one_is_most_recent():
    out = igiem.topk_groups([grp(0, 5), grp(1, 30), grp(2, 9)], 1)
    assert [g.cluster_id for g in out.groups] == [1]


def test_topk_tie_goes_to_lower_cluster():
    out = igiem.topk_groups([grp(4, 7), grp(2, 7), grp(9, 1)], 1)
    assert out.groups[0].cluster_id == 2


@given(st.lists(st.integers(1, 50), min_size=1, max_size=15), st.integers(1, 8))
def test_topk_matches_sort_oracle(ts, k):
    groups = [grp(i, t) for i, t in enumerate(ts)]
    out = igiem.topk_groups(groups, k)
    oracle = sorted(groups, key=lambda g: (-g.max_timestamp, g.cluster_id))[:k]
    assert {g.cluster_id for g in out.groups} == {g.cluster_id for g in oracle}
    assert [g.max_timestamp for g in out.groups] == sorted(g.max_timestamp for g in oracle)
    assert len(out.padding) == k
    with pytest.raises(ValueError):
        igiem.topk_groups(groups, 0)


# -- group representation -------------------------------------------------------------

def stat_params(d_stat=3, seed=0):
    ps = ParamSet()
    igiem.init_stat_embedder(ps, d_stat, np.random.default_rng(seed))
    ps["stat.b"].value[:] = np.arange(d_stat)[None] * 0.5
    return ps


def test_group_repr_dims_and_zero_stats():
    ps = stat_params()
    zero = igiem.StatVector(np.zeros(4, np.int64), 0.0, 0.0, 0.0)
    r = igiem.group_repr(np.ones(5), zero, ps)
    assert r.g.shape == (8,)
    assert np.array_equal(r.stat_emb, ps["stat.b"].value[0])


def test_group_repr_composition():
    ps = stat_params()
    s = igiem.StatVector(np.array([3, 0, 1, 2]), 5000.0, 1200.0, 17.5)
    raw = np.array([3, 0, 1, 2, 5000.0, 1200.0, 17.5])
    oracle = np.log1p(raw) @ ps["stat.w"].value + ps["stat.b"].value[0]
    r = igiem.group_repr(np.zeros(2), s, ps)
    assert np.abs(r.stat_emb - oracle).max() < 1e-10
    assert np.array_equal(r.g[:2], np.zeros(2))


# -- columnar featurisation -----------------------------------------------------------

def random_log(seed, n=80, n_items=12):
    r = np.random.default_rng(seed)
    ts = np.sort(r.integers(NOW - 10**7, NOW, n))
    return EventLog(r.integers(0, n_items, n), r.integers(1, len(BEHAVIOR_TYPES) + 1, n), ts,
                    r.integers(0, 5, n), np.round(r.random(n) * 20, 2))


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 9))
def test_featurize_matches_object_path(seed, k, cap):
    log = random_log(seed)
    lut = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 5, -1, -1])  # items 10, 11 unknown
    shape = FeatureShape(k=k, max_per_group=cap, n_short=4)
    now = NOW + 7
    f = igiem.featurize(log, now, lut, shape)
    cmap = {i: int(c) for i, c in enumerate(lut) if c >= 0}
    groups = igiem.group_sequence(log.to_events(), cmap, now=now, max_per_group=cap)
    top = igiem.topk_groups(groups, k)
    assert f["n_groups"] == len(groups)
    assert f["grp_mask"].tolist() == [not p for p in top.padding]
    for slot, g in enumerate(top.groups):
        assert f["grp_cluster"][slot] == g.cluster_id and f["grp_ts"][slot] == g.max_timestamp
        assert np.allclose(f["stats"][slot], g.stats.as_array(), rtol=1e-12)
        n = len(g.events)
        assert f["ev_mask"][slot].sum() == n
        assert f["ev_item"][slot, :n].tolist() == [e.item_id for e in g.events]
        assert f["ev_time"][slot, :n].tolist() == [igiem.recency_bucket(now - e.timestamp) for e in g.events]
    s = len(top.groups)
    ts = f["grp_ts"][:s]
    assert np.array_equal(f["gap_bucket"][:s, :s], igiem.recency_bucket(np.abs(ts[:, None] - ts[None, :])))
    last = log.to_events()[-4:]
    assert f["sh_item"][:len(last)].tolist() == [e.item_id for e in last]


def test_featurize_ignores_future_and_empty():
    log = random_log(1)
    lut = np.zeros(12, np.int64)
    shape = FeatureShape(k=3, max_per_group=5, n_short=3)
    cut = int(log.ts[40])
    assert all(np.array_equal(a, b) for a, b in zip(igiem.featurize(log, cut, lut, shape).values(),
                                                      igiem.featurize(log.before(cut), cut, lut, shape).values()))
    empty = igiem.featurize(log, int(log.ts[0]), lut, shape)
    assert not empty["grp_mask"].any() and not empty["sh_mask"].any() and empty["n_groups"] == 0


def test_trim_batch_is_exact():
    from dmgin.model import Model, ModelConfig
    lut = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 5, -1, -1])
    cfg = ModelConfig(n_items=12, n_clusters=6, d_field=4, d_stat=3, k=8, max_per_group=40, n_short=4,
                      n_locations=5, n_profiles=2, emb_scale=1.0)
    feats = [igiem.featurize(random_log(s, n=30), NOW, lut, cfg.feature_shape()) for s in range(3)]
    b = igiem.stack_features(feats)
    b.update(cand_item=np.array([1, 5, 9]), cand_cluster=lut[[1, 5, 9]], profile=np.array([0, 1, 0]),
             hour=np.array([3, 4, 5]))
    t = igiem.trim_batch(b)
    assert t["ev_item"].shape[1] < b["ev_item"].shape[1] or t["ev_item"].shape[2] < b["ev_item"].shape[2]
    m = Model(cfg, seed=0)
    assert np.abs(m.predict(t) - m.predict(b)).max() < 1e-12


def test_grouping_diagnostics():
    lut = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 5, -1, -1])
    hist = {7: random_log(0, n=100), 3: random_log(1, n=20)}
    rows, h = igiem.grouping_diagnostics(hist, lut)
    assert [r[0] for r in rows] == [3, 7]
    for uid, n, g in rows:
        assert n == len(hist[uid]) and g == len(np.unique(igiem._clusters_of(hist[uid].item, lut)))
    assert sum(r[2] for r in h) == 2 and sum(r[3] for r in h) == 2
