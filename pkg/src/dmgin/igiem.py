"""Interest groups: reorganising a lifelong event stream by cluster.

A user's events are bucketed by the cluster of their item, summarised with
count/recency/price statistics, encoded with intra-group multi-head
self-attention, and the most recently touched groups are kept for the
inter-group transformer.

Two code paths exist. The object path (``group_sequence``, ``compute_stats``,
``behavior_embed``) works on :class:`BehaviorEvent` lists and is what the
tests read. The columnar path (:func:`featurize`) does the same work on numpy
arrays for training and serving and is checked against the object path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .numeric import (DimensionError, ParamSet, softmax_backward, softmax_rows)

BEHAVIOR_TYPES = (
    "click",
    "add-to-cart",
    "add-to-favorite",
    "browse-dishes",
    "view-comments",
    "order",
    "dismiss",
)
CATEGORIES = ("strong", "weak", "negative", "payment")
DEFAULT_CATEGORY_MAP = {
    "click": "weak",
    "browse-dishes": "weak",
    "view-comments": "weak",
    "add-to-cart": "strong",
    "add-to-favorite": "strong",
    "order": "payment",
    "dismiss": "negative",
}
UNKNOWN_CLUSTER = -1
N_STATS = 7
# log-scaled recency buckets; quarter-decade width by default
DEFAULT_BUCKET_WIDTH = math.log(10.0) / 4.0
DEFAULT_N_BUCKETS = 40


def behavior_index(behavior_type: str) -> int:
    """1-based index into BEHAVIOR_TYPES; 0 is reserved for unknown types."""
    try:
        return BEHAVIOR_TYPES.index(behavior_type) + 1
    except ValueError:
        return 0


def load_category_map(path) -> Dict[str, str]:
    """Read ``behavior_type<TAB>category`` lines."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in CATEGORIES:
                raise ValueError(f"{path}:{lineno}: expected 'behavior_type<TAB>category'")
            out[parts[0]] = parts[1]
    return out


def write_category_map(category_map: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for btype in sorted(category_map):
            fh.write(f"{btype}\t{category_map[btype]}\n")


@dataclass(frozen=True)
class BehaviorEvent:
    item_id: int
    behavior_type: str
    timestamp: int
    location_id: int = 0
    price: float = 0.0

    def __post_init__(self):
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if self.price < 0:
            raise ValueError(f"price must be non-negative, got {self.price}")


@dataclass
class StatVector:
    counts: np.ndarray  # strong, weak, negative, payment
    max_time: float
    avg_time: float
    avg_price: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.counts.astype(np.float64),
                               [self.max_time, self.avg_time, self.avg_price]])


@dataclass
class InterestGroup:
    cluster_id: int
    events: List[BehaviorEvent]
    max_timestamp: int
    n_events: int
    stats: Optional[StatVector] = None


def recency_bucket(seconds, width: float = DEFAULT_BUCKET_WIDTH,
                   n_buckets: int = DEFAULT_N_BUCKETS):
    """floor(ln(1 + seconds) / width), clipped to the table size."""
    s = np.maximum(np.asarray(seconds, dtype=np.float64), 0.0)
    b = np.floor(np.log1p(s) / width).astype(np.int64)
    b = np.minimum(b, n_buckets - 1)
    return int(b) if b.ndim == 0 else b


def compute_stats(group, now: float, category_map: Mapping[str, str] = DEFAULT_CATEGORY_MAP) -> StatVector:
    """Counts per interest category, max/mean elapsed time, mean payment price.

    ``max_time`` is max-pooling of per-event elapsed time (now - ts) and
    ``avg_time`` its mean, so ``max_time >= avg_time``.
    """
    events = group.events if isinstance(group, InterestGroup) else list(group)
    if not events:
        raise ValueError("cannot compute statistics of an empty group")
    counts = np.zeros(len(CATEGORIES), dtype=np.int64)
    paid = []
    elapsed = []
    for ev in events:
        cat = category_map[ev.behavior_type]
        counts[CATEGORIES.index(cat)] += 1
        if cat == "payment":
            paid.append(ev.price)
        elapsed.append(max(now - ev.timestamp, 0.0))
    return StatVector(
        counts=counts,
        max_time=float(max(elapsed)),
        avg_time=float(sum(elapsed) / len(elapsed)),
        avg_price=float(sum(paid) / len(paid)) if paid else 0.0,
    )


def group_sequence(events: Sequence[BehaviorEvent], cluster_map: Mapping[int, int],
                   now: Optional[float] = None, max_per_group: int = 32,
                   category_map: Mapping[str, str] = DEFAULT_CATEGORY_MAP) -> List[InterestGroup]:
    """One group per touched cluster, ordered by cluster id.

    Statistics are computed over the full group, then the event list is cut
    to the ``max_per_group`` most recent events.
    """
    buckets: Dict[int, List[BehaviorEvent]] = {}
    for ev in events:
        cid = cluster_map.get(ev.item_id, UNKNOWN_CLUSTER)
        buckets.setdefault(cid, []).append(ev)
    if now is None:
        now = max((ev.timestamp for ev in events), default=0)
    groups = []
    for cid in sorted(buckets):
        evs = sorted(buckets[cid], key=lambda e: e.timestamp)
        g = InterestGroup(cluster_id=cid, events=evs, max_timestamp=evs[-1].timestamp, n_events=len(evs))
        g.stats = compute_stats(g, now, category_map)
        g.events = evs[-max_per_group:]
        groups.append(g)
    return groups


@dataclass
class TopK:
    groups: List[InterestGroup]
    padding: List[bool]


def topk_groups(groups: Sequence[InterestGroup], k: int) -> TopK:
    """The k most recently touched groups, returned oldest first.

    Ties on max_timestamp go to the lower cluster id; trailing padding slots
    are flagged when fewer than k groups exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(groups, key=lambda g: (-g.max_timestamp, g.cluster_id))[:k]
    chosen = sorted(ranked, key=lambda g: (g.max_timestamp, g.cluster_id))
    return TopK(groups=chosen, padding=[False] * len(chosen) + [True] * (k - len(chosen)))


@dataclass
class EmbeddingTables:
    item: np.ndarray
    time: np.ndarray
    location: np.ndarray
    behavior: np.ndarray
    bucket_width: float = DEFAULT_BUCKET_WIDTH

    @classmethod
    def from_params(cls, params: ParamSet, bucket_width: float = DEFAULT_BUCKET_WIDTH):
        return cls(params["emb.item"].value, params["emb.time"].value,
                   params["emb.loc"].value, params["emb.beh"].value, bucket_width)

    @property
    def dim(self) -> int:
        return sum(t.shape[1] for t in (self.item, self.time, self.location, self.behavior))


def behavior_embed(event: BehaviorEvent, tables: EmbeddingTables, now: float) -> np.ndarray:
    """[item | recency bucket | location | behavior type] embedding of one event."""
    tb = recency_bucket(now - event.timestamp, tables.bucket_width, tables.time.shape[0])
    loc = event.location_id if 0 < event.location_id < tables.location.shape[0] else 0
    beh = behavior_index(event.behavior_type)
    if beh >= tables.behavior.shape[0]:
        beh = 0
    return np.concatenate([tables.item[event.item_id], tables.time[tb],
                           tables.location[loc], tables.behavior[beh]])


# ---------------------------------------------------------------------------
# intra-group multi-head self-attention


def init_mhsa(params: ParamSet, d: int, rng, prefix: str = "mhsa") -> None:
    from .numeric import xavier_init
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{name}", xavier_init(d, d, rng))


def mhsa_forward(params: ParamSet, x: np.ndarray, mask: np.ndarray, n_heads: int,
                 prefix: str = "mhsa"):
    """Batched MHSA followed by masked mean pooling.

    x: [N, B, d], mask: [N, B] with at least one True per row.
    Returns pooled [N, d] and a cache for :func:`mhsa_backward`.
    """
    n, b, d = x.shape
    if d % n_heads:
        raise DimensionError(f"{n_heads} heads do not divide d={d}")
    dh = d // n_heads
    wq, wk, wv, wo = (params[f"{prefix}.{w}"].value for w in ("wq", "wk", "wv", "wo"))

    def heads(t):
        return t.reshape(n, b, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    key_mask = np.broadcast_to(mask[:, None, None, :], scores.shape)
    attn = softmax_rows(scores, key_mask)
    hcat = (attn @ v).transpose(0, 2, 1, 3).reshape(n, b, d)
    out = hcat @ wo
    w = mask.astype(np.float64)
    cnt = w.sum(axis=1, keepdims=True)
    pooled = (out * w[:, :, None]).sum(axis=1) / cnt
    cache = (x, q, k, v, attn, hcat, w, cnt, scale, n_heads)
    return pooled, cache


def mhsa_backward(params: ParamSet, dpooled: np.ndarray, cache, prefix: str = "mhsa") -> np.ndarray:
    x, q, k, v, attn, hcat, w, cnt, scale, n_heads = cache
    n, b, d = x.shape
    dh = d // n_heads
    wq, wk, wv, wo = (params[f"{prefix}.{w_}"].value for w_ in ("wq", "wk", "wv", "wo"))
    dout = (w / cnt)[:, :, None] * dpooled[:, None, :]
    params[f"{prefix}.wo"].grad += hcat.reshape(-1, d).T @ dout.reshape(-1, d)
    dh_cat = (dout @ wo.T).reshape(n, b, n_heads, dh).transpose(0, 2, 1, 3)
    dattn = dh_cat @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dh_cat
    dscores = softmax_backward(attn, dattn) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(n, b, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    xf = x.reshape(-1, d)
    params[f"{prefix}.wq"].grad += xf.T @ dq.reshape(-1, d)
    params[f"{prefix}.wk"].grad += xf.T @ dk.reshape(-1, d)
    params[f"{prefix}.wv"].grad += xf.T @ dv.reshape(-1, d)
    return dq @ wq.T + dk @ wk.T + dv @ wv.T


def intra_group_mhsa(embedded: np.ndarray, pad_mask: np.ndarray, params: ParamSet,
                     n_heads: int, prefix: str = "mhsa") -> np.ndarray:
    """dyna vector of one group. ``pad_mask`` is True on padding rows."""
    embedded = np.asarray(embedded, dtype=np.float64)
    real = ~np.asarray(pad_mask, dtype=bool)
    if not real.any():
        raise ValueError("group has no real events")
    pooled, _ = mhsa_forward(params, embedded[None], real[None], n_heads, prefix)
    return pooled[0]


def masked_mean_forward(x: np.ndarray, mask: np.ndarray):
    """Ablation stand-in for MHSA: plain masked mean of the event rows."""
    w = mask.astype(np.float64)
    cnt = w.sum(axis=1, keepdims=True)
    return (x * w[:, :, None]).sum(axis=1) / cnt, (w, cnt)


def masked_mean_backward(dpooled: np.ndarray, cache) -> np.ndarray:
    w, cnt = cache
    return (w / cnt)[:, :, None] * dpooled[:, None, :]


# ---------------------------------------------------------------------------
# statistics embedding and group representation


def init_stat_embedder(params: ParamSet, d_stat: int, rng) -> None:
    from .numeric import xavier_init
    params.add("stat.w", xavier_init(N_STATS, d_stat, rng))
    params.add("stat.b", np.zeros((1, d_stat)))


def stat_features(raw: np.ndarray) -> np.ndarray:
    """log1p of the raw 7-field statistics (counts, seconds, price)."""
    return np.log1p(np.maximum(raw, 0.0))


def stat_embed_forward(params: ParamSet, raw: np.ndarray):
    f = stat_features(raw)
    return f @ params["stat.w"].value + params["stat.b"].value, f


def stat_embed_backward(params: ParamSet, demb: np.ndarray, feats: np.ndarray) -> None:
    d = demb.shape[-1]
    params["stat.w"].grad += feats.reshape(-1, N_STATS).T @ demb.reshape(-1, d)
    params["stat.b"].grad += demb.reshape(-1, d).sum(axis=0, keepdims=True)


@dataclass
class GroupRepr:
    dyna: np.ndarray
    stat_emb: np.ndarray
    g: np.ndarray = field(init=False)

    def __post_init__(self):
        self.g = np.concatenate([self.dyna, self.stat_emb])


def group_repr(dyna: np.ndarray, stats: StatVector, params: ParamSet) -> GroupRepr:
    emb, _ = stat_embed_forward(params, stats.as_array()[None])
    return GroupRepr(np.asarray(dyna, dtype=np.float64), emb[0])


# ---------------------------------------------------------------------------
# columnar featurisation


@dataclass
class EventLog:
    """Time-ascending columnar event arrays for one user."""
    item: np.ndarray
    btype: np.ndarray  # 1-based behaviour index, 0 = unknown
    ts: np.ndarray
    loc: np.ndarray
    price: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    @classmethod
    def from_events(cls, events: Sequence[BehaviorEvent]) -> "EventLog":
        evs = sorted(events, key=lambda e: e.timestamp)
        return cls(
            item=np.array([e.item_id for e in evs], dtype=np.int64),
            btype=np.array([behavior_index(e.behavior_type) for e in evs], dtype=np.int64),
            ts=np.array([e.timestamp for e in evs], dtype=np.int64),
            loc=np.array([e.location_id for e in evs], dtype=np.int64),
            price=np.array([e.price for e in evs], dtype=np.float64),
        )

    def to_events(self) -> List[BehaviorEvent]:
        return [BehaviorEvent(int(i), BEHAVIOR_TYPES[int(b) - 1], int(t), int(l), float(p))
                for i, b, t, l, p in zip(self.item, self.btype, self.ts, self.loc, self.price)]

    def before(self, t) -> "EventLog":
        n = int(np.searchsorted(self.ts, t, side="left"))
        return EventLog(self.item[:n], self.btype[:n], self.ts[:n], self.loc[:n], self.price[:n])


def category_lookup(category_map: Mapping[str, str] = DEFAULT_CATEGORY_MAP) -> np.ndarray:
    """behaviour index -> category index (unknown types count as weak)."""
    lut = np.full(len(BEHAVIOR_TYPES) + 1, CATEGORIES.index("weak"), dtype=np.int64)
    for i, name in enumerate(BEHAVIOR_TYPES, 1):
        if name in category_map:
            lut[i] = CATEGORIES.index(category_map[name])
    return lut


@dataclass
class FeatureShape:
    k: int = 16
    max_per_group: int = 32
    n_short: int = 10
    bucket_width: float = DEFAULT_BUCKET_WIDTH
    n_buckets: int = DEFAULT_N_BUCKETS
    n_locations: int = 64


def _clusters_of(items: np.ndarray, cluster_of_item: np.ndarray) -> np.ndarray:
    known = (items >= 0) & (items < len(cluster_of_item))
    return np.where(known, cluster_of_item[np.where(known, items, 0)], UNKNOWN_CLUSTER)


def short_features(log: EventLog, now: int, cluster_of_item: np.ndarray,
                   shape: FeatureShape) -> Dict[str, np.ndarray]:
    """The n_short most recent events strictly before ``now``, front-packed."""
    ns = shape.n_short
    n = int(np.searchsorted(log.ts, now, side="left"))
    m = min(ns, n)
    sl = slice(n - m, n)
    out = {
        "sh_item": np.zeros(ns, np.int64),
        "sh_cluster": np.full(ns, UNKNOWN_CLUSTER, np.int64),
        "sh_time": np.zeros(ns, np.int64),
        "sh_loc": np.zeros(ns, np.int64),
        "sh_beh": np.zeros(ns, np.int64),
        "sh_mask": np.zeros(ns, bool),
    }
    out["sh_item"][:m] = log.item[sl]
    out["sh_cluster"][:m] = _clusters_of(log.item[sl], cluster_of_item)
    out["sh_time"][:m] = recency_bucket(now - log.ts[sl], shape.bucket_width, shape.n_buckets)
    loc = log.loc[sl]
    out["sh_loc"][:m] = np.where((loc > 0) & (loc < shape.n_locations), loc, 0)
    beh = log.btype[sl]
    out["sh_beh"][:m] = np.where(beh <= len(BEHAVIOR_TYPES), beh, 0)
    out["sh_mask"][:m] = True
    return out


def featurize(log: EventLog, now: int, cluster_of_item: np.ndarray, shape: FeatureShape,
              cat_lut: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Fixed-shape arrays for one request: top-k groups, their events and stats,
    the short-term window and pairwise group time-gap buckets."""
    if cat_lut is None:
        cat_lut = category_lookup()
    k, bmax = shape.k, shape.max_per_group
    log = log.before(now)
    n = len(log)
    out = {
        "ev_item": np.zeros((k, bmax), np.int64),
        "ev_time": np.zeros((k, bmax), np.int64),
        "ev_loc": np.zeros((k, bmax), np.int64),
        "ev_beh": np.zeros((k, bmax), np.int64),
        "ev_mask": np.zeros((k, bmax), bool),
        "grp_mask": np.zeros(k, bool),
        "grp_cluster": np.full(k, UNKNOWN_CLUSTER, np.int64),
        "grp_ts": np.zeros(k, np.int64),
        "stats": np.zeros((k, N_STATS), np.float64),
        "gap_bucket": np.zeros((k, k), np.int64),
        "n_groups": np.int64(0),
    }
    out.update(short_features(log, now, cluster_of_item, shape))
    if n == 0:
        return out
    loc = np.where((log.loc > 0) & (log.loc < shape.n_locations), log.loc, 0)
    beh = np.where(log.btype <= len(BEHAVIOR_TYPES), log.btype, 0)
    tbk = recency_bucket(now - log.ts, shape.bucket_width, shape.n_buckets)

    cl = _clusters_of(log.item, cluster_of_item)

    order = np.lexsort((log.ts, cl))  # by cluster, then time (stable)
    cl_sorted = cl[order]
    starts = np.flatnonzero(np.r_[True, cl_sorted[1:] != cl_sorted[:-1]])
    ends = np.r_[starts[1:], n]
    gids = cl_sorted[starts]
    last_idx = order[ends - 1]
    gmax = log.ts[last_idx]
    out["n_groups"] = np.int64(len(gids))

    # top-k by (max_ts desc, cluster asc), then presented oldest first
    rank = np.lexsort((gids, -gmax))[:k]
    pres = rank[np.lexsort((gids[rank], gmax[rank]))]

    cats = cat_lut[beh]
    elapsed = (now - log.ts).astype(np.float64)
    for slot, g in enumerate(pres):
        idx = order[starts[g]:ends[g]]  # time-ascending within the group
        c = np.bincount(cats[idx], minlength=len(CATEGORIES))
        pay = idx[cats[idx] == CATEGORIES.index("payment")]
        el = elapsed[idx]
        out["stats"][slot] = [c[0], c[1], c[2], c[3], el.max(), el.mean(),
                              log.price[pay].mean() if len(pay) else 0.0]
        keep = idx[-bmax:]
        r = len(keep)
        out["ev_item"][slot, :r] = log.item[keep]
        out["ev_time"][slot, :r] = tbk[keep]
        out["ev_loc"][slot, :r] = loc[keep]
        out["ev_beh"][slot, :r] = beh[keep]
        out["ev_mask"][slot, :r] = True
        out["grp_mask"][slot] = True
        out["grp_cluster"][slot] = gids[g]
        out["grp_ts"][slot] = gmax[g]
    s = len(pres)
    ts = out["grp_ts"][:s]
    out["gap_bucket"][:s, :s] = recency_bucket(np.abs(ts[:, None] - ts[None, :]),
                                               shape.bucket_width, shape.n_buckets)
    return out


def stack_features(feats: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    return {key: np.stack([f[key] for f in feats]) for key in feats[0]}


def trim_batch(b: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Drop group slots and event columns that are padding for every row.

    Valid groups and events are packed at the front, so this is exact.
    """
    gm = b["grp_mask"]
    kk = max(int(gm.sum(axis=1).max()), 1) if gm.size else 1
    bb = max(int(b["ev_mask"].sum(axis=2).max()), 1) if gm.size else 1
    out = dict(b)
    for key in ("ev_item", "ev_time", "ev_loc", "ev_beh", "ev_mask"):
        out[key] = b[key][:, :kk, :bb]
    for key in ("grp_mask", "grp_cluster", "grp_ts", "stats"):
        if key in b:
            out[key] = b[key][:, :kk]
    out["gap_bucket"] = b["gap_bucket"][:, :kk, :kk]
    return out


def grouping_diagnostics(histories: Mapping[int, EventLog], cluster_of_item: np.ndarray):
    """Per-user (user_id, n_events, n_groups) rows and a log2-binned histogram
    of sequence length before and after grouping."""
    rows = []
    for uid in sorted(histories):
        log = histories[uid]
        cl = _clusters_of(log.item, cluster_of_item)
        rows.append((int(uid), len(log), len(np.unique(cl))))
    raw = np.array([r[1] for r in rows], dtype=np.int64)
    grouped = np.array([r[2] for r in rows], dtype=np.int64)
    top = int(max(raw.max(initial=1), 1))
    edges = 2 ** np.arange(0, int(np.ceil(np.log2(top))) + 2)
    hist = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        hist.append((int(lo), int(hi), int(((raw >= lo) & (raw < hi)).sum()),
                     int(((grouped >= lo) & (grouped < hi)).sum())))
    return rows, hist
