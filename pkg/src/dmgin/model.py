"""The assembled CTR model and the pooled short-sequence baseline.

Inputs are the fixed-shape feature dicts produced by
:func:`dmgin.igiem.featurize`, stacked over a batch and extended with the
candidate and auxiliary fields (``cand_item``, ``cand_cluster``, ``profile``,
``hour``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import cagam, igiem, tgetm
from .numeric import ParamSet, sigmoid

P_MIN = 1e-15


@dataclass
class ModelConfig:
    n_items: int
    n_clusters: int
    d_field: int = 16
    d_stat: int = 16
    n_heads: int = 2
    d_h: int = 32
    n_layers: int = 2
    hidden: int = 64
    k: int = 16
    max_per_group: int = 32
    n_short: int = 10
    n_buckets: int = igiem.DEFAULT_N_BUCKETS
    bucket_width: float = igiem.DEFAULT_BUCKET_WIDTH
    n_locations: int = 64
    n_profiles: int = 8
    kind: str = "dmgin"  # or "pooled"
    disable_stats: bool = False
    disable_behavior_evolution: bool = False
    emb_scale: float = 0.1

    @property
    def d_event(self) -> int:
        return 4 * self.d_field

    @property
    def d_g(self) -> int:
        return self.d_event + self.d_stat

    def feature_shape(self) -> igiem.FeatureShape:
        return igiem.FeatureShape(k=self.k, max_per_group=self.max_per_group, n_short=self.n_short,
                                  bucket_width=self.bucket_width, n_buckets=self.n_buckets,
                                  n_locations=self.n_locations)

    def to_dict(self) -> dict:
        return asdict(self)


def _embedding(rng, rows, cols, scale):
    return rng.normal(0.0, scale, size=(rows, cols))


def init_params(cfg: ModelConfig, seed) -> ParamSet:
    rng = np.random.default_rng(seed)
    p = ParamSet()
    df = cfg.d_field
    p.add("emb.item", _embedding(rng, cfg.n_items, df, cfg.emb_scale))
    p.add("emb.time", _embedding(rng, cfg.n_buckets, df, cfg.emb_scale))
    p.add("emb.loc", _embedding(rng, cfg.n_locations, df, cfg.emb_scale))
    p.add("emb.beh", _embedding(rng, len(igiem.BEHAVIOR_TYPES) + 1, df, cfg.emb_scale))
    p.add("emb.cluster", _embedding(rng, cfg.n_clusters + 1, df, cfg.emb_scale))
    p.add("emb.profile", _embedding(rng, cfg.n_profiles, df, cfg.emb_scale))
    p.add("emb.hour", _embedding(rng, 24, df, cfg.emb_scale))
    from .numeric import xavier_init
    p.add("cand.we", xavier_init(2 * df, cfg.d_g, rng))
    p.add("cand.be", np.zeros((1, cfg.d_g)))
    if cfg.kind == "pooled":
        cagam.init_head(p, cfg.d_event + cfg.d_g + 2 * df, cfg.hidden, rng)
        return p
    igiem.init_mhsa(p, cfg.d_event, rng)
    igiem.init_stat_embedder(p, cfg.d_stat, rng)
    tgetm.init_stack(p, cfg.n_layers, cfg.d_g, cfg.d_h, cfg.n_buckets, rng)
    cagam.init_attention(p, cfg.d_g, rng)
    cagam.init_short_term(p, cfg.d_event, cfg.d_g, rng)
    cagam.init_head(p, 3 * cfg.d_g + 2 * df, cfg.hidden, rng)
    return p


class Model:
    def __init__(self, cfg: ModelConfig, params: Optional[ParamSet] = None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.blocks = [tgetm.HstuBlock(f"hstu.{i}", cfg.d_g, cfg.d_h) for i in range(cfg.n_layers)]

    # -- embedding helpers -------------------------------------------------
    def _events(self, item, cluster, time, loc, beh):
        # the item field carries the shared cluster embedding too
        p = self.params
        ident = p["emb.item"].value[item] + p["emb.cluster"].value[cluster + 1]
        return np.concatenate([ident, p["emb.time"].value[time],
                               p["emb.loc"].value[loc], p["emb.beh"].value[beh]], axis=-1)

    def _events_backward(self, d, item, cluster, time, loc, beh):
        df = self.cfg.d_field
        fields = (("emb.item", item), ("emb.cluster", cluster + 1), ("emb.time", time),
                  ("emb.loc", loc), ("emb.beh", beh))
        for i, (name, idx) in enumerate(fields):
            j = max(i - 1, 0)
            np.add.at(self.params[name].grad, idx.reshape(-1),
                      d[..., j * df:(j + 1) * df].reshape(-1, df))

    def _candidate(self, item, cluster):
        p = self.params
        x = np.concatenate([p["emb.item"].value[item], p["emb.cluster"].value[cluster + 1]], axis=-1)
        return x @ p["cand.we"].value + p["cand.be"].value, x

    def _candidate_backward(self, de, x, item, cluster):
        p = self.params
        df = self.cfg.d_field
        p["cand.we"].grad += x.T @ de
        p["cand.be"].grad += de.sum(axis=0, keepdims=True)
        dx = de @ p["cand.we"].value.T
        np.add.at(p["emb.item"].grad, item, dx[:, :df])
        np.add.at(p["emb.cluster"].grad, cluster + 1, dx[:, df:])

    def _aux(self, profile, hour):
        p = self.params
        return np.concatenate([p["emb.profile"].value[profile], p["emb.hour"].value[hour]], axis=-1)

    def _aux_backward(self, d, profile, hour):
        df = self.cfg.d_field
        np.add.at(self.params["emb.profile"].grad, profile, d[:, :df])
        np.add.at(self.params["emb.hour"].grad, hour, d[:, df:])

    @staticmethod
    def _group_clusters(b):
        return np.broadcast_to(b["grp_cluster"][..., None], b["ev_item"].shape)

    # -- long-term branch (candidate independent) --------------------------
    def long_forward(self, b: Dict[str, np.ndarray]):
        """Evolved group matrix G' [U, k, d_g] from history features only."""
        cfg = self.cfg
        u, k, bm = b["ev_item"].shape
        gmask = b["grp_mask"]
        emask = b["ev_mask"].copy()
        emask[~gmask, 0] = True  # padded groups get a dummy row, zeroed below
        ev = self._events(b["ev_item"], self._group_clusters(b), b["ev_time"], b["ev_loc"], b["ev_beh"])
        ev = ev * emask[..., None]
        x = ev.reshape(u * k, bm, cfg.d_event)
        if cfg.disable_behavior_evolution:
            dyna, dcache = igiem.masked_mean_forward(x, emask.reshape(u * k, bm))
        else:
            dyna, dcache = igiem.mhsa_forward(self.params, x, emask.reshape(u * k, bm), cfg.n_heads)
        dyna = dyna.reshape(u, k, cfg.d_event)
        if cfg.disable_stats:
            semb, sfeat = np.zeros((u, k, cfg.d_stat)), None
        else:
            semb, sfeat = igiem.stat_embed_forward(self.params, b["stats"])
        g = np.concatenate([dyna, semb], axis=-1) * gmask[..., None]
        gp, scache = tgetm.stack_forward(self.params, self.blocks, g, gmask, b["gap_bucket"])
        return gp, (emask, dcache, sfeat, scache)

    def long_backward(self, dgp, b, cache):
        cfg = self.cfg
        emask, dcache, sfeat, scache = cache
        u, k, bm = b["ev_item"].shape
        gmask = b["grp_mask"]
        dg = tgetm.stack_backward(self.params, self.blocks, dgp, scache) * gmask[..., None]
        ddyna = dg[..., :cfg.d_event].reshape(u * k, cfg.d_event)
        if not cfg.disable_stats:
            igiem.stat_embed_backward(self.params, dg[..., cfg.d_event:], sfeat)
        if cfg.disable_behavior_evolution:
            dx = igiem.masked_mean_backward(ddyna, dcache)
        else:
            dx = igiem.mhsa_backward(self.params, ddyna, dcache)
        dev = dx.reshape(u, k, bm, cfg.d_event) * emask[..., None]
        self._events_backward(dev, b["ev_item"], self._group_clusters(b), b["ev_time"],
                              b["ev_loc"], b["ev_beh"])

    # -- full forward / backward -------------------------------------------
    def forward(self, b: Dict[str, np.ndarray]):
        """Logits [U] and a cache for :meth:`backward`."""
        if self.cfg.kind == "pooled":
            return self._pooled_forward(b)
        e, cx = self._candidate(b["cand_item"], b["cand_cluster"])
        gp, lcache = self.long_forward(b)
        logit, hcache = self._score_forward(gp, b, e)
        return logit, (e, cx, gp, lcache, hcache)

    def _score_forward(self, gp, b, e):
        _, r_long, acache = cagam.candidate_attention_forward(self.params, e, gp, b["grp_mask"])
        sev = self._events(b["sh_item"], b["sh_cluster"], b["sh_time"], b["sh_loc"], b["sh_beh"]) * b["sh_mask"][..., None]
        r_short, stcache = cagam.short_term_forward(self.params, sev, b["sh_mask"], e)
        aux = self._aux(b["profile"], b["hour"])
        x = np.concatenate([r_long, r_short, aux, e], axis=-1)
        logit, hcache = cagam.head_forward(self.params, x)
        return logit, (acache, stcache, hcache)

    def backward(self, dlogit: np.ndarray, b, cache) -> None:
        if self.cfg.kind == "pooled":
            return self._pooled_backward(dlogit, b, cache)
        cfg = self.cfg
        e, cx, gp, lcache, (acache, stcache, hcache) = cache
        dg, df = cfg.d_g, cfg.d_field
        dx = cagam.head_backward(self.params, dlogit, hcache)
        dr_long, dr_short = dx[:, :dg], dx[:, dg:2 * dg]
        daux, de = dx[:, 2 * dg:2 * dg + 2 * df], dx[:, 2 * dg + 2 * df:].copy()
        self._aux_backward(daux, b["profile"], b["hour"])
        dsev, de_s = cagam.short_term_backward(self.params, dr_short, stcache)
        de += de_s
        self._events_backward(dsev * b["sh_mask"][..., None], b["sh_item"], b["sh_cluster"], b["sh_time"],
                              b["sh_loc"], b["sh_beh"])
        de_a, dgp = cagam.candidate_attention_backward(self.params, dr_long, acache)
        de += de_a
        self._candidate_backward(de, cx, b["cand_item"], b["cand_cluster"])
        self.long_backward(dgp, b, lcache)

    # -- pooled baseline ---------------------------------------------------
    def _pooled_forward(self, b):
        e, cx = self._candidate(b["cand_item"], b["cand_cluster"])
        m = b["sh_mask"].astype(np.float64)
        cnt = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        sev = self._events(b["sh_item"], b["sh_cluster"], b["sh_time"], b["sh_loc"], b["sh_beh"])
        pooled = (sev * m[..., None]).sum(axis=1) / cnt
        aux = self._aux(b["profile"], b["hour"])
        x = np.concatenate([pooled, aux, e], axis=-1)
        logit, hcache = cagam.head_forward(self.params, x)
        return logit, (e, cx, m, cnt, hcache)

    def _pooled_backward(self, dlogit, b, cache):
        e, cx, m, cnt, hcache = cache
        de_ev, df = self.cfg.d_event, self.cfg.d_field
        dx = cagam.head_backward(self.params, dlogit, hcache)
        dpool, daux, de = dx[:, :de_ev], dx[:, de_ev:de_ev + 2 * df], dx[:, de_ev + 2 * df:]
        dsev = (m / cnt)[..., None] * dpool[:, None, :]
        self._events_backward(dsev, b["sh_item"], b["sh_cluster"], b["sh_time"], b["sh_loc"], b["sh_beh"])
        self._aux_backward(daux, b["profile"], b["hour"])
        self._candidate_backward(de, cx, b["cand_item"], b["cand_cluster"])

    # -- inference ---------------------------------------------------------
    def predict(self, b) -> np.ndarray:
        logit, _ = self.forward(b)
        return np.clip(sigmoid(logit), P_MIN, 1.0 - P_MIN)

    def score_candidates(self, gp: np.ndarray, grp_mask: np.ndarray, short: Dict[str, np.ndarray],
                         cand_item: np.ndarray, cand_cluster: np.ndarray, profile: int,
                         hour: int) -> np.ndarray:
        """pCTR for many candidates of one user given that user's G' [k, d_g].

        Candidate-independent projections are computed once and shared.
        """
        p = self.params
        c = len(cand_item)
        e, _ = self._candidate(np.asarray(cand_item), np.asarray(cand_cluster))
        proj = gp @ p["cand.wg"].value
        logits = (e @ p["cand.wt"].value) @ proj.T / np.sqrt(self.cfg.d_g)
        alpha = np.where(grp_mask[None, :], logits, -np.inf)
        alpha = np.exp(alpha - alpha.max(axis=1, keepdims=True))
        alpha /= alpha.sum(axis=1, keepdims=True)
        r_long = alpha @ proj
        sm = short["sh_mask"]
        if sm.any():
            sev = self._events(short["sh_item"][sm], short["sh_cluster"][sm], short["sh_time"][sm], short["sh_loc"][sm],
                               short["sh_beh"][sm])
            keys, vals = sev @ p["short.wk"].value, sev @ p["short.wv"].value
            sl = e @ keys.T / np.sqrt(self.cfg.d_g)
            beta = np.exp(sl - sl.max(axis=1, keepdims=True))
            beta /= beta.sum(axis=1, keepdims=True)
            r_short = beta @ vals
        else:
            r_short = np.zeros((c, self.cfg.d_g))
        aux = np.broadcast_to(self._aux(np.array([profile]), np.array([hour])), (c, 2 * self.cfg.d_field))
        x = np.concatenate([r_long, r_short, aux, e], axis=-1)
        logit, _ = cagam.head_forward(p, x)
        return np.clip(sigmoid(logit), P_MIN, 1.0 - P_MIN)
