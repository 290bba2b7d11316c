"""Training, evaluation metrics, ablations and the multi-seed protocol."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import cmrlm, idecm, igiem
from .datagen import Dataset, Sample
from .model import Model, ModelConfig
from .numeric import adam_step, checkpoint_bytes, sigmoid

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: bytes):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# losses and metrics


def bce_loss(p, y) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_with_logits(logit: np.ndarray, y: np.ndarray):
    """Mean BCE from logits and its gradient w.r.t. the logits."""
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    return loss, (sigmoid(logit) - y) / len(y)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + ties/2) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for single-class labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, user_ids) -> float:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    u = np.asarray(user_ids)
    per_user = []
    for uid in np.unique(u):
        m = u == uid
        yu = y[m]
        if yu.min() == yu.max():
            continue
        per_user.append((int(m.sum()), auc(s[m], yu)))
    if not per_user:
        raise ValueError("no user has both positive and negative samples")
    total = sum(n for n, _ in per_user)
    # weights first, so a single user gets weight exactly 1
    return float(sum((n / total) * a for n, a in per_user))


# ---------------------------------------------------------------------------
# configuration and preparation


@dataclass
class ExperimentConfig:
    d_field: int = 8
    d_stat: int = 8
    n_heads: int = 2
    d_h: int = 16
    n_layers: int = 2
    hidden: int = 32
    k: int = 16
    max_per_group: int = 48
    n_short: int = 10
    n_clusters: int = 50
    lr: float = 5e-3
    batch_size: int = 128
    epochs: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    disable_stats: bool = False
    disable_behavior_evolution: bool = False
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    emb_scale: float = 1.0
    kind: str = "dmgin"

    def model_config(self, n_items: int, kind: Optional[str] = None, n_profiles: int = 8,
                     n_locations: int = 64) -> ModelConfig:
        return ModelConfig(
            n_items=n_items, n_clusters=self.n_clusters, d_field=self.d_field, d_stat=self.d_stat,
            n_heads=self.n_heads, d_h=self.d_h, n_layers=self.n_layers, hidden=self.hidden,
            k=self.k, max_per_group=self.max_per_group, n_short=self.n_short,
            n_locations=n_locations, n_profiles=n_profiles, kind=kind or self.kind,
            disable_stats=self.disable_stats,
            disable_behavior_evolution=self.disable_behavior_evolution,
            emb_scale=self.emb_scale)


@dataclass
class Prepared:
    """Everything a training run needs that does not depend on the model."""
    clusters: idecm.ClusterModel
    cluster_lut: np.ndarray
    train: Dict[str, np.ndarray]
    test: Dict[str, np.ndarray]
    n_items: int
    n_profiles: int
    n_locations: int
    bayes_auc: float
    pretrain_losses: List[float] = field(default_factory=list)


def modality_pairs(ds: Dataset) -> List[cmrlm.ModalityPair]:
    e = ds.entities
    return [cmrlm.ModalityPair(i, e.text[i], e.image[i]) for i in range(len(e))]


def cluster_entities(ds: Dataset, cfg: ExperimentConfig):
    pcfg = cmrlm.PretrainConfig(epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr)
    pairs = modality_pairs(ds)
    res = cmrlm.pretrain(pairs, pcfg, seed=cfg.seed)
    emb = cmrlm.embed_entities(res.tower, pairs)
    clusters = idecm.kmeans_fit(emb, cfg.n_clusters, seed=cfg.seed)
    return res, emb, clusters


def build_features(samples: Sequence[Sample], cluster_lut: np.ndarray,
                   shape: igiem.FeatureShape, cat_lut: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    lut = igiem.category_lookup() if cat_lut is None else cat_lut
    feats = [igiem.featurize(s.history, s.request_time, cluster_lut, shape, lut) for s in samples]
    b = igiem.stack_features(feats)
    b["cand_item"] = np.array([s.candidate for s in samples], np.int64)
    b["cand_cluster"] = igiem._clusters_of(b["cand_item"], cluster_lut)
    b["profile"] = np.array([s.profile for s in samples], np.int64)
    b["hour"] = np.array([s.hour for s in samples], np.int64)
    b["label"] = np.array([s.label for s in samples], np.float64)
    b["user_id"] = np.array([s.user_id for s in samples], np.int64)
    return b


def prepare_samples(train_samples: Sequence[Sample], test_samples: Sequence[Sample],
                    cluster_lut: np.ndarray, cfg: ExperimentConfig, n_items: int, n_profiles: int,
                    n_locations: int, bayes_auc: float, cat_lut: Optional[np.ndarray] = None,
                    clusters: Optional[idecm.ClusterModel] = None) -> Prepared:
    shape = cfg.model_config(n_items, n_profiles=n_profiles, n_locations=n_locations).feature_shape()
    return Prepared(clusters, cluster_lut, build_features(train_samples, cluster_lut, shape, cat_lut),
                    build_features(test_samples, cluster_lut, shape, cat_lut), n_items,
                    n_profiles, n_locations, bayes_auc)


def prepare(ds: Dataset, cfg: ExperimentConfig, cluster_lut: Optional[np.ndarray] = None) -> Prepared:
    """Pretrain and cluster (unless a cluster map is given), then featurize."""
    losses: List[float] = []
    clusters = None
    if cluster_lut is None:
        res, _, clusters = cluster_entities(ds, cfg)
        losses = res.losses
        cluster_lut = clusters.cluster_of_item(len(ds.entities))
    prep = prepare_samples(ds.train, ds.test, cluster_lut, cfg, len(ds.entities),
                           ds.config.n_profiles, ds.config.n_locations, ds.bayes_auc,
                           clusters=clusters)
    prep.pretrain_losses = losses
    return prep


def take(b: Dict[str, np.ndarray], idx) -> Dict[str, np.ndarray]:
    return {k: v[idx] for k, v in b.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class MetricsReport:
    auc: float
    gauc: float
    losses: List[float] = field(default_factory=list)
    epoch_auc: List[float] = field(default_factory=list)
    epoch_gauc: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> List[str]:
        rows = ["epoch,loss,auc,gauc"]
        for i, (l, a, g) in enumerate(zip(self.losses, self.epoch_auc, self.epoch_gauc), 1):
            rows.append(f"{i},{l!r},{a!r},{g!r}")
        return rows


def predict(model: Model, b: Dict[str, np.ndarray], batch_size: int = 512) -> np.ndarray:
    n = len(b["label"])
    out = [model.predict(igiem.trim_batch(take(b, slice(i, i + batch_size))))
           for i in range(0, n, batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: Model, b: Dict[str, np.ndarray]):
    p = predict(model, b)
    return auc(p, b["label"]), gauc(p, b["label"], b["user_id"])


def train(model: Model, train_b: Dict[str, np.ndarray], test_b: Dict[str, np.ndarray],
          cfg: ExperimentConfig) -> MetricsReport:
    """Mini-batch Adam on mean BCE with global-norm clipping; deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed + 1_000_003)
    n = len(train_b["label"])
    report = MetricsReport(auc=float("nan"), gauc=float("nan"))
    last_good = checkpoint_bytes(model.params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = igiem.trim_batch(take(train_b, order[start:start + cfg.batch_size]))
            model.params.zero_grad()
            logit, cache = model.forward(b)
            loss, dlogit = bce_with_logits(logit, b["label"])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, offset {start}", last_good)
            model.backward(dlogit, b, cache)
            model.params.clip_grad_norm(cfg.clip_norm)
            adam_step(model.params, cfg.lr)
            total += loss * len(b["label"])
        last_good = checkpoint_bytes(model.params)
        a, g = evaluate(model, test_b)
        report.losses.append(total / n)
        report.epoch_auc.append(a)
        report.epoch_gauc.append(g)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.4f auc %.4f gauc %.4f", epoch + 1, total / n, a, g)
    if cfg.epochs:
        report.auc, report.gauc = report.epoch_auc[-1], report.epoch_gauc[-1]
    else:
        report.auc, report.gauc = evaluate(model, test_b)
    return report


def run(prep: Prepared, cfg: ExperimentConfig, kind: Optional[str] = None):
    """Initialise a fresh model from cfg.seed and train it on prepared data."""
    mcfg = cfg.model_config(prep.n_items, kind, prep.n_profiles, prep.n_locations)
    model = Model(mcfg, seed=cfg.seed)
    report = train(model, prep.train, prep.test, cfg)
    return model, report


def baseline_pooled(prep: Prepared, cfg: ExperimentConfig):
    return run(prep, cfg, kind="pooled")


ABLATIONS = {
    "full": {},
    "-stats": {"disable_stats": True},
    "-behavior-evolution": {"disable_behavior_evolution": True},
}


def ablate(prep: Prepared, cfg: ExperimentConfig) -> Dict[str, MetricsReport]:
    return {name: run(prep, replace(cfg, **flags))[1] for name, flags in ABLATIONS.items()}


def depth_sweep(prep: Prepared, cfg: ExperimentConfig, layers: Sequence[int]) -> Dict[int, MetricsReport]:
    return {n: run(prep, replace(cfg, n_layers=n))[1] for n in layers}


def mean_std(values: Sequence[float]):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
