"""Dual-tower contrastive pretraining over entity text/image features.

Two small SiLU MLPs map each modality into a shared unit sphere. Training uses
the symmetric in-batch InfoNCE loss with a learnable temperature; the final
entity embedding is the renormalised concatenation of both tower outputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numeric import ParamSet, adam_step, silu, silu_grad, softmax_rows, xavier_init

log = logging.getLogger(__name__)

TEMP_MIN, TEMP_MAX = 0.01, 1.0


@dataclass
class ModalityPair:
    entity_id: int
    text_features: np.ndarray
    image_features: np.ndarray


@dataclass
class PretrainConfig:
    hidden: int = 64
    d_emb: int = 32
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    init_temperature: float = 0.07


class TowerModel:
    def __init__(self, d_txt: int, d_img: int, hidden: int = 64, d_emb: int = 32,
                 seed=0, temperature: float = 0.07, params: Optional[ParamSet] = None):
        self.dims = {"text": d_txt, "image": d_img}
        self.hidden, self.d_emb = hidden, d_emb
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamSet()
            for side, d_in in self.dims.items():
                params.add(f"{side}.w1", xavier_init(d_in, hidden, rng))
                params.add(f"{side}.b1", np.zeros((1, hidden)))
                params.add(f"{side}.w2", xavier_init(hidden, d_emb, rng))
                params.add(f"{side}.b2", np.zeros((1, d_emb)))
            params.add("temperature", np.array([[temperature]]))
        self.params = params

    @property
    def temperature(self) -> float:
        return float(self.params["temperature"].value[0, 0])

    def forward(self, side: str, x: np.ndarray):
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dims[side]:
            raise ValueError(f"{side} tower expects {self.dims[side]} features, got {x.shape[-1]}")
        pre = x @ p[f"{side}.w1"].value + p[f"{side}.b1"].value
        h = silu(pre)
        y = h @ p[f"{side}.w2"].value + p[f"{side}.b2"].value
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        if np.any(norm == 0.0):
            raise ValueError("tower output has zero norm; cannot normalise")
        z = y / norm
        return z, (side, x, pre, h, z, norm)

    def backward(self, dz: np.ndarray, cache) -> None:
        side, x, pre, h, z, norm = cache
        p = self.params
        dy = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / norm
        p[f"{side}.w2"].grad += h.T @ dy
        p[f"{side}.b2"].grad += dy.sum(axis=0, keepdims=True)
        dpre = (dy @ p[f"{side}.w2"].value.T) * silu_grad(pre)
        p[f"{side}.w1"].grad += x.T @ dpre
        p[f"{side}.b1"].grad += dpre.sum(axis=0, keepdims=True)


def encode(tower: TowerModel, side: str, features) -> np.ndarray:
    z, _ = tower.forward(side, np.atleast_2d(features))
    return z[0] if np.ndim(features) == 1 else z


def _loss_and_grads(t: np.ndarray, im: np.ndarray, temperature: float):
    """Symmetric InfoNCE on unit rows; returns loss, dt, dim, dtemperature."""
    n = t.shape[0]
    sims = t @ im.T
    logits = sims / temperature
    pr = softmax_rows(logits)
    pc = softmax_rows(logits.T).T
    diag = np.arange(n)
    lr = -np.log(pr[diag, diag]).mean()
    lc = -np.log(pc[diag, diag]).mean()
    loss = 0.5 * (lr + lc)
    eye = np.eye(n)
    dlogits = 0.5 * ((pr - eye) + (pc - eye)) / n
    dsims = dlogits / temperature
    dtemp = -float((dlogits * logits).sum()) / temperature
    return loss, dsims @ im, dsims.T @ t, dtemp


def contrastive_loss(text_embs, img_embs, temperature: float) -> float:
    """Mean of the text->image and image->text cross-entropies over the
    cosine-similarity / temperature matrix, matching pairs on the diagonal."""
    t = np.asarray(text_embs, dtype=np.float64)
    im = np.asarray(img_embs, dtype=np.float64)
    if t.shape != im.shape:
        raise ValueError(f"embedding sets differ in shape: {t.shape} vs {im.shape}")
    if t.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two pairs")
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    im = im / np.linalg.norm(im, axis=1, keepdims=True)
    return float(_loss_and_grads(t, im, temperature)[0])


@dataclass
class PretrainResult:
    tower: TowerModel
    losses: List[float] = field(default_factory=list)


def pretrain(pairs: Sequence[ModalityPair], config: PretrainConfig = PretrainConfig(),
             seed=0) -> PretrainResult:
    if len(pairs) < 2:
        raise ValueError("pretraining needs at least two entities")
    text = np.stack([np.asarray(p.text_features, dtype=np.float64) for p in pairs])
    image = np.stack([np.asarray(p.image_features, dtype=np.float64) for p in pairs])
    tower = TowerModel(text.shape[1], image.shape[1], config.hidden, config.d_emb, seed=seed,
                       temperature=config.init_temperature)
    rng = np.random.default_rng(seed)
    n = len(pairs)
    bs = max(2, min(config.batch_size, n))
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            tower.params.zero_grad()
            zt, ct = tower.forward("text", text[idx])
            zi, ci = tower.forward("image", image[idx])
            loss, dt, di, dtemp = _loss_and_grads(zt, zi, tower.temperature)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite contrastive loss at epoch {epoch}, batch starting {start}; "
                    f"temperature={tower.temperature:.4g}")
            tower.backward(dt, ct)
            tower.backward(di, ci)
            tower.params["temperature"].grad[0, 0] += dtemp
            adam_step(tower.params, config.lr)
            temp = tower.params["temperature"].value
            np.clip(temp, TEMP_MIN, TEMP_MAX, out=temp)
            total += loss
            batches += 1
        losses.append(total / max(batches, 1))
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    return PretrainResult(tower, losses)


def embed_entity(tower: TowerModel, pair: ModalityPair) -> np.ndarray:
    return embed_entities(tower, [pair])[0]


def embed_entities(tower: TowerModel, pairs: Sequence[ModalityPair]) -> np.ndarray:
    """One unit vector per entity: normalised [text tower | image tower]."""
    zt = encode(tower, "text", np.stack([p.text_features for p in pairs]))
    zi = encode(tower, "image", np.stack([p.image_features for p in pairs]))
    cat = np.concatenate([zt, zi], axis=1)
    return cat / np.linalg.norm(cat, axis=1, keepdims=True)


def alignment_report(tower: TowerModel, pairs: Sequence[ModalityPair]) -> dict:
    """Matched vs mismatched cosine and text->image top-1 retrieval."""
    zt = encode(tower, "text", np.stack([p.text_features for p in pairs]))
    zi = encode(tower, "image", np.stack([p.image_features for p in pairs]))
    sims = zt @ zi.T
    n = len(pairs)
    off = ~np.eye(n, dtype=bool)
    return {
        "matched_cos": float(np.diag(sims).mean()),
        "mismatched_cos": float(sims[off].mean()),
        "top1": float((sims.argmax(axis=1) == np.arange(n)).mean()),
    }


def write_embeddings(ids, embeddings: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(ids, embeddings):
            fh.write(f"{int(i)}\t" + ",".join(repr(float(x)) for x in row) + "\n")


def read_embeddings(path):
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'entity_id<TAB>values'")
            ids.append(int(parts[0]))
            rows.append([float(x) for x in parts[1].split(",")])
    return np.array(ids), np.array(rows)
