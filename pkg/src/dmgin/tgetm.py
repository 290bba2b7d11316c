"""Temporal group evolution: a stack of HSTU blocks over the top-k groups.

Each block computes

    U, V, Q, K = split(silu(G W1 + b1))
    AV = (silu(Q K^T + bias[gap]) * key_mask / n_keys) V
    out = G + (layer_norm(AV) * U) W2 + b2

with padded group rows forced back to zero. The attention is pointwise SiLU
without softmax; dividing by the number of real keys keeps the scale
independent of how many groups a user has. The residual is an addition to
the bare block equation so that six-block stacks stay trainable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .igiem import DEFAULT_BUCKET_WIDTH, DEFAULT_N_BUCKETS, recency_bucket
from .numeric import (DimensionError, ParamSet, layer_norm_backward, layer_norm_forward,
                      silu, silu_grad, xavier_init)


@dataclass
class HstuBlock:
    """Names of one block's parameters inside a ParamSet."""
    prefix: str
    d_g: int
    d_h: int

    @property
    def names(self):
        return {n: f"{self.prefix}.{n}" for n in ("w1", "b1", "w2", "b2", "bias")}


def init_block(params: ParamSet, prefix: str, d_g: int, d_h: int, n_buckets: int, rng) -> HstuBlock:
    params.add(f"{prefix}.w1", xavier_init(d_g, 4 * d_h, rng))
    params.add(f"{prefix}.b1", np.zeros((1, 4 * d_h)))
    params.add(f"{prefix}.w2", xavier_init(d_h, d_g, rng))
    params.add(f"{prefix}.b2", np.zeros((1, d_g)))
    params.add(f"{prefix}.bias", np.zeros((1, n_buckets)))
    return HstuBlock(prefix, d_g, d_h)


def init_stack(params: ParamSet, n_layers: int, d_g: int, d_h: int, n_buckets: int, rng,
               prefix: str = "hstu") -> List[HstuBlock]:
    return [init_block(params, f"{prefix}.{i}", d_g, d_h, n_buckets, rng) for i in range(n_layers)]


def relative_bias(timestamps, table: np.ndarray, width: float = DEFAULT_BUCKET_WIDTH) -> np.ndarray:
    """bias[i, j] = table[bucket(|t_i - t_j|)]."""
    t = np.asarray(timestamps, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64).reshape(-1)
    idx = recency_bucket(np.abs(t[:, None] - t[None, :]), width, table.size)
    return table[idx]


def hstu_forward(params: ParamSet, block: HstuBlock, g: np.ndarray, grp_mask: np.ndarray,
                 gap_bucket: np.ndarray):
    """g: [U, k, d_g]; grp_mask: [U, k] bool; gap_bucket: [U, k, k] int."""
    names = block.names
    w1, b1 = params[names["w1"]].value, params[names["b1"]].value
    w2, b2 = params[names["w2"]].value, params[names["b2"]].value
    table = params[names["bias"]].value[0]
    if g.shape[-1] != w1.shape[0]:
        raise DimensionError(f"block expects d_g={w1.shape[0]}, got {g.shape[-1]}")
    dh = block.d_h
    pre = g @ w1 + b1
    act = silu(pre)
    u, v, q, k = (act[..., i * dh:(i + 1) * dh] for i in range(4))
    s = q @ k.transpose(0, 2, 1) + table[gap_bucket]
    m = grp_mask.astype(np.float64)
    n_keys = np.maximum(m.sum(axis=1), 1.0)
    keyw = m[:, None, :] / n_keys[:, None, None]
    a = silu(s) * keyw
    av = a @ v
    ln, ln_cache = layer_norm_forward(av)
    z = ln * u
    y = z @ w2 + b2
    out = (g + y) * m[:, :, None]
    cache = (g, pre, act, s, keyw, a, ln, ln_cache, z, m, gap_bucket)
    return out, cache


def hstu_backward(params: ParamSet, block: HstuBlock, dout: np.ndarray, cache) -> np.ndarray:
    g, pre, act, s, keyw, a, ln, ln_cache, z, m, gap_bucket = cache
    names = block.names
    w1, w2 = params[names["w1"]].value, params[names["w2"]].value
    dh = block.d_h
    u, v, q, k = (act[..., i * dh:(i + 1) * dh] for i in range(4))
    dy = dout * m[:, :, None]
    dg_total = dy.copy()
    params[names["w2"]].grad += z.reshape(-1, dh).T @ dy.reshape(-1, dy.shape[-1])
    params[names["b2"]].grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0, keepdims=True)
    dz = dy @ w2.T
    du = dz * ln
    dav = layer_norm_backward(dz * u, ln_cache)
    da = dav @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ dav
    ds = da * keyw * silu_grad(s)
    bias_grad = np.zeros(params[names["bias"]].value.shape[1])
    np.add.at(bias_grad, gap_bucket.reshape(-1), ds.reshape(-1))
    params[names["bias"]].grad += bias_grad[None, :]
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dact = np.concatenate([du, dv, dq, dk], axis=-1)
    dpre = dact * silu_grad(pre)
    d_in = g.shape[-1]
    params[names["w1"]].grad += g.reshape(-1, d_in).T @ dpre.reshape(-1, 4 * dh)
    params[names["b1"]].grad += dpre.reshape(-1, 4 * dh).sum(axis=0, keepdims=True)
    dg_total += dpre @ w1.T
    return dg_total


def stack_forward(params: ParamSet, blocks: List[HstuBlock], g: np.ndarray, grp_mask: np.ndarray,
                  gap_bucket: np.ndarray):
    caches = []
    x = g * grp_mask[:, :, None]
    for blk in blocks:
        x, c = hstu_forward(params, blk, x, grp_mask, gap_bucket)
        caches.append(c)
    return x, caches


def stack_backward(params: ParamSet, blocks: List[HstuBlock], dout: np.ndarray, caches) -> np.ndarray:
    d = dout
    for blk, c in zip(reversed(blocks), reversed(caches)):
        d = hstu_backward(params, blk, d, c)
    return d * caches[0][9][:, :, None] if caches else d
