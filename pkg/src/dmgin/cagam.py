"""Candidate-aware group attention, short-term attention and the CTR head."""
from __future__ import annotations

import math

import numpy as np

from .numeric import ParamSet, sigmoid, silu, silu_grad, softmax_backward, softmax_rows, xavier_init


def init_attention(params: ParamSet, d_g: int, rng, prefix: str = "cand") -> None:
    params.add(f"{prefix}.wt", xavier_init(d_g, d_g, rng))
    params.add(f"{prefix}.wg", xavier_init(d_g, d_g, rng))


def candidate_attention_forward(params: ParamSet, e: np.ndarray, groups: np.ndarray,
                                mask: np.ndarray, prefix: str = "cand"):
    """Batched target attention over evolved groups.

    e: [U, d_g], groups: [U, S, d_g], mask: [U, S] (True = real group).
    alpha_s = softmax_s((e Wt) . (g_s Wg) / sqrt(d_g)); r_long = sum_s alpha_s g_s Wg.
    """
    wt, wg = params[f"{prefix}.wt"].value, params[f"{prefix}.wg"].value
    d = e.shape[-1]
    scale = 1.0 / math.sqrt(d)
    a = e @ wt
    p = groups @ wg
    logits = np.einsum("usd,ud->us", p, a) * scale
    alpha = softmax_rows(logits, mask)
    r = np.einsum("us,usd->ud", alpha, p)
    return alpha, r, (e, groups, a, p, alpha, scale)


def candidate_attention_backward(params: ParamSet, dr: np.ndarray, cache, prefix: str = "cand"):
    e, groups, a, p, alpha, scale = cache
    wt, wg = params[f"{prefix}.wt"].value, params[f"{prefix}.wg"].value
    dalpha = np.einsum("ud,usd->us", dr, p)
    dlogits = softmax_backward(alpha, dalpha) * scale
    dp = alpha[:, :, None] * dr[:, None, :] + dlogits[:, :, None] * a[:, None, :]
    da = np.einsum("us,usd->ud", dlogits, p)
    d = e.shape[-1]
    params[f"{prefix}.wt"].grad += e.T @ da
    params[f"{prefix}.wg"].grad += groups.reshape(-1, d).T @ dp.reshape(-1, d)
    return da @ wt.T, dp @ wg.T


def candidate_attention(e, groups, params: ParamSet, mask=None, prefix: str = "cand"):
    """Single-user convenience wrapper returning (alpha, r_long)."""
    e = np.asarray(e, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.float64)
    if mask is None:
        mask = np.ones(groups.shape[0], bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("every group is masked")
    alpha, r, _ = candidate_attention_forward(params, e[None], groups[None], mask[None], prefix)
    return alpha[0], r[0]


def init_short_term(params: ParamSet, d_event: int, d_g: int, rng, prefix: str = "short") -> None:
    params.add(f"{prefix}.wk", xavier_init(d_event, d_g, rng))
    params.add(f"{prefix}.wv", xavier_init(d_event, d_g, rng))


def short_term_forward(params: ParamSet, events: np.ndarray, mask: np.ndarray, e: np.ndarray,
                       prefix: str = "short"):
    """Target attention of the candidate over the most recent raw events.

    events: [U, n, d_event]; mask: [U, n]; e: [U, d_g]. Users with no recent
    events get a zero vector.
    """
    wk, wv = params[f"{prefix}.wk"].value, params[f"{prefix}.wv"].value
    u, n, _ = events.shape
    d = e.shape[-1]
    scale = 1.0 / math.sqrt(d)
    keys = events @ wk
    vals = events @ wv
    logits = np.einsum("und,ud->un", keys, e) * scale
    has = mask.any(axis=1)
    safe_mask = mask.copy()
    if n:
        safe_mask[~has, 0] = True
        beta = softmax_rows(logits, safe_mask) * has[:, None]
    else:
        beta = np.zeros((u, 0))
    r = np.einsum("un,und->ud", beta, vals)
    return r, (events, keys, vals, beta, e, scale)


def short_term_backward(params: ParamSet, dr: np.ndarray, cache, prefix: str = "short"):
    events, keys, vals, beta, e, scale = cache
    wk, wv = params[f"{prefix}.wk"].value, params[f"{prefix}.wv"].value
    de_dim = events.shape[-1]
    d = e.shape[-1]
    dbeta = np.einsum("ud,und->un", dr, vals)
    dvals = beta[:, :, None] * dr[:, None, :]
    dlogits = softmax_backward(beta, dbeta) * scale
    dkeys = dlogits[:, :, None] * e[:, None, :]
    de = np.einsum("un,und->ud", dlogits, keys)
    params[f"{prefix}.wk"].grad += events.reshape(-1, de_dim).T @ dkeys.reshape(-1, d)
    params[f"{prefix}.wv"].grad += events.reshape(-1, de_dim).T @ dvals.reshape(-1, d)
    devents = dkeys @ wk.T + dvals @ wv.T
    return devents, de


def short_term_repr(recent: np.ndarray, e: np.ndarray, params: ParamSet, prefix: str = "short"):
    recent = np.asarray(recent, dtype=np.float64).reshape(-1, params[f"{prefix}.wk"].value.shape[0])
    e = np.asarray(e, dtype=np.float64)
    mask = np.ones((1, recent.shape[0]), bool)
    r, _ = short_term_forward(params, recent[None], mask, e[None], prefix)
    return r[0]


def init_head(params: ParamSet, d_in: int, hidden: int, rng, prefix: str = "head") -> None:
    params.add(f"{prefix}.w1", xavier_init(d_in, hidden, rng))
    params.add(f"{prefix}.b1", np.zeros((1, hidden)))
    params.add(f"{prefix}.w2", xavier_init(hidden, 1, rng))
    params.add(f"{prefix}.b2", np.zeros((1, 1)))


def head_forward(params: ParamSet, x: np.ndarray, prefix: str = "head"):
    """Two-layer SiLU MLP; returns the logit [U]."""
    pre = x @ params[f"{prefix}.w1"].value + params[f"{prefix}.b1"].value
    h = silu(pre)
    logit = (h @ params[f"{prefix}.w2"].value + params[f"{prefix}.b2"].value)[:, 0]
    return logit, (x, pre, h)


def head_backward(params: ParamSet, dlogit: np.ndarray, cache, prefix: str = "head") -> np.ndarray:
    x, pre, h = cache
    dl = dlogit[:, None]
    params[f"{prefix}.w2"].grad += h.T @ dl
    params[f"{prefix}.b2"].grad += dl.sum(axis=0, keepdims=True)
    dpre = (dl @ params[f"{prefix}.w2"].value.T) * silu_grad(pre)
    params[f"{prefix}.w1"].grad += x.T @ dpre
    params[f"{prefix}.b1"].grad += dpre.sum(axis=0, keepdims=True)
    return dpre @ params[f"{prefix}.w1"].value.T


def fuse_and_predict(r_long, r_short, aux, e, params: ParamSet, prefix: str = "head") -> float:
    x = np.concatenate([np.ravel(r_long), np.ravel(r_short), np.ravel(aux), np.ravel(e)])[None]
    logit, _ = head_forward(params, x, prefix)
    return float(sigmoid(logit)[0])
