"""Dense float64 kernels, parameter storage, Adam and gradient checking.

Every trainable tensor in the package is a 2-D float64 ``numpy`` array held in
a :class:`ParamSet`. Layers are plain functions with a forward that returns a
cache and a backward that accumulates into ``ParamSet`` gradients.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional

import numpy as np
from scipy.special import expit

LN_EPS = 1e-6


class DimensionError(ValueError):
    pass


class NonDeterministicLossError(RuntimeError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax along the last axis. ``mask`` marks entries that take part (True)."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=-1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape}")
    z = np.where(mask, x, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    if np.isneginf(top).any():
        raise ValueError("softmax over a fully masked row")
    z -= top
    np.exp(z, out=z)  # masked entries become exactly 0
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(x, eps)[0]


def layer_norm_forward(x: np.ndarray, eps: float = LN_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    return y, (y, inv)


def layer_norm_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, inv = cache
    return inv * (
        dy
        - dy.mean(axis=-1, keepdims=True)
        - y * (dy * y).mean(axis=-1, keepdims=True)
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def xavier_init(rows: int, cols: int, rng_seed) -> np.ndarray:
    """Glorot-uniform matrix. ``rng_seed`` may be an int or a ``Generator``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise DimensionError(f"parameters are 2-D, got shape {self.value.shape}")
        for name in ("grad", "m", "v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))

    @property
    def shape(self):
        return self.value.shape


@dataclass
class ParamSet:
    entries: Dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(np.array(value, dtype=np.float64))
        self.entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return [(k, self.entries[k]) for k in sorted(self.entries)]

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad.fill(0.0)

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in self.items())))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.entries.values():
                p.grad *= scale
        return norm

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self.items():
            out.entries[name] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.step)
        return out

    def values_equal(self, other: "ParamSet") -> bool:
        if sorted(self.entries) != sorted(other.entries):
            return False
        return all(np.array_equal(p.value, other[n].value) for n, p in self.items())


def adam_step(params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam applied in place; the same ParamSet is returned."""
    for _, p in params.items():
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def grad_check(loss_fn: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-5,
               analytic: Optional[Dict[str, np.ndarray]] = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``analytic`` defaults to the gradients currently stored in ``params``.
    The loss is evaluated twice at the start point to catch non-determinism.
    """
    if analytic is None:
        analytic = {n: p.grad.copy() for n, p in params.items()}
    f0 = loss_fn(params)
    if loss_fn(params) != f0:
        raise NonDeterministicLossError("loss_fn returned different values for identical parameters")
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params)
            flat[i] = orig - h
            fm = loss_fn(params)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            denom = max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, abs(ana[i] - num) / denom)
    return worst


# Checkpoint layout (little-endian):
#   b"DMGP"  u16 version  u32 n_entries
#   per entry in sorted name order: u16 name_len, utf-8 name, u32 rows, u32 cols
#   then every entry's values as float64, row-major, same order.
CKPT_MAGIC = b"DMGP"
CKPT_VERSION = 1


def checkpoint_bytes(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    names = list(params)
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        rows, cols = params[name].shape
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", rows, cols))
    for name in names:
        buf.write(params[name].value.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def checkpoint_hash(params: ParamSet) -> bytes:
    return hashlib.sha256(checkpoint_bytes(params)).digest()


def save_checkpoint(params: ParamSet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ParamSet:
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> ParamSet:
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    manifest = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        manifest.append((name, rows, cols))
    out = ParamSet()
    for name, rows, cols in manifest:
        size = rows * cols * 8
        if off + size > len(data):
            raise ValueError(f"checkpoint truncated while reading {name!r}")
        out.add(name, np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes after checkpoint payload")
    return out
