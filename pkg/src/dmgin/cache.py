"""Single-file store of per-user evolved group matrices, and serving from it.

The long-term branch does not look at the candidate, so G' can be computed
once per user and reused for every candidate of a request.

File layout, little-endian throughout::

    header   4s   magic b"DMGC"
             u16  version (1)
             u16  reserved (0)
             u32  k
             u32  d_g
             u32  record count
             32s  sha256 of the model checkpoint bytes
    index    count x i64 user ids, strictly ascending
    records  count x fixed-width records, same order as the index:
             i64  user_id
             i64  as_of (request time the features were computed for)
             u32  n_groups (valid groups are packed first)
             u32  reserved (0)
             k x i64        group max timestamps (0 for padding)
             k x d_g x f32  G', row-major

A record therefore takes 24 + 8k + 4k*d_g bytes.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import igiem
from .igiem import EventLog
from .model import Model
from .numeric import checkpoint_bytes

MAGIC = b"DMGC"
VERSION = 1
HEADER = struct.Struct("<4sHHIII32s")
RECORD_HEAD = struct.Struct("<qqII")


class CacheError(ValueError):
    pass


class CacheCorrupt(CacheError):
    pass


class CacheMismatch(CacheError):
    """The cache was built by a different checkpoint or model shape."""


def record_size(k: int, d_g: int) -> int:
    return RECORD_HEAD.size + 8 * k + 4 * k * d_g


def model_hash(model: Model) -> bytes:
    return hashlib.sha256(checkpoint_bytes(model.params)).digest()


@dataclass
class UserLongRepr:
    user_id: int
    as_of: int
    n_groups: int
    grp_ts: np.ndarray
    gp: np.ndarray  # [k, d_g], float64 widened from the stored float32
    checkpoint_hash: bytes

    @property
    def grp_mask(self) -> np.ndarray:
        return np.arange(len(self.grp_ts)) < self.n_groups


@dataclass
class UserHistory:
    user_id: int
    history: EventLog
    as_of: int


@dataclass
class RequestContext:
    now: int
    history: EventLog
    profile: int
    hour: int


def _long_batch(model: Model, users: Sequence[UserHistory], cluster_lut, shape):
    feats = [igiem.featurize(u.history, u.as_of, cluster_lut, shape) for u in users]
    b = igiem.stack_features(feats)
    gp, _ = model.long_forward(b)
    return gp, b["grp_mask"], b["grp_ts"]


def precompute_all(users: Iterable[UserHistory], model: Model, path, cluster_lut: np.ndarray,
                   batch_size: int = 256) -> "CacheFile":
    """Write one record per user, sorted by user id, and return the opened cache.

    Output bytes depend only on (users, model parameters, cluster map).
    """
    users = sorted(users, key=lambda u: u.user_id)
    ids = [u.user_id for u in users]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate user ids in precompute input")
    cfg = model.cfg
    k, d_g = cfg.k, cfg.d_g
    shape = cfg.feature_shape()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, k, d_g, len(users), model_hash(model)))
        fh.write(np.asarray(ids, dtype="<i8").tobytes())
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            gp, gmask, gts = _long_batch(model, chunk, cluster_lut, shape)
            for u, g, m, ts in zip(chunk, gp, gmask, gts):
                fh.write(RECORD_HEAD.pack(u.user_id, u.as_of, int(m.sum()), 0))
                fh.write(np.asarray(ts, dtype="<i8").tobytes())
                fh.write(np.asarray(g, dtype="<f4").tobytes(order="C"))
    os.replace(tmp, path)
    return CacheFile(path)


class CacheFile:
    """Read-only view of a cache file; ``reads`` counts record fetches."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        try:
            self._read_header()
        except Exception:
            self._fh.close()
            raise
        self.reads = 0
        self.misses = 0

    def _read_header(self):
        raw = self._fh.read(HEADER.size)
        if len(raw) != HEADER.size:
            raise CacheCorrupt(f"{self.path}: truncated header")
        magic, version, _, k, d_g, count, digest = HEADER.unpack(raw)
        if magic != MAGIC:
            raise CacheCorrupt(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheCorrupt(f"{self.path}: unsupported version {version}")
        self.k, self.d_g, self.count, self.checkpoint_hash = k, d_g, count, digest
        self.record_size = record_size(k, d_g)
        idx = self._fh.read(8 * count)
        if len(idx) != 8 * count:
            raise CacheCorrupt(f"{self.path}: truncated index")
        self.index = np.frombuffer(idx, dtype="<i8").astype(np.int64)
        if count > 1 and np.any(np.diff(self.index) <= 0):
            raise CacheCorrupt(f"{self.path}: index is not strictly ascending")
        self._records_at = HEADER.size + 8 * count
        expected = self._records_at + count * self.record_size
        actual = os.fstat(self._fh.fileno()).st_size
        if actual != expected:
            raise CacheCorrupt(f"{self.path}: size {actual} bytes, header implies {expected}")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self):
        return self.count

    def check_model(self, model: Model) -> None:
        if (model.cfg.k, model.cfg.d_g) != (self.k, self.d_g):
            raise CacheMismatch(f"cache shape k={self.k}, d_g={self.d_g} does not match the model "
                                f"(k={model.cfg.k}, d_g={model.cfg.d_g})")
        if model_hash(model) != self.checkpoint_hash:
            raise CacheMismatch("cache was built from a different checkpoint; rebuild it with precompute")

    def position(self, user_id: int) -> Optional[int]:
        i = int(np.searchsorted(self.index, user_id))
        if i < self.count and self.index[i] == user_id:
            return i
        return None

    def read_record(self, pos: int) -> UserLongRepr:
        self._fh.seek(self._records_at + pos * self.record_size)
        raw = self._fh.read(self.record_size)
        self.reads += 1
        if len(raw) != self.record_size:
            raise CacheCorrupt(f"{self.path}: record {pos} has {len(raw)} bytes, "
                               f"expected {self.record_size}")
        uid, as_of, n_groups, _ = RECORD_HEAD.unpack_from(raw)
        if uid != self.index[pos]:
            raise CacheCorrupt(f"{self.path}: record {pos} holds user {uid}, "
                               f"index says {self.index[pos]}")
        if n_groups > self.k:
            raise CacheCorrupt(f"{self.path}: record {pos} claims {n_groups} groups > k={self.k}")
        off = RECORD_HEAD.size
        ts = np.frombuffer(raw, dtype="<i8", count=self.k, offset=off).astype(np.int64)
        off += 8 * self.k
        gp = np.frombuffer(raw, dtype="<f4", count=self.k * self.d_g, offset=off)
        return UserLongRepr(uid, as_of, n_groups, ts,
                            gp.astype(np.float64).reshape(self.k, self.d_g), self.checkpoint_hash)

    def lookup(self, user_id: int) -> Optional[UserLongRepr]:
        """The user's record, or None when the user is not cached."""
        pos = self.position(user_id)
        return None if pos is None else self.read_record(pos)

    def describe(self, user_id: Optional[int] = None) -> Dict[str, object]:
        info: Dict[str, object] = {
            "path": str(self.path),
            "magic": MAGIC.decode(),
            "version": VERSION,
            "k": self.k,
            "d_g": self.d_g,
            "count": self.count,
            "record_bytes": self.record_size,
            "checkpoint_sha256": self.checkpoint_hash.hex(),
        }
        if self.count:
            uid = int(self.index[0]) if user_id is None else user_id
            rec = self.lookup(uid)
            if rec is None:
                info["record"] = {"user_id": uid, "absent": True}
            else:
                valid = rec.gp[:rec.n_groups]
                info["record"] = {
                    "user_id": rec.user_id,
                    "as_of": rec.as_of,
                    "n_groups": rec.n_groups,
                    "grp_ts": [int(t) for t in rec.grp_ts[:rec.n_groups]],
                    "gp_norms": [float(x) for x in np.linalg.norm(valid, axis=1)],
                }
        return info


def lookup(cache: CacheFile, user_id: int) -> Optional[UserLongRepr]:
    return cache.lookup(user_id)


def _score(model: Model, gp, grp_mask, candidates, ctx: RequestContext, cluster_lut) -> np.ndarray:
    cand = np.asarray(candidates, dtype=np.int64)
    cand_cl = igiem._clusters_of(cand, cluster_lut)
    short = igiem.short_features(ctx.history, ctx.now, cluster_lut, model.cfg.feature_shape())
    return model.score_candidates(gp, grp_mask, short, cand, cand_cl, ctx.profile, ctx.hour)


def full_predict(model: Model, candidates, ctx: RequestContext, cluster_lut: np.ndarray) -> np.ndarray:
    """Recompute the long branch from raw history, then score every candidate."""
    f = igiem.featurize(ctx.history, ctx.now, cluster_lut, model.cfg.feature_shape())
    b = {key: v[None] for key, v in f.items()}
    gp, _ = model.long_forward(b)
    return _score(model, gp[0], f["grp_mask"], candidates, ctx, cluster_lut)


def serve_predict(cache: CacheFile, user_id: int, candidates, model: Model, ctx: RequestContext,
                  cluster_lut: np.ndarray, verify: bool = True) -> np.ndarray:
    """pCTR per candidate using the cached G' (one record read per call).

    Users missing from the cache fall back to :func:`full_predict`.
    """
    if verify:
        cache.check_model(model)
    rec = cache.lookup(user_id)
    if rec is None:
        cache.misses += 1
        return full_predict(model, candidates, ctx, cluster_lut)
    return _score(model, rec.gp, rec.grp_mask, candidates, ctx, cluster_lut)


def users_from_samples(samples, as_of: Optional[int] = None) -> List[UserHistory]:
    """One entry per user from that user's latest sample.

    ``as_of`` defaults to the latest request time.
    """
    latest: Dict[int, Tuple[int, EventLog]] = {}
    for s in samples:
        if s.user_id not in latest or s.request_time >= latest[s.user_id][0]:
            latest[s.user_id] = (s.request_time, s.history)
    return [UserHistory(uid, hist, t if as_of is None else as_of)
            for uid, (t, hist) in sorted(latest.items())]
