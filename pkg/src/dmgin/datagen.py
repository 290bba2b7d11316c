"""Synthetic lifelong behaviour data with a planted, recoverable interest signal.

World model
-----------
* Entities (shops) belong to one of ``n_archetypes`` semantic archetypes. Each
  has a latent vector (archetype centre + noise) observed through two noisy
  random projections: the "text" and "image" features used for contrastive
  pretraining.
* Each user engages with ``archetypes_per_user`` archetypes through a small
  Zipf-weighted pool of entities per archetype, so a long history touches few
  distinct entities.
* One of the user's archetypes is the *top* archetype. A candidate drawn from
  it is clicked with probability ``p_hi``; any other candidate with ``p_lo``.

How the top archetype shows up in the history depends on ``signal``:

``"evolution"``
    Every archetype gets the same event volume and the same overall mix of
    behaviour types. Only the joint of behaviour type and recency differs: the
    top archetype's recent events are mostly strong-interest/payment actions
    and its old events mostly browsing; the other archetypes are the reverse.
    Group statistics carry no signal; the within-group interaction does.
``"volume"``
    The top archetype receives ``volume_boost`` times more events and all
    behaviour types follow one neutral mix.

Events in the request window (the last days, from which the short-term
sequence is cut) use the neutral mix over all of the user's archetypes when
``long_horizon`` is set, so the top archetype can only be read from older
history. A lead window of ``lead_days`` before the first request is neutral
too, which keeps the signal out of the short-term sequence.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .igiem import BEHAVIOR_TYPES, EventLog, behavior_index

DAY = 86400
T0 = 1_600_000_000
# behaviour-type mixes over BEHAVIOR_TYPES order:
# click, add-to-cart, add-to-favorite, browse-dishes, view-comments, order, dismiss
STRONG_MIX = (0.05, 0.30, 0.15, 0.02, 0.02, 0.45, 0.01)
WEAK_MIX = (0.40, 0.02, 0.01, 0.27, 0.27, 0.02, 0.01)
NEUTRAL_MIX = tuple((a + b) / 2 for a, b in zip(STRONG_MIX, WEAK_MIX))
SAMPLE_FIELDS = ("user_id", "request_time", "candidate", "label", "profile", "hour",
                 "history", "short")
LOG_FIELDS = ("item", "btype", "ts", "loc", "price")
EVENT_FIELDS = ("item_id", "behavior_type", "timestamp", "location_id", "price")


@dataclass
class GenConfig:
    n_users: int = 1000
    n_entities: int = 300
    n_archetypes: int = 50
    events_per_user: Tuple[int, int] = (60, 90)
    archetypes_per_user: int = 3
    pool_per_archetype: int = 6
    repeat_concentration: float = 1.1
    signal: str = "evolution"
    volume_boost: float = 2.0
    long_horizon: bool = True
    p_hi: float = 0.8
    p_lo: float = 0.1
    top_candidate_frac: float = 0.5
    history_days: int = 730
    recent_days: int = 60
    request_days: int = 10
    lead_days: int = 5
    request_events_per_day: float = 3.0
    train_requests_per_user: int = 8
    test_requests_per_user: int = 2
    n_locations: int = 64
    n_profiles: int = 8
    d_lat: int = 16
    d_txt: int = 24
    d_img: int = 32
    archetype_scale: float = 3.0
    entity_noise: float = 0.1
    modality_noise: float = 0.05
    n_short: int = 10
    seed: int = 0

    def __post_init__(self):
        self.events_per_user = tuple(self.events_per_user)
        if self.n_entities < self.n_archetypes:
            raise ValueError("n_entities must be >= n_archetypes")
        if self.archetypes_per_user > self.n_archetypes or self.archetypes_per_user < 2:
            raise ValueError("archetypes_per_user must be in [2, n_archetypes]")
        if min(self.n_users, self.n_archetypes, self.events_per_user[0], self.pool_per_archetype) <= 0:
            raise ValueError("counts must be positive")
        if self.events_per_user[0] > self.events_per_user[1]:
            raise ValueError("events_per_user range is inverted")
        if self.signal not in ("evolution", "volume"):
            raise ValueError(f"unknown signal {self.signal!r}")
        if not 0 <= self.p_lo <= 1 or not 0 <= self.p_hi <= 1:
            raise ValueError("click probabilities must lie in [0, 1]")

    @property
    def request_start(self) -> int:
        return T0 + (self.history_days + self.recent_days) * DAY

    @property
    def test_start(self) -> int:
        return self.request_start + (self.request_days - 1) * DAY

    @property
    def end_time(self) -> int:
        return self.request_start + self.request_days * DAY


@dataclass
class Entities:
    archetype: np.ndarray
    latent: np.ndarray
    text: np.ndarray
    image: np.ndarray

    def __len__(self):
        return len(self.archetype)


@dataclass
class User:
    user_id: int
    profile: int
    archetypes: List[int]
    top: int
    pools: Dict[int, np.ndarray]
    log: EventLog


@dataclass
class Sample:
    user_id: int
    request_time: int
    candidate: int
    label: int
    profile: int
    hour: int
    history: EventLog
    n_short: int = 10

    @property
    def short(self) -> EventLog:
        start = max(0, len(self.history) - self.n_short)
        return EventLog(*(getattr(self.history, f)[start:] for f in LOG_FIELDS))


@dataclass
class Dataset:
    config: GenConfig
    entities: Entities
    users: List[User]
    train: List[Sample]
    test: List[Sample]
    bayes_auc: float = field(default=0.0)


def bayes_auc(p_hi: float, p_lo: float, q: float) -> float:
    """AUC of the oracle score that knows whether a candidate is top-archetype."""
    pos_hi, pos_lo = q * p_hi, (1 - q) * p_lo
    neg_hi, neg_lo = q * (1 - p_hi), (1 - q) * (1 - p_lo)
    P, N = pos_hi + pos_lo, neg_hi + neg_lo
    if P == 0 or N == 0:
        raise ValueError("degenerate label rule: one class is impossible")
    ph, pl, nh, nl = pos_hi / P, pos_lo / P, neg_hi / N, neg_lo / N
    if p_hi < p_lo:
        ph, pl, nh, nl = pl, ph, nl, nh
    return ph * nl + 0.5 * (ph * nh + pl * nl)


def make_entities(cfg: GenConfig, rng: np.random.Generator) -> Entities:
    centres = rng.normal(0.0, 1.0, (cfg.n_archetypes, cfg.d_lat))
    centres *= cfg.archetype_scale / np.linalg.norm(centres, axis=1, keepdims=True)
    arche = np.arange(cfg.n_entities) % cfg.n_archetypes
    latent = centres[arche] + rng.normal(0.0, cfg.entity_noise, (cfg.n_entities, cfg.d_lat))
    mt = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_lat), (cfg.d_lat, cfg.d_txt))
    mi = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_lat), (cfg.d_lat, cfg.d_img))
    text = latent @ mt + rng.normal(0.0, cfg.modality_noise, (cfg.n_entities, cfg.d_txt))
    image = latent @ mi + rng.normal(0.0, cfg.modality_noise, (cfg.n_entities, cfg.d_img))
    return Entities(arche, latent, text, image)


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


def _draw_types(rng, mix, n) -> np.ndarray:
    return rng.choice(len(BEHAVIOR_TYPES), size=n, p=np.asarray(mix) / np.sum(mix)) + 1


def make_user(cfg: GenConfig, uid: int, ents: Entities, rng: np.random.Generator) -> User:
    arches = [int(a) for a in rng.choice(cfg.n_archetypes, cfg.archetypes_per_user, replace=False)]
    top = arches[0]
    pools = {}
    for a in arches:
        members = np.flatnonzero(ents.archetype == a)
        pools[a] = rng.choice(members, size=min(cfg.pool_per_archetype, len(members)), replace=False)
    zipf = _zipf_weights(cfg.pool_per_archetype, cfg.repeat_concentration)
    n_events = int(rng.integers(cfg.events_per_user[0], cfg.events_per_user[1] + 1))
    arch_w = np.ones(len(arches))
    if cfg.signal == "volume":
        arch_w[0] = cfg.volume_boost
    arch_w /= arch_w.sum()

    recent_start = T0 + cfg.history_days * DAY
    lead_start = cfg.request_start - cfg.lead_days * DAY
    n_recent = n_events // 2
    ts_old = rng.integers(T0, recent_start, n_events - n_recent)
    ts_recent = rng.integers(recent_start, lead_start, n_recent)
    n_lead = int(rng.poisson(cfg.request_events_per_day * (cfg.lead_days + cfg.request_days)))
    ts_lead = rng.integers(lead_start, cfg.end_time, n_lead)
    even = np.full(len(arches), 1.0 / len(arches))

    def fill(ts, phase):
        w = even if phase == "neutral" else arch_w
        which = rng.choice(len(arches), size=len(ts), p=w)
        item = np.empty(len(ts), np.int64)
        btype = np.empty(len(ts), np.int64)
        for j, a in enumerate(arches):
            sel = np.flatnonzero(which == j)
            pool = pools[a]
            item[sel] = pool[rng.choice(len(pool), size=len(sel), p=zipf[:len(pool)] / zipf[:len(pool)].sum())]
            if cfg.signal == "volume" or phase == "neutral":
                mix = NEUTRAL_MIX
            elif (a == top) == (phase == "recent"):
                mix = STRONG_MIX
            else:
                mix = WEAK_MIX
            btype[sel] = _draw_types(rng, mix, len(sel))
        return item, btype

    lead_phase = "neutral" if cfg.long_horizon else "recent"
    parts = [(ts_old, *fill(ts_old, "old")), (ts_recent, *fill(ts_recent, "recent")),
             (ts_lead, *fill(ts_lead, lead_phase))]
    ts = np.concatenate([p[0] for p in parts]).astype(np.int64)
    item = np.concatenate([p[1] for p in parts])
    btype = np.concatenate([p[2] for p in parts])
    # location is context noise; per-user home locations would fingerprint users
    loc = rng.integers(1, cfg.n_locations, len(ts)).astype(np.int64)
    price = np.where(btype == behavior_index("order"),
                     np.round(rng.lognormal(3.0, 0.5, len(ts)), 2), 0.0)
    order = np.argsort(ts, kind="stable")
    log = EventLog(item[order], btype[order], ts[order], loc[order], price[order])
    return User(uid, int(rng.integers(0, cfg.n_profiles)), arches, top, pools, log)


def _requests(cfg: GenConfig, user: User, rng, n: int, lo: int, hi: int) -> List[Sample]:
    out = []
    others = np.concatenate([user.pools[a] for a in user.archetypes if a != user.top])
    for t in np.sort(rng.integers(lo, hi, n)):
        is_top = rng.random() < cfg.top_candidate_frac
        cand = int(rng.choice(user.pools[user.top]) if is_top else rng.choice(others))
        label = int(rng.random() < (cfg.p_hi if is_top else cfg.p_lo))
        hist = user.log.before(int(t))
        out.append(Sample(user.user_id, int(t), cand, label, user.profile,
                          int((t // 3600) % 24), hist, cfg.n_short))
    return out


def simulate(cfg: GenConfig) -> Dataset:
    """Build the whole synthetic world in memory; deterministic in ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    ents = make_entities(cfg, rng)
    users, train, test = [], [], []
    for uid in range(cfg.n_users):
        u = make_user(cfg, uid, ents, rng)
        users.append(u)
        train += _requests(cfg, u, rng, cfg.train_requests_per_user, cfg.request_start, cfg.test_start)
        test += _requests(cfg, u, rng, cfg.test_requests_per_user, cfg.test_start, cfg.end_time)
    train.sort(key=lambda s: (s.request_time, s.user_id))
    test.sort(key=lambda s: (s.request_time, s.user_id))
    ds = Dataset(cfg, ents, users, train, test,
                 bayes_auc(cfg.p_hi, cfg.p_lo, cfg.top_candidate_frac))
    check_dataset(ds)
    return ds


def check_dataset(ds: Dataset) -> None:
    """Generation-time sanity: temporal split, referential integrity, compression."""
    if ds.train and ds.test:
        if min(s.request_time for s in ds.test) <= max(s.request_time for s in ds.train):
            raise AssertionError("train/test split is not strictly temporal")
    n_ent = len(ds.entities)
    for u in ds.users:
        if len(u.log) and (u.log.item.min() < 0 or u.log.item.max() >= n_ent):
            raise AssertionError(f"user {u.user_id} references an unknown entity")
        distinct = len(np.unique(u.log.item))
        if len(u.log) >= 100 and distinct * 3 > len(u.log):
            raise AssertionError(f"user {u.user_id}: {distinct} distinct entities over "
                                 f"{len(u.log)} events; history is not repetitive")


# ---------------------------------------------------------------------------
# files


def _events_json(log: EventLog) -> list:
    return [[int(i), BEHAVIOR_TYPES[int(b) - 1], int(t), int(l), float(p)]
            for i, b, t, l, p in zip(log.item, log.btype, log.ts, log.loc, log.price)]


def sample_to_json(s: Sample) -> str:
    rec = {
        "user_id": s.user_id,
        "request_time": s.request_time,
        "candidate": s.candidate,
        "label": s.label,
        "profile": s.profile,
        "hour": s.hour,
        "history": _events_json(s.history),
        "short": _events_json(s.short),
    }
    return json.dumps(rec, separators=(",", ":"))


def _log_from_json(rows, where) -> EventLog:
    cols = [[], [], [], [], []]
    for r in rows:
        if not isinstance(r, list) or len(r) != len(EVENT_FIELDS):
            raise ValueError(f"{where}: event must be a {len(EVENT_FIELDS)}-element array")
        item, btype, ts, loc, price = r
        b = behavior_index(btype)
        if b == 0:
            raise ValueError(f"{where}: unknown behavior_type {btype!r}")
        if not isinstance(ts, int) or ts <= 0 or price < 0:
            raise ValueError(f"{where}: bad timestamp or price in {r!r}")
        for c, v in zip(cols, (item, b, ts, loc, price)):
            c.append(v)
    return EventLog(np.array(cols[0], np.int64), np.array(cols[1], np.int64),
                    np.array(cols[2], np.int64), np.array(cols[3], np.int64),
                    np.array(cols[4], np.float64))


def sample_from_json(line: str, where: str = "<line>", n_short: int = 10) -> Sample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{where}: malformed JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ValueError(f"{where}: expected a JSON object")
    if set(rec) != set(SAMPLE_FIELDS):
        missing = sorted(set(SAMPLE_FIELDS) - set(rec))
        extra = sorted(set(rec) - set(SAMPLE_FIELDS))
        raise ValueError(f"{where}: schema mismatch (missing {missing}, unexpected {extra})")
    if rec["label"] not in (0, 1):
        raise ValueError(f"{where}: label must be 0 or 1")
    hist = _log_from_json(rec["history"], where)
    if len(hist) and hist.ts.max() >= rec["request_time"]:
        raise ValueError(f"{where}: history event at or after request_time")
    if len(hist) and np.any(np.diff(hist.ts) < 0):
        raise ValueError(f"{where}: history is not time-ascending")
    s = Sample(rec["user_id"], rec["request_time"], rec["candidate"], rec["label"],
               rec["profile"], rec["hour"], hist, n_short)
    if _events_json(s.short) != rec["short"]:
        raise ValueError(f"{where}: short sequence is not the last {n_short} history events")
    return s


def load_dataset(path, n_short: int = 10) -> Iterator[Sample]:
    """Stream samples from a JSONL file; schema errors carry ``path:line``."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise ValueError(f"{path}:{lineno}: truncated line (no newline)")
            yield sample_from_json(line, f"{path}:{lineno}", n_short)


def write_samples(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s))
            fh.write("\n")


def write_entities(ents: Entities, path) -> None:
    """``entity_id<TAB>text,features<TAB>image,features`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ents)):
            t = ",".join(repr(float(x)) for x in ents.text[i])
            im = ",".join(repr(float(x)) for x in ents.image[i])
            fh.write(f"{i}\t{t}\t{im}\n")


def read_entities(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, text, image = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            ids.append(int(parts[0]))
            text.append([float(x) for x in parts[1].split(",")])
            image.append([float(x) for x in parts[2].split(",")])
    return np.array(ids), np.array(text), np.array(image)


def write_ground_truth(ds: Dataset, path) -> None:
    cfg = ds.config
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bayes_auc,p_hi,p_lo,seed\n")
        fh.write(f"{ds.bayes_auc!r},{cfg.p_hi!r},{cfg.p_lo!r},{cfg.seed}\n")


def read_ground_truth(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        values = fh.readline().strip().split(",")
    out = dict(zip(header, values))
    return {"bayes_auc": float(out["bayes_auc"]), "p_hi": float(out["p_hi"]),
            "p_lo": float(out["p_lo"]), "seed": int(out["seed"])}


def generate_dataset(cfg: GenConfig, out_dir) -> Dict[str, Path]:
    """Write train/test JSONL, the entity pair file, archetype labels and ground truth."""
    return write_dataset(simulate(cfg), out_dir)


def write_dataset(ds: Dataset, out_dir) -> Dict[str, Path]:
    cfg = ds.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "entities": out / "entities.tsv",
        "archetypes": out / "archetypes.tsv",
        "ground_truth": out / "ground_truth.csv",
        "gen_config": out / "gen_config.json",
    }
    write_samples(ds.train, paths["train"])
    write_samples(ds.test, paths["test"])
    write_entities(ds.entities, paths["entities"])
    with open(paths["archetypes"], "w", encoding="utf-8") as fh:
        for i, a in enumerate(ds.entities.archetype):
            fh.write(f"{i}\t{int(a)}\n")
    write_ground_truth(ds, paths["ground_truth"])
    paths["gen_config"].write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return paths
