"""Command line entry point.

Every verb works inside ``$DMGIN_RUN_ROOT/<run.name>/`` (default root
``./runs``) and writes its own subdirectory named after the verb, holding
``config.resolved``, ``<verb>.log``, ``metrics.csv`` and ``report.json``.
Upstream artifacts are read from the sibling directories of earlier verbs.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 invariant
violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import cache, cmrlm, datagen, idecm, igiem, trainer
from .config import ConfigError, RunConfig, as_sections, load_config, parse_value
from .model import Model, ModelConfig
from .numeric import load_checkpoint, save_checkpoint

log = logging.getLogger("dmgin")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INVARIANT = 0, 2, 3, 4
RUN_ROOT_ENV = "DMGIN_RUN_ROOT"
VERBS = ("gen-data", "pretrain", "cluster", "train", "eval", "ablate", "depth-sweep",
         "precompute", "serve-eval", "cache-inspect")


class DependencyError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directory helpers


class Run:
    def __init__(self, cfg: RunConfig, verb: str, root: Optional[str] = None):
        self.cfg = cfg
        self.verb = verb
        base = Path(root or os.environ.get(RUN_ROOT_ENV) or "runs")
        self.workspace = base / cfg.run.name
        self.dir = self.workspace / verb
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.resolved").write_text(cfg.to_ini(), encoding="utf-8")

    def upstream(self, verb: str, name: str) -> Path:
        p = self.workspace / verb / name
        if not p.exists():
            raise DependencyError(f"missing {p}; run `dmgin {verb}` for run '{self.cfg.run.name}' first")
        return p

    def write_csv(self, header: Sequence[str], rows, name: str = "metrics.csv") -> Path:
        path = self.dir / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        return path

    def write_report(self, payload: dict) -> Path:
        body = {
            "verb": self.verb,
            "config": _jsonable(as_sections(self.cfg)),
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        body.update(_jsonable(payload))
        path = self.dir / "report.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, bytes):
        return x.hex()
    return x


def _setup_logging(run: Run, verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run.dir / f"{run.verb}.log", mode="w", encoding="utf-8")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    root.addHandler(fh)
    root.addHandler(sh)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ---------------------------------------------------------------------------
# artifact loading


def _load_samples(run: Run, split: str) -> List[datagen.Sample]:
    path = run.upstream("gen-data", f"{split}.jsonl")
    try:
        return list(datagen.load_dataset(path, run.cfg.experiment.n_short))
    except ValueError as exc:
        raise InvariantViolation(str(exc)) from None


def _gen_config(run: Run) -> datagen.GenConfig:
    raw = json.loads(run.upstream("gen-data", "gen_config.json").read_text())
    return datagen.GenConfig(**raw)


def _n_entities(run: Run) -> int:
    ids, _, _ = datagen.read_entities(run.upstream("gen-data", "entities.tsv"))
    return len(ids)


def _cluster_lut(run: Run, n_items: int) -> np.ndarray:
    mapping = idecm.read_cluster_map(run.upstream("cluster", "cluster_map.tsv"))
    lut = np.full(n_items, igiem.UNKNOWN_CLUSTER, dtype=np.int64)
    for e, c in mapping.items():
        if 0 <= e < n_items:
            lut[e] = c
    return lut


def _cat_lut(cfg: RunConfig) -> Optional[np.ndarray]:
    if not cfg.run.category_map:
        return None
    try:
        return igiem.category_lookup(igiem.load_category_map(cfg.run.category_map))
    except OSError as exc:
        raise ConfigError(f"[run] category_map: {exc}") from None


def _prepared(run: Run) -> trainer.Prepared:
    gen = _gen_config(run)
    n_items = _n_entities(run)
    lut = _cluster_lut(run, n_items)
    bayes = datagen.read_ground_truth(run.upstream("gen-data", "ground_truth.csv"))["bayes_auc"]
    t0 = time.perf_counter()
    prep = trainer.prepare_samples(_load_samples(run, "train"), _load_samples(run, "test"), lut,
                                   run.cfg.experiment, n_items, gen.n_profiles, gen.n_locations,
                                   bayes, _cat_lut(run.cfg))
    log.info("featurized %d train / %d test samples in %.1fs", len(prep.train["label"]),
             len(prep.test["label"]), time.perf_counter() - t0)
    return prep


def _load_model(run: Run) -> Model:
    raw = json.loads(run.upstream("train", "model_config.json").read_text())
    params = load_checkpoint(run.upstream("train", "model.ckpt"))
    return Model(ModelConfig(**raw), params=params)


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(run: Run, args) -> None:
    t0 = time.perf_counter()
    try:
        ds = datagen.simulate(run.cfg.data)
    except AssertionError as exc:
        raise InvariantViolation(str(exc)) from None
    paths = datagen.write_dataset(ds, run.dir)
    events = np.array([len(u.log) for u in ds.users])
    distinct = np.array([len(np.unique(u.log.item)) for u in ds.users])
    labels = np.array([s.label for s in ds.train + ds.test])
    summary = [
        ("n_users", len(ds.users)),
        ("n_entities", len(ds.entities)),
        ("n_train", len(ds.train)),
        ("n_test", len(ds.test)),
        ("positive_rate", float(labels.mean())),
        ("mean_events_per_user", float(events.mean())),
        ("mean_distinct_entities_per_user", float(distinct.mean())),
        ("bayes_auc", ds.bayes_auc),
    ]
    run.write_csv(("metric", "value"), summary)
    run.write_report({"summary": dict(summary), "files": {k: str(v) for k, v in paths.items()},
                      "seconds": time.perf_counter() - t0})


def cmd_pretrain(run: Run, args) -> None:
    e = run.cfg.experiment
    ids, text, image = datagen.read_entities(run.upstream("gen-data", "entities.tsv"))
    pairs = [cmrlm.ModalityPair(int(i), t, im) for i, t, im in zip(ids, text, image)]
    pcfg = cmrlm.PretrainConfig(epochs=e.pretrain_epochs, lr=e.pretrain_lr)
    t0 = time.perf_counter()
    try:
        res = cmrlm.pretrain(pairs, pcfg, seed=e.seed)
    except FloatingPointError as exc:
        raise InvariantViolation(str(exc)) from None
    save_checkpoint(res.tower.params, run.dir / "tower.ckpt")
    emb = cmrlm.embed_entities(res.tower, pairs)
    cmrlm.write_embeddings(ids, emb, run.dir / "embeddings.tsv")
    report = cmrlm.alignment_report(res.tower, pairs)
    run.write_csv(("epoch", "loss"), enumerate(res.losses, 1))
    run.write_report({"alignment": report, "temperature": res.tower.temperature,
                      "seconds": time.perf_counter() - t0})
    log.info("pretrain: matched cos %.3f, mismatched %.3f, top-1 %.3f", report["matched_cos"],
             report["mismatched_cos"], report["top1"])


def cmd_cluster(run: Run, args) -> None:
    e = run.cfg.experiment
    ids, emb = cmrlm.read_embeddings(run.upstream("pretrain", "embeddings.tsv"))
    t0 = time.perf_counter()
    try:
        model = idecm.kmeans_fit(emb, e.n_clusters, seed=e.seed, entity_ids=ids)
    except ValueError as exc:
        raise ConfigError(f"clustering: {exc}") from None
    if any(b > a + 1e-9 * max(abs(a), 1.0) for a, b in zip(model.inertia_history, model.inertia_history[1:])):
        raise InvariantViolation("k-means inertia increased between iterations")
    idecm.write_cluster_map(model, run.dir / "cluster_map.tsv")
    idecm.save_centroids(model, run.dir / "centroids.ckpt")
    idecm.export_projection(emb, model.labels, run.dir / "projection.csv", entity_ids=ids)
    bal = idecm.balance_report(model)
    if bal.imbalanced:
        log.warning("cluster sizes are imbalanced: max %d vs mean %.1f", bal.max_size, bal.mean_size)
    lut = model.cluster_of_item(int(ids.max()) + 1)
    histories = {}
    for s in _load_samples(run, "train") + _load_samples(run, "test"):
        prev = histories.get(s.user_id)
        if prev is None or len(s.history) > len(prev):
            histories[s.user_id] = s.history
    rows, hist = igiem.grouping_diagnostics(histories, lut)
    run.write_csv(("user_id", "n_events", "n_groups"), rows, "grouping_per_user.csv")
    run.write_csv(("bin_lo", "bin_hi", "users_raw", "users_grouped"), hist, "grouping_histogram.csv")
    run.write_csv(("iteration", "inertia"), enumerate(model.inertia_history, 1))
    ratio = [r[1] / max(r[2], 1) for r in rows]
    run.write_report({
        "balance": {k: v for k, v in asdict(bal).items() if k != "sizes"},
        "sizes": bal.sizes,
        "n_iter": model.n_iter,
        "inertia": model.inertia,
        "mean_compression_ratio": float(np.mean(ratio)) if ratio else 0.0,
        "seconds": time.perf_counter() - t0,
    })


def _metrics_rows(report: trainer.MetricsReport):
    return [(i, l, a, g) for i, (l, a, g) in
            enumerate(zip(report.losses, report.epoch_auc, report.epoch_gauc), 1)]


def cmd_train(run: Run, args) -> None:
    prep = _prepared(run)
    e = run.cfg.experiment
    mcfg = e.model_config(prep.n_items, n_profiles=prep.n_profiles, n_locations=prep.n_locations)
    model = Model(mcfg, seed=e.seed)
    try:
        report = trainer.train(model, prep.train, prep.test, e)
    except trainer.TrainingDiverged as exc:
        (run.dir / "last_good.ckpt").write_bytes(exc.last_good)
        raise InvariantViolation(f"{exc}; last good checkpoint saved") from None
    save_checkpoint(model.params, run.dir / "model.ckpt")
    (run.dir / "model_config.json").write_text(json.dumps(mcfg.to_dict(), indent=2, sort_keys=True) + "\n")
    run.write_csv(("epoch", "loss", "auc", "gauc"), _metrics_rows(report))
    run.write_report({"final": {"auc": report.auc, "gauc": report.gauc},
                      "bayes_auc": prep.bayes_auc, "epoch_seconds": report.epoch_seconds,
                      "n_params": model.params.n_scalars()})
    log.info("train: auc %.4f gauc %.4f (bayes %.4f)", report.auc, report.gauc, prep.bayes_auc)


def cmd_eval(run: Run, args) -> None:
    model = _load_model(run)
    prep = _prepared(run)
    rows = []
    for split in ("train", "test"):
        a, g = trainer.evaluate(model, getattr(prep, split))
        rows.append((split, a, g))
    run.write_csv(("split", "auc", "gauc"), rows)
    run.write_report({"splits": {r[0]: {"auc": r[1], "gauc": r[2]} for r in rows},
                      "bayes_auc": prep.bayes_auc,
                      "auc_over_bayes": rows[1][1] / prep.bayes_auc})


def _seed_table(prep, variants: Dict[str, trainer.ExperimentConfig], seeds) -> List[tuple]:
    out = []
    for name, cfg in variants.items():
        for s in seeds:
            _, rep = trainer.run(prep, replace(cfg, seed=s))
            log.info("%s seed %d: auc %.4f gauc %.4f", name, s, rep.auc, rep.gauc)
            out.append((name, s, rep.auc, rep.gauc))
    return out


def _summarise(per_seed: List[tuple], names) -> List[tuple]:
    rows = []
    for name in names:
        auc = [r[2] for r in per_seed if r[0] == name]
        gauc = [r[3] for r in per_seed if r[0] == name]
        rows.append((name, *trainer.mean_std(auc), *trainer.mean_std(gauc)))
    return rows


def cmd_ablate(run: Run, args) -> None:
    prep = _prepared(run)
    base = replace(run.cfg.experiment, kind="dmgin")
    variants = {name: replace(base, **flags) for name, flags in trainer.ABLATIONS.items()}
    per_seed = _seed_table(prep, variants, run.cfg.run.seeds)
    rows = _summarise(per_seed, variants)
    run.write_csv(("variant", "seed", "auc", "gauc"), per_seed, "per_seed.csv")
    run.write_csv(("variant", "auc_mean", "auc_std", "gauc_mean", "gauc_std"), rows)
    run.write_report({"summary": {r[0]: {"auc_mean": r[1], "auc_std": r[2], "gauc_mean": r[3],
                                         "gauc_std": r[4]} for r in rows},
                      "seeds": list(run.cfg.run.seeds)})


def cmd_depth_sweep(run: Run, args) -> None:
    layers = run.cfg.run.layers
    if args.layers:
        layers = parse_value(args.layers, (1,), "--layers")
        if not layers or min(layers) < 1:
            raise ConfigError("--layers must name positive depths, e.g. 1..4")
    prep = _prepared(run)
    base = replace(run.cfg.experiment, kind="dmgin")
    variants = {n: replace(base, n_layers=n) for n in layers}
    per_seed = _seed_table(prep, variants, run.cfg.run.seeds)
    summary = _summarise(per_seed, variants)
    run.write_csv(("layers", "seed", "auc", "gauc"), per_seed, "per_seed.csv")
    run.write_csv(("layers", "auc", "gauc"), [(r[0], r[1], r[3]) for r in summary])
    run.write_report({"summary": {str(r[0]): {"auc_mean": r[1], "auc_std": r[2], "gauc_mean": r[3],
                                              "gauc_std": r[4]} for r in summary},
                      "seeds": list(run.cfg.run.seeds)})


def _serving_users(run: Run) -> List[cache.UserHistory]:
    return cache.users_from_samples(_load_samples(run, "test"))


def cmd_precompute(run: Run, args) -> None:
    model = _load_model(run)
    lut = _cluster_lut(run, model.cfg.n_items)
    users = _serving_users(run)
    t0 = time.perf_counter()
    cf = cache.precompute_all(users, model, run.dir / "cache.bin", lut)
    seconds = time.perf_counter() - t0
    info = cf.describe()
    cf.close()
    run.write_csv(("metric", "value"), [("users", info["count"]), ("record_bytes", info["record_bytes"]),
                                        ("file_bytes", (run.dir / "cache.bin").stat().st_size)])
    run.write_report({"header": {k: v for k, v in info.items() if k != "record"}, "seconds": seconds})


def cmd_serve_eval(run: Run, args) -> None:
    model = _load_model(run)
    lut = _cluster_lut(run, model.cfg.n_items)
    users = _serving_users(run)
    try:
        cf = cache.CacheFile(run.upstream("precompute", "cache.bin"))
        cf.check_model(model)
    except cache.CacheMismatch as exc:
        raise DependencyError(f"{exc}") from None
    except cache.CacheCorrupt as exc:
        raise InvariantViolation(str(exc)) from None
    rng = np.random.default_rng(run.cfg.experiment.seed)
    n_cand = run.cfg.run.n_candidates
    worst = 0.0
    for u in users:
        ctx = cache.RequestContext(u.as_of, u.history, 0, int((u.as_of // 3600) % 24))
        cands = rng.integers(0, model.cfg.n_items, size=8)
        got = cache.serve_predict(cf, u.user_id, cands, model, ctx, lut, verify=False)
        ref = cache.full_predict(model, cands, ctx, lut)
        worst = max(worst, float(np.abs(got - ref).max()))
    # timed comparison on one request with many candidates
    u = max(users, key=lambda x: len(x.history))
    ctx = cache.RequestContext(u.as_of, u.history, 0, int((u.as_of // 3600) % 24))
    cands = rng.integers(0, model.cfg.n_items, size=n_cand)
    reads0 = cf.reads
    cache.serve_predict(cf, u.user_id, cands, model, ctx, lut)
    reads = cf.reads - reads0
    t_cached = _median_time(lambda: cache.serve_predict(cf, u.user_id, cands, model, ctx, lut))
    t_full = _median_time(lambda: cache.full_predict(model, cands, ctx, lut))
    cf.close()
    run.write_csv(("metric", "value"), [("users_checked", len(users)), ("max_abs_pctr_diff", worst),
                                        ("reads_per_request", reads)])
    run.write_report({"max_abs_pctr_diff": worst, "reads_per_request": reads,
                      "candidates": n_cand, "history_events": len(u.history),
                      "cached_seconds": t_cached, "full_seconds": t_full,
                      "speed_ratio": t_cached / t_full})
    log.info("serve-eval: max diff %.2e, cached/full time %.3f", worst, t_cached / t_full)
    if worst > 1e-5:
        raise InvariantViolation(f"cached and full predictions differ by {worst:.3g} > 1e-5")
    if reads != 1:
        raise InvariantViolation(f"expected one cache read per request, saw {reads}")


def _median_time(fn, repeats: int = 15) -> float:
    ts = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def cmd_cache_inspect(run: Run, args) -> None:
    path = Path(args.path) if args.path else run.upstream("precompute", "cache.bin")
    try:
        with cache.CacheFile(path) as cf:
            info = cf.describe(args.user)
    except cache.CacheCorrupt as exc:
        raise InvariantViolation(str(exc)) from None
    print(json.dumps(info, indent=2))
    run.write_csv(("field", "value"), [(k, v) for k, v in info.items() if k != "record"])
    run.write_report({"inspect": info})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "depth-sweep": cmd_depth_sweep,
    "precompute": cmd_precompute,
    "serve-eval": cmd_serve_eval,
    "cache-inspect": cmd_cache_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmgin", description="Grouped lifelong-sequence CTR pipeline.")
    p.add_argument("--config", help="ini file with [data], [experiment], [run] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--run-root", help=f"run directory root (default ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        if verb == "depth-sweep":
            sp.add_argument("--layers", help="depths, e.g. 1..4 or 1,2,3")
        if verb == "cache-inspect":
            sp.add_argument("--user", type=int, help="user id to dump (default: first record)")
            sp.add_argument("--path", help="cache file (default: this run's precompute output)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        run = Run(cfg, args.verb, args.run_root)
        _setup_logging(run, args.verbose)
        COMMANDS[args.verb](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
