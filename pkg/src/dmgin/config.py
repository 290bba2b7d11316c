"""Run configuration: one ini file with [data], [experiment] and [run] sections.

Values are parsed by the type of the corresponding dataclass default, unknown
sections or keys are rejected, and ``section.key=value`` overrides from the
command line win over the file.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, Optional, Tuple

from .datagen import GenConfig
from .trainer import ExperimentConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    name: str = "desk"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    layers: Tuple[int, ...] = (1, 2, 3)
    n_candidates: int = 1024
    category_map: str = ""


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = ("data", "experiment", "run")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, default, where: str):
    s = text.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {s!r}")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            parts = [p for p in s.replace(",", " ").split() if p]
            if ".." in s and len(parts) == 1:
                lo, hi = s.split("..")
                return tuple(range(int(lo), int(hi) + 1))
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        return s
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _apply(cfg: RunConfig, section: str, key: str, text: str, where: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}] (expected one of {', '.join(SECTIONS)})")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    value = parse_value(text, getattr(obj, key), where)
    try:
        new = replace(obj, **{key: value})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return replace(cfg, **{section: new})


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keys are case-sensitive field names
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, text in cp.items(section):
                cfg = _apply(cfg, section, key, text, f"{path} [{section}] {key}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, text = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg = _apply(cfg, section, key, text, f"override {lhs.strip()}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    e = cfg.experiment
    for name in ("d_field", "d_stat", "n_heads", "d_h", "n_layers", "hidden", "k", "max_per_group",
                 "n_short", "n_clusters", "batch_size", "pretrain_epochs"):
        if getattr(e, name) <= 0:
            raise ConfigError(f"[experiment] {name} must be positive")
    if e.epochs < 0 or e.lr < 0:
        raise ConfigError("[experiment] epochs and lr must be non-negative")
    if (4 * e.d_field) % e.n_heads:
        raise ConfigError("[experiment] n_heads must divide the event width 4*d_field")
    if e.n_clusters > cfg.data.n_entities:
        raise ConfigError("[experiment] n_clusters exceeds [data] n_entities")
    if e.n_short != cfg.data.n_short:
        raise ConfigError("[experiment] n_short and [data] n_short must agree")
    if e.kind not in ("dmgin", "pooled"):
        raise ConfigError(f"[experiment] kind must be dmgin or pooled, got {e.kind!r}")
    if not cfg.run.seeds or not cfg.run.layers or min(cfg.run.layers) < 1:
        raise ConfigError("[run] seeds and layers must be non-empty; layers >= 1")
    if cfg.run.n_candidates < 1:
        raise ConfigError("[run] n_candidates must be positive")


def as_sections(cfg: RunConfig) -> Dict[str, Dict[str, object]]:
    return {s: {f.name: getattr(getattr(cfg, s), f.name) for f in fields(getattr(cfg, s))}
            for s in SECTIONS}
