"""Grouped lifelong behaviour sequences for CTR prediction, in numpy."""
from .cache import CacheFile, full_predict, precompute_all, serve_predict
from .config import ConfigError, RunConfig, load_config
from .datagen import GenConfig, simulate
from .model import Model, ModelConfig
from .trainer import ExperimentConfig, auc, gauc

__version__ = "0.1.0"
