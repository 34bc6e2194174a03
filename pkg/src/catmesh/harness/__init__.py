"""Synthetic data, training, evaluation, checkpoints and the command line."""
from .config import ConfigError, RunConfig, load_config, parse_config, preset
from .evaluate import evaluate, param_l1, predict
from .gradcheck import gradcheck
from .train import NumericalError, train

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "preset", "evaluate", "param_l1",
           "predict", "gradcheck", "NumericalError", "train"]
