"""Muon vs AdamW grokking experiments on small algorithmic tasks, built on a numpy autodiff core."""
from .activations import VARIANTS, sparsemax, stablemax, softmax, variant_loss
from .datasets import TASKS, TaskSpec, generate, split
from .errors import AnalysisError, ConfigError, ContractError, DimensionError, GrokMuonError, NumericFault
from .model import ModelConfig, forward, init_params
from .optim import AdamWConfig, MuonConfig, make_optimizer, newton_schulz_orthogonalize
from .stats import summarize, welch_t_test
from .trainer import RunConfig, RunResult, detect_grok, run_experiment

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "TASKS", "AdamWConfig", "AnalysisError", "ConfigError", "ContractError", "DimensionError",
    "GrokMuonError", "ModelConfig", "MuonConfig", "NumericFault", "RunConfig", "RunResult", "TaskSpec",
    "detect_grok", "forward", "generate", "init_params", "make_optimizer", "newton_schulz_orthogonalize",
    "run_experiment", "softmax", "sparsemax", "split", "stablemax", "summarize", "variant_loss", "welch_t_test",
]
