"""Masked image modeling with per-position patch codebooks for face representation learning."""

from .core import RunConfig, load_config
from .pretrain import AblationSpec, build_state, load_state, run_pretraining

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "AblationSpec", "build_state", "load_state", "run_pretraining"]
