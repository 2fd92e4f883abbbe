"""BiLSTM intra/inter-attention NLI model with placeable dropout, built on a numpy autodiff engine.

Training lives in :mod:`dropnet.train`; it is not re-exported here so the
submodule name stays unshadowed.
"""
from .model import PLACEMENTS, SITES, ModelConfig, NLIModel, placement_for_model

__version__ = "0.1.0"

__all__ = ["PLACEMENTS", "SITES", "ModelConfig", "NLIModel", "placement_for_model"]
