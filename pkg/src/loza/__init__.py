"""Layer-wise streaming sparse attention: model, calibration, decode runtime and cost model."""

from .attention import SparsePattern
from .model import Blended, Full, Model, ModelConfig, Sparse, build_model, forward

__all__ = ["SparsePattern", "ModelConfig", "Model", "Full", "Sparse", "Blended", "build_model", "forward"]
__version__ = "0.1.0"
