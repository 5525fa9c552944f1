"""Parameter-efficient adaptation of frozen vision transformers to spectral imagery."""

from .aomoa import AoMoA
from .are_adapter import AreAdapter
from .hypert import HyperT
from .model import SpectralX, Variant, build, count_parameters
from .pipeline import RunConfig, run_stage1, run_stage2, run_stage3
from .profiles import DESK, FULL, get_profile

__all__ = ["AoMoA", "AreAdapter", "HyperT", "SpectralX", "Variant", "build", "count_parameters",
           "RunConfig", "run_stage1", "run_stage2", "run_stage3", "DESK", "FULL", "get_profile"]
__version__ = "0.1.0"
