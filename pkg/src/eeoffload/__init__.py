"""Early-exit CNN inference split between an edge device and a cloud server,
with distortion-specific expert branches selected by a spectrum classifier."""
from .distortion import BLUR_LEVELS, KINDS, NOISE_LEVELS, DistortionSpec, Kind
from .model import BranchRecord, EarlyExitModel, ExitTaken, InferenceResult

__version__ = "0.1.0"

__all__ = [
    "BLUR_LEVELS", "KINDS", "NOISE_LEVELS", "BranchRecord", "DistortionSpec",
    "EarlyExitModel", "ExitTaken", "InferenceResult", "Kind", "__version__",
]
