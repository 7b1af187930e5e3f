"""Observable dictionary learning for field estimation from sparse sensors."""

from .matio import ModelBundle, __version__, load_matrix, save_matrix
from .observation import NoiseSpec, ObservationOperator, apply_noise, observe, point_restriction

__all__ = [
    "ModelBundle",
    "NoiseSpec",
    "ObservationOperator",
    "__version__",
    "apply_noise",
    "load_matrix",
    "observe",
    "point_restriction",
    "save_matrix",
]
