"""Dynamic neural RGB-D SLAM on a sparse voxel embedding grid."""

from .config import Config, load_config
from .pipeline import RunResult, run

__version__ = "0.1.0"
__all__ = ["Config", "load_config", "run", "RunResult", "__version__"]
