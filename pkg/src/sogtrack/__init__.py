"""Hand-object pose tracking with sum-of-Gaussians alignment."""

from .config import Config
from .geometry import Camera, Pose
from .tracking import Sequence, Trajectory, load_sequence, run_eval, run_tracking

__all__ = ["Camera", "Config", "Pose", "Sequence", "Trajectory", "load_sequence", "run_eval", "run_tracking"]
__version__ = "0.1.0"
