"""Safe model-based control: learned stochastic dynamics, Lipschitz-bounded
barrier networks, and a barrier-constrained sampling MPC, with simulated
planar robots and a LiDAR safety sensor."""

from .streams import RandomStream

__all__ = ["RandomStream"]
__version__ = "0.1.0"
