"""Portal-respecting approximation schemes for TSP and Steiner tree in hyperbolic space."""
from .hgeom import HPoint, hyp_distance

__version__ = "0.1.0"
__all__ = ["HPoint", "hyp_distance", "__version__"]
