"""Self-supervised parsing of bird's-eye-view road layouts into graphs of road joints."""
from .graph import RoadGraph, TopologyLabel

__version__ = "0.1.0"
__all__ = ["RoadGraph", "TopologyLabel", "__version__"]
