"""Fluid-antenna port prediction toolkit."""

__version__ = "0.1.0"

from ._backend import USE_NUMBA
from .geometry import ArrayGeometry, PathSet, PortGrid
from .model import ModelConfig, PortLLM
from .scenario import ChannelDataset, ScenarioConfig

__all__ = ["ArrayGeometry", "ChannelDataset", "ModelConfig", "PathSet", "PortGrid", "PortLLM",
           "ScenarioConfig", "USE_NUMBA", "__version__"]
