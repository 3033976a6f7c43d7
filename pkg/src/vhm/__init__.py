"""Vegetation height regression from four-band satellite scenes with a self-contained autodiff network."""

from .model import Model, ModelConfig, build, tiny_config
from .raster import GridSpec, Raster, read_raster, write_raster

__all__ = ["GridSpec", "Model", "ModelConfig", "Raster", "build", "read_raster", "tiny_config", "write_raster"]
__version__ = "0.1.0"
