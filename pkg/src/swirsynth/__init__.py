"""swirsynth: SWIR band synthesis from co-registered G/R/NIR bands.

Train a fully convolutional residual network on low-resolution 4-band
tiles, apply it to high-resolution bands, and stitch per-patch
predictions into seamless tiles with Gaussian feathering. Includes a
deterministic synthetic scene generator, a quality-metric suite, and a
DN to top-of-atmosphere reflectance conversion.
"""

__version__ = "0.1.0"

from .model import ModelConfig, SwirNet, build_model, count_layers, count_parameters
from .raster_io import Checkpoint, Manifest, Raster, read_raster, write_raster

__all__ = [
    "ModelConfig",
    "SwirNet",
    "build_model",
    "count_layers",
    "count_parameters",
    "Checkpoint",
    "Manifest",
    "Raster",
    "read_raster",
    "write_raster",
    "__version__",
]
