"""Deterministic synthetic scene generator.

Produces paired high/low-resolution 4-band (G, R, NIR, SWIR) rasters
from a linear mixture of material signatures over smoothly varying
abundance fields. The shipped signature table is constructed so the SWIR
column is an exact affine function of (G, R, NIR); convex mixing and
block averaging both preserve affine relations, so the learnable mapping
is identical at every resolution and the synthesis task is well posed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster_io import Manifest, Raster, ToaBlock

__all__ = [
    "SceneConfig",
    "ScenePair",
    "generate_scene",
    "downsample_area",
    "default_endmembers",
    "make_endmembers",
    "swir_affine_residual",
    "DEFAULT_BAND_NAMES",
    "DEFAULT_WAVELENGTHS_UM",
]

DEFAULT_BAND_NAMES = ["G", "R", "NIR", "SWIR"]
DEFAULT_WAVELENGTHS_UM = [[0.52, 0.59], [0.62, 0.68], [0.77, 0.86], [1.55, 1.70]]

# Illustrative top-of-atmosphere constants carried on generated scenes so
# the reflectance conversion has something to work from. Saturation
# radiance in W m^-2 sr^-1 um^-1, solar irradiance in W m^-2 um^-1.
DEFAULT_TOA = ToaBlock(
    l_sat=[52.0, 47.0, 31.5, 7.5],
    esun=[1853.0, 1581.0, 1114.0, 240.0],
    sun_elevation_deg=48.0,
    doy=60,
)

# Five material signatures (G, R, NIR, SWIR) in 10-bit DN. The SWIR
# column equals 0.20*G + 0.35*R + 0.30*NIR + 10 exactly for every row;
# pairwise L2 separation is >= 100 DN.
_ENDMEMBER_CLASSES = ["water", "vegetation", "land", "sand", "urban"]
_ENDMEMBERS = np.array(
    [
        [300, 220, 80, 171],
        [350, 280, 820, 424],
        [420, 480, 560, 430],
        [650, 700, 750, 610],
        [520, 540, 510, 456],
    ],
    dtype=np.float64,
)
_SWIR_COEF = np.array([0.20, 0.35, 0.30])
_SWIR_OFFSET = 10.0

# Exponent applied to the blurred noise fields before convex
# normalization; pushes abundances toward one-hot so scenes contain both
# homogeneous material regions and mixed boundaries.
_SHARPNESS = 6.0


@dataclass
class SceneConfig:
    hr_size: tuple = (512, 512)
    num_materials: int = 5
    endmembers: np.ndarray | None = None
    abundance_smoothness: float = 8.0
    noise_sigma: float = 2.0
    scale_factor: int = 4
    seed: int = 0

    def resolved_endmembers(self) -> np.ndarray:
        if self.endmembers is not None:
            return np.asarray(self.endmembers, dtype=np.float64)
        return make_endmembers(self.num_materials, self.seed)

    def validate(self) -> None:
        m, n = self.hr_size
        if self.num_materials < 2:
            raise ValueError("num_materials must be >= 2")
        if self.scale_factor < 2:
            raise ValueError("scale_factor must be >= 2")
        if m % self.scale_factor or n % self.scale_factor:
            raise ValueError(
                f"scale_factor {self.scale_factor} must divide hr_size {self.hr_size}"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        e = self.resolved_endmembers()
        if e.shape != (self.num_materials, 4):
            raise ValueError(f"endmembers must be ({self.num_materials}, 4), got {e.shape}")
        if e.min() < 0 or e.max() > 1023:
            raise ValueError("endmember DN values must lie in [0, 1023]")


@dataclass
class ScenePair:
    hr: Raster
    lr: Raster
    provenance: SceneConfig = field(repr=False, default=None)


def default_endmembers() -> np.ndarray:
    """The built-in 5-class signature table (water, vegetation, land,
    sand, urban), one (G, R, NIR, SWIR) row per class."""
    return _ENDMEMBERS.copy()


def make_endmembers(k: int, seed: int = 0) -> np.ndarray:
    """A K-row signature table; rows beyond the built-in five are drawn
    deterministically with the same affine SWIR relation so the mapping
    stays exactly learnable."""
    if k <= len(_ENDMEMBERS):
        return _ENDMEMBERS[:k].copy()
    rng = np.random.default_rng(seed)
    extra = []
    for _ in range(k - len(_ENDMEMBERS)):
        grn = rng.uniform(100, 900, size=3)
        swir = float(np.clip(grn @ _SWIR_COEF + _SWIR_OFFSET, 0, 1023))
        extra.append(np.round([*grn, swir]))
    return np.vstack([_ENDMEMBERS, np.array(extra, dtype=np.float64)])


def swir_affine_residual(endmembers: np.ndarray) -> float:
    """Max |residual| of the best affine fit SWIR ~ (G, R, NIR).

    Zero (up to rounding) means SWIR is an exact function of the other
    bands on every convex mixture, i.e. the synthesis task is well posed.
    Also requires the (G, R, NIR, 1) design matrix to have full rank so
    the fit is unique.
    """
    e = np.asarray(endmembers, dtype=np.float64)
    design = np.column_stack([e[:, :3], np.ones(len(e))])
    if np.linalg.matrix_rank(design) < 4:
        raise ValueError("endmember (G, R, NIR) projections are affinely degenerate")
    coef, *_ = np.linalg.lstsq(design, e[:, 3], rcond=None)
    return float(np.abs(design @ coef - e[:, 3]).max())


def _abundance_fields(rng, k: int, shape, smoothness: float) -> np.ndarray:
    """K convex abundance fields from blurred, sharpened seeded noise."""
    fields = rng.random((k, *shape))
    if smoothness > 0:
        for i in range(k):
            fields[i] = ndimage.gaussian_filter(fields[i], sigma=smoothness, mode="reflect")
    # rescale each field to [0, 1] before sharpening so contrast survives
    lo = fields.min(axis=(1, 2), keepdims=True)
    hi = fields.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    fields = ((fields - lo) / span) ** _SHARPNESS
    total = fields.sum(axis=0) + 1e-12
    return fields / total


def mix_bands(abundances: np.ndarray, endmembers: np.ndarray) -> np.ndarray:
    """Linear mixing: (K, m, n) abundances x (K, 4) signatures -> (m, n, 4)."""
    return np.tensordot(abundances, np.asarray(endmembers, dtype=np.float64), axes=(0, 0))


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0, 1023)).astype(np.uint16)


def _scene_manifest(height: int, width: int) -> Manifest:
    return Manifest(
        width=width,
        height=height,
        bands=4,
        band_names=list(DEFAULT_BAND_NAMES),
        bit_depth=10,
        wavelengths_um=[list(w) for w in DEFAULT_WAVELENGTHS_UM],
        toa=DEFAULT_TOA,
    )


def generate_scene(cfg: SceneConfig) -> ScenePair:
    """Generate the paired HR/LR rasters for a configuration.

    Procedure (fully deterministic under ``cfg.seed``): draw K abundance
    fields from smoothed seeded noise and normalize them to a convex
    combination per pixel; mix the signature table through them; add
    Gaussian DN noise; quantize; block-average down to the LR raster.
    """
    cfg.validate()
    m, n = cfg.hr_size
    endmembers = cfg.resolved_endmembers()
    rng = np.random.default_rng(cfg.seed)

    alpha = _abundance_fields(rng, cfg.num_materials, (m, n), cfg.abundance_smoothness)
    bands = mix_bands(alpha, endmembers)
    if cfg.noise_sigma > 0:
        bands = bands + rng.normal(0.0, cfg.noise_sigma, size=bands.shape)

    hr_data = _quantize(bands).transpose(2, 0, 1)
    hr = Raster(data=hr_data, meta=_scene_manifest(m, n))
    lr = downsample_area(hr, cfg.scale_factor)
    return ScenePair(hr=hr, lr=lr, provenance=cfg)


def downsample_area(r: Raster, s: int) -> Raster:
    """Area (block-mean) downsampling by an integer factor.

    Each output pixel is the arithmetic mean of its s x s block, rounded
    half-to-even. s=1 returns an identical copy.
    """
    if s < 1:
        raise ValueError("scale factor must be >= 1")
    if s == 1:
        return Raster(data=r.data.copy(), meta=r.meta.replace())
    b, h, w = r.data.shape
    if h % s or w % s:
        raise ValueError(f"scale factor {s} does not divide raster dims {h}x{w}")
    blocks = r.data.reshape(b, h // s, s, w // s, s).astype(np.float64)
    means = blocks.mean(axis=(2, 4))
    data = np.rint(means).astype(np.uint16)
    meta = r.meta.replace(width=w // s, height=h // s)
    return Raster(data=data, meta=meta)
