"""Tile decomposition, per-patch prediction, and seamless reassembly.

Patches are cropped on a row-major grid with 50% (d/2) overlap and the
final anchor of each axis clamped to the tile edge. Adjacent patches are
feathered with Gaussian weights across the overlap - horizontally into
strips first, then the strips vertically - so per-patch predictions
assemble into a tile with no blocky seams. A naive (overlap-free)
stitcher and a bicubic upsampler are included as comparison baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MAX_DN, SwirNet, forward
from .raster_io import Manifest, Raster
from .tensor import no_grad

__all__ = [
    "PatchGrid",
    "FeatherWeights",
    "build_grid",
    "build_naive_grid",
    "gaussian_weights",
    "feather_weights",
    "feather_pair",
    "stitch",
    "stitch_raw",
    "naive_stitch",
    "synthesize_tile",
    "upsample_bicubic",
]

SWIR_SYNTH_WAVELENGTH_UM = [1.55, 1.70]


@dataclass
class PatchGrid:
    """Row-major anchors of overlapping d x d patches over an m x n tile."""

    height: int
    width: int
    d: int
    row_anchors: np.ndarray
    col_anchors: np.ndarray

    def __len__(self) -> int:
        return len(self.row_anchors) * len(self.col_anchors)

    def anchors(self):
        """Yield (row, col) anchors in row-major order."""
        for r in self.row_anchors:
            for c in self.col_anchors:
                yield int(r), int(c)


@dataclass
class FeatherWeights:
    """Blend weights across a d/2-wide overlap; omega[0] == 1 and the
    complement is exactly 1 - omega."""

    omega: np.ndarray

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.omega


def _axis_anchors(extent: int, d: int) -> np.ndarray:
    if extent < d:
        raise ValueError(f"tile extent {extent} smaller than patch size {d}")
    step = d // 2
    anchors = []
    a = 0
    while a + d < extent:
        anchors.append(a)
        a += step
    final = extent - d
    if not anchors or anchors[-1] != final:
        anchors.append(final)
    return np.asarray(anchors, dtype=np.int64)


def build_grid(m: int, n: int, d: int) -> PatchGrid:
    """Anchors 0, d/2, 2*(d/2), ... with the final anchor clamped to the
    edge (duplicates collapsed). Requires even d and a tile >= d."""
    if d < 2 or d % 2:
        raise ValueError(f"patch size must be even and >= 2, got {d}")
    return PatchGrid(m, n, d, _axis_anchors(m, d), _axis_anchors(n, d))


def build_naive_grid(m: int, n: int, d: int) -> PatchGrid:
    """Zero-overlap tiling at stride d, final anchor clamped to the edge."""
    if d < 1:
        raise ValueError("patch size must be positive")
    if m < d or n < d:
        raise ValueError(f"tile {m}x{n} smaller than patch size {d}")

    def axis(extent):
        anchors = list(range(0, extent - d + 1, d))
        if anchors[-1] != extent - d:
            anchors.append(extent - d)
        return np.asarray(anchors, dtype=np.int64)

    return PatchGrid(m, n, d, axis(m), axis(n))


def gaussian_weights(d: int, sigma: float | None = None) -> FeatherWeights:
    """Gaussian blend profile over the d/2 overlap columns:
    omega[k] = exp(-k^2 / (2 sigma^2)) with sigma = d/4 by default."""
    if d < 2 or d % 2:
        raise ValueError(f"patch size must be even and >= 2, got {d}")
    if sigma is None:
        sigma = d / 4.0
    k = np.arange(d // 2, dtype=np.float64)
    return FeatherWeights(np.exp(-(k**2) / (2.0 * sigma * sigma)))


def feather_weights(d: int, profile: str = "gaussian") -> FeatherWeights:
    """Blend profiles for the stitch-mode comparison. All profiles start
    at exactly 1 and decrease across the overlap; Gaussian is the
    default, linear and sigmoid are alternatives for contrast studies."""
    if profile == "gaussian":
        return gaussian_weights(d)
    k = np.arange(d // 2, dtype=np.float64)
    if profile == "linear":
        return FeatherWeights(1.0 - k / (d / 2.0))
    if profile == "sigmoid":
        raw = 1.0 / (1.0 + np.exp((k - d / 4.0) / (d / 16.0)))
        return FeatherWeights(raw / raw[0])
    raise ValueError(f"unknown feather profile {profile!r}")


def feather_pair(left: np.ndarray, right: np.ndarray,
                 weights: FeatherWeights) -> np.ndarray:
    """Blend two d x d patches that overlap by d/2 columns into a
    d x (3d/2) panel.

    Left-exclusive columns come from the left patch; across the overlap
    the left patch fades out along omega while the right patch fades in
    along 1 - omega (its first column enters at weight 0); the remaining
    columns come from the right patch.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 2 or left.shape[0] != left.shape[1]:
        raise ValueError(f"feather_pair needs equal square patches, got {left.shape} vs {right.shape}")
    d = left.shape[0]
    half = d // 2
    if weights.omega.shape != (half,):
        raise ValueError(f"weights length {weights.omega.shape} != overlap width {half}")
    out = np.empty((d, d + half), dtype=np.float64)
    out[:, :half] = left[:, :half]
    w = weights.omega
    # right + (left - right) * w == left*w + right*(1-w), but exact when
    # the operands agree, so consistent patches reconstruct bit-exactly
    out[:, half:d] = right[:, :half] + (left[:, half:] - right[:, :half]) * w
    out[:, d:] = right[:, half:]
    return out


def _blend_axis(pieces, anchors, extent: int, d: int, omega: np.ndarray,
                axis: int) -> np.ndarray:
    """Assemble equal-thickness pieces along ``axis`` with feathering.

    Regular anchors (gap d/2) blend across the d/2 overlap. A clamped
    final anchor (gap < d/2) overwrites the irregular region created by
    the clamp - width equal to the clamp shift - and blends only the
    regular d/2 window, per the edge-replacement rule.
    """
    half = d // 2
    first = np.asarray(pieces[0], dtype=np.float64)
    shape = list(first.shape)
    shape[axis] = extent
    out = np.zeros(shape, dtype=np.float64)

    def seg(arr, lo, hi):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(lo, hi)
        return arr[tuple(sl)]

    wshape = [1] * first.ndim
    wshape[axis] = half
    w = omega.reshape(wshape)

    seg(out, 0, d)[...] = first
    for i in range(1, len(anchors)):
        a, a_prev = int(anchors[i]), int(anchors[i - 1])
        piece = np.asarray(pieces[i], dtype=np.float64)
        end_prev = a_prev + d
        if a == a_prev + half:
            incoming = seg(piece, 0, half)
            seg(out, a, end_prev)[...] = (
                incoming + (seg(out, a, end_prev) - incoming) * w
            )
            seg(out, end_prev, a + d)[...] = seg(piece, half, d)
        else:
            a_reg = a_prev + half  # where an unclamped anchor would sit
            shift = a_reg - a
            seg(out, a, a_reg)[...] = seg(piece, 0, shift)
            incoming = seg(piece, shift, shift + half)
            seg(out, a_reg, end_prev)[...] = (
                incoming + (seg(out, a_reg, end_prev) - incoming) * w
            )
            seg(out, end_prev, a + d)[...] = seg(piece, shift + half, d)
    return out


def _quantize_band(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0, MAX_DN)).astype(np.uint16)


def stitch_raw(patches, grid: PatchGrid, weights: FeatherWeights | None = None) -> np.ndarray:
    """Feather-blend row-major d x d patches into an m x n float64 band.

    Horizontal strips are feathered first, then blended vertically the
    same way. No clamping or rounding: this is the pre-quantization
    surface.
    """
    n_rows, n_cols = len(grid.row_anchors), len(grid.col_anchors)
    if len(patches) != n_rows * n_cols:
        raise ValueError(f"got {len(patches)} patches for a {n_rows}x{n_cols} grid")
    d = grid.d
    for p in patches:
        if np.asarray(p).shape[:2] != (d, d):
            raise ValueError(f"every patch must be {d}x{d}, got {np.asarray(p).shape}")
    if weights is None:
        weights = gaussian_weights(d)

    strips = []
    for r in range(n_rows):
        row_patches = [np.asarray(patches[r * n_cols + c], dtype=np.float64).reshape(d, d)
                       for c in range(n_cols)]
        strips.append(_blend_axis(row_patches, grid.col_anchors, grid.width, d,
                                  weights.omega, axis=1))
    return _blend_axis(strips, grid.row_anchors, grid.height, d, weights.omega, axis=0)


def stitch(patches, grid: PatchGrid, weights: FeatherWeights | None = None) -> np.ndarray:
    """stitch_raw clamped to [0, 1023] and rounded half-to-even to DN."""
    return _quantize_band(stitch_raw(patches, grid, weights))


def naive_stitch(patches, grid: PatchGrid) -> np.ndarray:
    """Place patches without blending (comparison mode). The grid must
    tile the band completely; a coverage gap is an error."""
    n_rows, n_cols = len(grid.row_anchors), len(grid.col_anchors)
    if len(patches) != n_rows * n_cols:
        raise ValueError(f"got {len(patches)} patches for a {n_rows}x{n_cols} grid")
    d = grid.d
    covered_rows = np.zeros(grid.height, dtype=bool)
    covered_cols = np.zeros(grid.width, dtype=bool)
    for a in grid.row_anchors:
        covered_rows[a : a + d] = True
    for a in grid.col_anchors:
        covered_cols[a : a + d] = True
    if not (covered_rows.all() and covered_cols.all()):
        raise ValueError("naive grid leaves a coverage gap")

    out = np.zeros((grid.height, grid.width), dtype=np.float64)
    idx = 0
    for r in grid.row_anchors:
        for c in grid.col_anchors:
            patch = np.asarray(patches[idx], dtype=np.float64).reshape(d, d)
            out[r : r + d, c : c + d] = patch
            idx += 1
    return _quantize_band(out)


def synthesize_tile(model: SwirNet, tile: Raster, d: int = 32,
                    profile: str = "gaussian", batch_size: int = 64) -> Raster:
    """Predict every grid patch of a 3-band (G, R, NIR) tile and stitch
    the raw predictions into a single synthesized-SWIR raster.

    ``profile`` selects the feather weights, or ``"naive"`` for the
    blocky comparison mode. Patch prediction is batched; the stitched
    output inherits the tile geometry with band name ``SWIR_synth``.
    """
    tile.validate()
    if tile.meta.bands != 3:
        raise ValueError(f"synthesize_tile expects exactly 3 bands, got {tile.meta.bands}")
    m, n = tile.meta.height, tile.meta.width
    naive = profile == "naive"
    grid = build_naive_grid(m, n, d) if naive else build_grid(m, n, d)

    hwc = tile.data.transpose(1, 2, 0).astype(np.float32)
    anchors = list(grid.anchors())
    crops = np.stack([hwc[r : r + d, c : c + d, :] for r, c in anchors])
    preds = np.empty((len(anchors), d, d), dtype=np.float64)
    with no_grad():
        for i in range(0, len(anchors), batch_size):
            out = forward(model, crops[i : i + batch_size])
            preds[i : i + len(out.data)] = out.data[..., 0]

    if naive:
        band = naive_stitch(list(preds), grid)
    else:
        band = stitch(list(preds), grid, feather_weights(d, profile))

    meta = Manifest(
        width=n,
        height=m,
        bands=1,
        band_names=["SWIR_synth"],
        bit_depth=10,
        wavelengths_um=[list(SWIR_SYNTH_WAVELENGTH_UM)],
    )
    return Raster(data=band[None, ...], meta=meta)


def _catmull_rom_matrix(out_len: int, in_len: int, s: float) -> np.ndarray:
    """Row-stochastic sampling matrix for one axis of Catmull-Rom
    (a = -0.5) interpolation with edge-clamped taps and pixel-center
    alignment."""
    a = -0.5
    rows = np.zeros((out_len, in_len), dtype=np.float64)
    for j in range(out_len):
        x = (j + 0.5) / s - 0.5
        base = int(np.floor(x))
        t = x - base
        # kernel weights at offsets -1, 0, 1, 2
        t2, t3 = t * t, t * t * t
        wts = (
            a * (t3 - 2 * t2 + t),
            (a + 2) * t3 - (a + 3) * t2 + 1,
            -(a + 2) * t3 + (2 * a + 3) * t2 - a * t,
            a * (t2 - t3),
        )
        for off, wt in zip((-1, 0, 1, 2), wts):
            src = min(max(base + off, 0), in_len - 1)
            rows[j, src] += wt
    return rows


def upsample_bicubic(band: np.ndarray, s: float) -> np.ndarray:
    """Catmull-Rom bicubic upsampling of a single band by factor s >= 1,
    clamped at the edges, output quantized back to DN."""
    if s < 1:
        raise ValueError(f"upsample factor must be >= 1, got {s}")
    band = np.asarray(band)
    h, w = band.shape
    out_h, out_w = int(round(h * s)), int(round(w * s))
    ry = _catmull_rom_matrix(out_h, h, s)
    rx = _catmull_rom_matrix(out_w, w, s)
    values = ry @ band.astype(np.float64) @ rx.T
    return _quantize_band(values)
