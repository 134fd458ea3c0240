"""Quality metrics and the reflectance conversion.

Everything operates on raw DN values without normalization: RMSE/MAE in
DN counts, PSNR against the 10-bit peak, SRE and per-band SAM, the
+/-5-DN tolerance fraction, patch-variance histograms over the standard
50%-overlap grid, per-class spectral sampling, and the DN -> top-of-
atmosphere reflectance conversion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .mosaic import build_grid

__all__ = [
    "MetricsReport",
    "ToaConstants",
    "MetricError",
    "rmse",
    "mae",
    "ssim",
    "psnr",
    "sre",
    "sam",
    "sam_per_pixel",
    "tolerance_fraction",
    "patch_variance_histogram",
    "spectral_response_sample",
    "earth_sun_distance_au",
    "toa_reflectance",
    "metrics_report",
    "report_to_text",
    "report_to_json",
    "histogram_to_csv",
]

PEAK_DN = 1023.0


class MetricError(ValueError):
    """Metric undefined for these inputs (e.g. PSNR of identical bands)."""


@dataclass
class ToaConstants:
    """Single-band constants for the reflectance conversion.

    ``l_sat``: saturation radiance (W m^-2 sr^-1 um^-1), the radiance a
    full-scale DN maps to. ``esun``: exo-atmospheric solar irradiance
    (W m^-2 um^-1). Sun elevation in degrees, day-of-year in [1, 366].
    """

    l_sat: float
    esun: float
    sun_elevation_deg: float
    doy: int

    def validate(self) -> None:
        if self.l_sat <= 0:
            raise ValueError("l_sat must be positive")
        if self.esun <= 0:
            raise ValueError("esun must be positive")
        if not 0 < self.sun_elevation_deg <= 90:
            raise ValueError("sun_elevation_deg must lie in (0, 90]")
        if not 1 <= self.doy <= 366:
            raise ValueError("doy must lie in [1, 366]")


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    ssim: float
    psnr_db: float | None
    sre_db: float | None
    sam_deg: float
    tolerance_fraction: float
    tolerance_dn: float
    histogram_edges: np.ndarray
    histogram_ref: np.ndarray
    histogram_test: np.ndarray


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.size == 0:
        raise ValueError("empty input")
    return x.reshape(-1), x_hat.reshape(-1)


def rmse(x, x_hat) -> float:
    """Root-mean-square error over flattened pixels, raw DN units."""
    a, b = _pair(x, x_hat)
    return float(np.sqrt(np.mean(np.square(a - b))))


def mae(x, x_hat) -> float:
    a, b = _pair(x, x_hat)
    return float(np.mean(np.abs(a - b)))


def _window_sums(img: np.ndarray, win: int) -> np.ndarray:
    """Sum over every win x win window (valid placement) via an integral
    image in float64."""
    ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=ii[1:, 1:])
    return ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win]


def ssim(x, x_hat, peak: float = PEAK_DN, window: int = 8,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over sliding uniform windows.

    8x8 window, stride 1, valid placement; C1 = (k1*peak)^2 and
    C2 = (k2*peak)^2 with the 10-bit peak. Window statistics use the
    population convention.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim != 2:
        raise ValueError(f"ssim expects 2-d bands, got shape {x.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than {window}x{window} window")

    n = window * window
    mu_x = _window_sums(x, window) / n
    mu_y = _window_sums(x_hat, window) / n
    var_x = _window_sums(x * x, window) / n - mu_x**2
    var_y = _window_sums(x_hat * x_hat, window) / n - mu_y**2
    cov = _window_sums(x * x_hat, window) / n - mu_x * mu_y

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


def psnr(x, x_hat, peak: float = PEAK_DN) -> float:
    """20*log10(peak / rmse); undefined for identical inputs."""
    err = rmse(x, x_hat)
    if err == 0:
        raise MetricError("PSNR is undefined for identical inputs")
    return float(20.0 * math.log10(peak / err))


def sre(x, x_hat) -> float:
    """Signal-to-reconstruction error, 10*log10(mean(x)^2 / MSE), in dB."""
    a, b = _pair(x, x_hat)
    mu = float(a.mean())
    if mu == 0:
        raise MetricError("SRE is undefined for a zero-mean reference")
    mse = float(np.mean(np.square(a - b)))
    if mse == 0:
        raise MetricError("SRE is undefined for identical inputs")
    return float(10.0 * math.log10(mu * mu / mse))


def sam(x, x_hat) -> float:
    """Spectral angle between the two flattened band vectors, degrees."""
    a, b = _pair(x, x_hat)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        raise MetricError("SAM is undefined for a zero vector")
    cosine = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def sam_per_pixel(cube, cube_hat) -> float:
    """Secondary mode: mean over pixels of the angle between per-pixel
    spectra. Inputs are (bands, H, W); zero spectra are skipped."""
    a = np.asarray(cube, dtype=np.float64).reshape(len(cube), -1)
    b = np.asarray(cube_hat, dtype=np.float64).reshape(len(cube_hat), -1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise MetricError("SAM is undefined: all spectra are zero")
    cosine = np.clip((a[:, ok] * b[:, ok]).sum(axis=0) / (na[ok] * nb[ok]), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)).mean())


def tolerance_fraction(x, x_hat, tol: float = 5.0) -> float:
    """Fraction of pixels with |x - x_hat| <= tol (boundary inclusive)."""
    a, b = _pair(x, x_hat)
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    return float(np.mean(np.abs(a - b) <= tol))


def patch_variances(band, d: int = 32) -> np.ndarray:
    """Population variance of every patch on the standard 50%-overlap
    grid, row-major."""
    band = np.asarray(band, dtype=np.float64)
    grid = build_grid(band.shape[0], band.shape[1], d)
    return np.array([band[r : r + d, c : c + d].var() for r, c in grid.anchors()])


def patch_variance_histogram(band, d: int = 32, bins: int = 64,
                             edges: np.ndarray | None = None):
    """Histogram of per-patch variances; returns (edges, counts).

    Bin edges default to ``bins`` uniform bins over [0, max variance];
    pass ``edges`` to histogram against a shared axis.
    """
    variances = patch_variances(band, d)
    if edges is None:
        top = float(variances.max())
        edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts, _ = np.histogram(variances, bins=edges)
    return edges, counts


def spectral_response_sample(raster, pixels, band_indices=None) -> np.ndarray:
    """Mean DN per requested band over a pixel list of (row, col)."""
    if len(pixels) == 0:
        raise ValueError("pixel list must be non-empty")
    if band_indices is None:
        band_indices = range(raster.meta.bands)
    h, w = raster.meta.height, raster.meta.width
    for r, c in pixels:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"pixel ({r}, {c}) out of bounds for {h}x{w} raster")
    rows = np.array([p[0] for p in pixels])
    cols = np.array([p[1] for p in pixels])
    return np.array(
        [raster.band(int(b))[rows, cols].astype(np.float64).mean() for b in band_indices]
    )


def earth_sun_distance_au(doy: int) -> float:
    """First-order eccentricity model: 1 - 0.01672*cos(0.9856*(doy-4) deg)."""
    return 1.0 - 0.01672 * math.cos(math.radians(0.9856 * (doy - 4)))


def toa_reflectance(band, c: ToaConstants, bit_depth: int = 10,
                    distance_au: float | None = None) -> np.ndarray:
    """Convert a DN band to top-of-atmosphere reflectance.

    Radiance L = (DN / (2^bit_depth - 1)) * l_sat, then
    rho = pi * L * d^2 / (esun * sin(elevation)); sin of elevation is the
    cosine of the solar zenith. ``distance_au`` overrides the day-of-year
    distance model when given.
    """
    c.validate()
    max_dn = float(2**bit_depth - 1)
    d_au = earth_sun_distance_au(c.doy) if distance_au is None else float(distance_au)
    radiance = np.asarray(band, dtype=np.float64) / max_dn * c.l_sat
    return (
        math.pi * radiance * d_au * d_au
        / (c.esun * math.sin(math.radians(c.sun_elevation_deg)))
    )


def metrics_report(x, x_hat, tol: float = 5.0, patch: int = 32,
                   bins: int = 64) -> MetricsReport:
    """Bundle every scalar metric plus the paired variance histograms.

    PSNR and SRE are left unset (None) where undefined instead of
    raising, so identical bands still produce a report.
    """
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    try:
        psnr_db = psnr(x, x_hat)
    except MetricError:
        psnr_db = None
    try:
        sre_db = sre(x, x_hat)
    except MetricError:
        sre_db = None

    var_ref = patch_variances(x, patch)
    var_test = patch_variances(x_hat, patch)
    top = float(max(var_ref.max(), var_test.max()))
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts_ref, _ = np.histogram(var_ref, bins=edges)
    counts_test, _ = np.histogram(var_test, bins=edges)

    return MetricsReport(
        rmse=rmse(x, x_hat),
        mae=mae(x, x_hat),
        ssim=ssim(x, x_hat),
        psnr_db=psnr_db,
        sre_db=sre_db,
        sam_deg=sam(x, x_hat),
        tolerance_fraction=tolerance_fraction(x, x_hat, tol),
        tolerance_dn=tol,
        histogram_edges=edges,
        histogram_ref=counts_ref,
        histogram_test=counts_test,
    )


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def report_to_text(report: MetricsReport) -> str:
    """Flat key=value block."""
    lines = [
        f"rmse={report.rmse:.6f}",
        f"mae={report.mae:.6f}",
        f"ssim={report.ssim:.6f}",
        f"psnr_db={_fmt(report.psnr_db)}",
        f"sre_db={_fmt(report.sre_db)}",
        f"sam_deg={report.sam_deg:.6f}",
        f"tolerance_fraction={report.tolerance_fraction:.6f}",
        f"tolerance_dn={report.tolerance_dn:g}",
    ]
    return "\n".join(lines) + "\n"


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "rmse": report.rmse,
        "mae": report.mae,
        "ssim": report.ssim,
        "psnr_db": report.psnr_db,
        "sre_db": report.sre_db,
        "sam_deg": report.sam_deg,
        "tolerance_fraction": report.tolerance_fraction,
        "tolerance_dn": report.tolerance_dn,
        "variance_histogram": {
            "edges": list(map(float, report.histogram_edges)),
            "counts_ref": list(map(int, report.histogram_ref)),
            "counts_test": list(map(int, report.histogram_test)),
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def histogram_to_csv(report: MetricsReport) -> str:
    lines = ["bin_lo,bin_hi,count_ref,count_test"]
    edges = report.histogram_edges
    for i in range(len(edges) - 1):
        lines.append(
            f"{edges[i]:.6f},{edges[i + 1]:.6f},"
            f"{int(report.histogram_ref[i])},{int(report.histogram_test[i])}"
        )
    return "\n".join(lines) + "\n"
