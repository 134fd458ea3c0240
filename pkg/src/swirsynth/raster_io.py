"""Band-sequential raster container and on-disk formats.

A raster is `<name>.bsq` (raw little-endian uint16, all of band 0
row-major, then band 1, ...) plus `<name>.json` (the manifest). DN
values are 10-bit, validated on read. Also here: 8-bit P6 composites for
eyeballing, a float32 variant of the container for reflectance products,
and the model checkpoint format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, count_parameters, parameter_shapes

__all__ = [
    "Raster",
    "Manifest",
    "ToaBlock",
    "Checkpoint",
    "TrainStateBlob",
    "RasterFormatError",
    "CheckpointFormatError",
    "read_raster",
    "write_raster",
    "write_composite",
    "read_reflectance",
    "write_reflectance",
    "save_checkpoint",
    "load_checkpoint",
    "MAX_DN",
]

MAX_DN = 1023

CHECKPOINT_MAGIC = "DSWIR1"

_MANIFEST_KEYS = {"width", "height", "bands", "band_names", "bit_depth", "wavelengths_um", "toa"}
_TOA_KEYS = {"l_sat", "esun", "sun_elevation_deg", "doy"}


class RasterFormatError(ValueError):
    """Malformed raster file or manifest."""


class CheckpointFormatError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class ToaBlock:
    """Per-band constants for the reflectance conversion."""

    l_sat: list
    esun: list
    sun_elevation_deg: float
    doy: int

    def validate(self, bands: int) -> None:
        if len(self.l_sat) != bands or len(self.esun) != bands:
            raise RasterFormatError("toa l_sat/esun must carry one value per band")
        if any(v <= 0 for v in self.l_sat) or any(v <= 0 for v in self.esun):
            raise RasterFormatError("toa radiance and irradiance must be positive")
        if not 0 < self.sun_elevation_deg <= 90:
            raise RasterFormatError("sun_elevation_deg must lie in (0, 90]")
        if not 1 <= self.doy <= 366:
            raise RasterFormatError("doy must lie in [1, 366]")


@dataclass
class Manifest:
    width: int
    height: int
    bands: int
    band_names: list
    bit_depth: int = 10
    wavelengths_um: list = field(default_factory=list)
    toa: ToaBlock | None = None

    def validate(self) -> None:
        if self.width < 1 or self.height < 1 or self.bands < 1:
            raise RasterFormatError(
                f"degenerate raster dimensions {self.width}x{self.height}x{self.bands}"
            )
        if self.bit_depth != 10:
            raise RasterFormatError(f"unsupported bit depth {self.bit_depth}")
        if len(self.band_names) != self.bands:
            raise RasterFormatError("band_names length must equal band count")
        if len(self.wavelengths_um) != self.bands:
            raise RasterFormatError("wavelengths_um length must equal band count")
        for pair in self.wavelengths_um:
            if len(pair) != 2:
                raise RasterFormatError(f"wavelength range must be a [lo, hi] pair, got {pair}")
        if self.toa is not None:
            self.toa.validate(self.bands)

    def replace(self, **kw) -> "Manifest":
        d = self.to_dict()
        d.update(kw)
        return Manifest.from_dict(d)

    def to_dict(self) -> dict:
        d = {
            "width": self.width,
            "height": self.height,
            "bands": self.bands,
            "band_names": list(self.band_names),
            "bit_depth": self.bit_depth,
            "wavelengths_um": [list(p) for p in self.wavelengths_um],
        }
        if self.toa is not None:
            d["toa"] = {
                "l_sat": list(self.toa.l_sat),
                "esun": list(self.toa.esun),
                "sun_elevation_deg": self.toa.sun_elevation_deg,
                "doy": self.toa.doy,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        unknown = set(d) - _MANIFEST_KEYS
        if unknown:
            raise RasterFormatError(f"unknown manifest keys: {sorted(unknown)}")
        missing = (_MANIFEST_KEYS - {"toa"}) - set(d)
        if missing:
            raise RasterFormatError(f"manifest missing keys: {sorted(missing)}")
        toa = d.get("toa")
        if toa is not None:
            if isinstance(toa, ToaBlock):
                pass
            else:
                unknown = set(toa) - _TOA_KEYS
                if unknown:
                    raise RasterFormatError(f"unknown toa keys: {sorted(unknown)}")
                toa = ToaBlock(**toa)
        m = cls(
            width=int(d["width"]),
            height=int(d["height"]),
            bands=int(d["bands"]),
            band_names=list(d["band_names"]),
            bit_depth=int(d["bit_depth"]),
            wavelengths_um=[list(p) for p in d["wavelengths_um"]],
            toa=toa,
        )
        m.validate()
        return m


@dataclass
class Raster:
    """(bands, height, width) uint16 DN grid plus its manifest."""

    data: np.ndarray
    meta: Manifest

    def validate(self) -> None:
        self.meta.validate()
        if self.data.dtype != np.uint16:
            raise RasterFormatError(f"raster data must be uint16, got {self.data.dtype}")
        expected = (self.meta.bands, self.meta.height, self.meta.width)
        if self.data.shape != expected:
            raise RasterFormatError(f"data shape {self.data.shape} != manifest {expected}")
        if self.data.size and self.data.max() > MAX_DN:
            offset = int(np.argmax(self.data.reshape(-1) > MAX_DN))
            raise RasterFormatError(
                f"DN {int(self.data.reshape(-1)[offset])} exceeds {MAX_DN} at element {offset}"
            )

    def band(self, index: int) -> np.ndarray:
        if not 0 <= index < self.meta.bands:
            raise IndexError(f"band {index} out of range for {self.meta.bands}-band raster")
        return self.data[index]


def _paths(path) -> tuple[Path, Path]:
    base = Path(path)
    return base.with_name(base.name + ".bsq"), base.with_name(base.name + ".json")


def write_raster(r: Raster, path) -> None:
    """Write `<path>.bsq` + `<path>.json`; byte-deterministic."""
    r.validate()
    bsq, man = _paths(path)
    bsq.write_bytes(np.ascontiguousarray(r.data, dtype="<u2").tobytes())
    man.write_text(json.dumps(r.meta.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_raster(path) -> Raster:
    """Read the raster at prefix ``path`` and validate every invariant."""
    bsq, man = _paths(path)
    if not man.exists():
        raise FileNotFoundError(f"missing manifest {man}")
    if not bsq.exists():
        raise FileNotFoundError(f"missing raster payload {bsq}")
    meta = Manifest.from_dict(json.loads(man.read_text(encoding="utf-8")))
    raw = bsq.read_bytes()
    expected = meta.bands * meta.height * meta.width * 2
    if len(raw) != expected:
        raise RasterFormatError(
            f"{bsq}: payload is {len(raw)} bytes, manifest implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<u2").reshape(meta.bands, meta.height, meta.width)
    r = Raster(data=data.astype(np.uint16), meta=meta)
    r.validate()
    return r


def write_composite(r: Raster, band_triplet, path) -> None:
    """Write a binary P6 image from three bands (e.g. (3, 2, 1) for a
    SWIR/NIR/R false-colour composite).

    Each band is independently stretched from its 2nd-98th DN percentile
    to [0, 255] and clamped; a degenerate stretch (p2 == p98) maps to 0.
    """
    r.validate()
    if len(band_triplet) != 3:
        raise ValueError(f"composite needs exactly three band indices, got {band_triplet}")
    planes = []
    for idx in band_triplet:
        band = r.band(int(idx)).astype(np.float64)
        p2, p98 = np.percentile(band, [2.0, 98.0])
        if p98 > p2:
            stretched = np.clip((band - p2) / (p98 - p2) * 255.0, 0, 255)
        else:
            stretched = np.zeros_like(band)
        planes.append(np.rint(stretched).astype(np.uint8))
    rgb = np.stack(planes, axis=-1)
    header = f"P6\n{r.meta.width} {r.meta.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


# ---------------------------------------------------------------------------
# float32 reflectance container (same band-sequential layout, no DN range)


def write_reflectance(values: np.ndarray, band_names, path) -> None:
    """Write a reflectance product: `<path>.f32` raw little-endian float32
    band-sequential + `<path>.json` sidecar. Reflectance does not fit the
    10-bit DN container, hence the separate format."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ValueError(f"reflectance values must be (bands, H, W), got {values.shape}")
    b, h, w = values.shape
    if len(band_names) != b:
        raise ValueError("band_names length must equal band count")
    base = Path(path)
    base.with_name(base.name + ".f32").write_bytes(
        np.ascontiguousarray(values, dtype="<f4").tobytes()
    )
    sidecar = {
        "width": w,
        "height": h,
        "bands": b,
        "band_names": list(band_names),
        "dtype": "float32",
        "quantity": "toa_reflectance",
    }
    base.with_name(base.name + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n", encoding="utf-8"
    )


def read_reflectance(path) -> tuple[np.ndarray, list]:
    base = Path(path)
    sidecar = json.loads(base.with_name(base.name + ".json").read_text(encoding="utf-8"))
    if sidecar.get("quantity") != "toa_reflectance":
        raise RasterFormatError(f"{path}: not a reflectance product")
    b, h, w = sidecar["bands"], sidecar["height"], sidecar["width"]
    raw = base.with_name(base.name + ".f32").read_bytes()
    if len(raw) != b * h * w * 4:
        raise RasterFormatError(f"{path}: reflectance payload size mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(b, h, w).copy(), sidecar["band_names"]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainStateBlob:
    """Optimizer moments and loop counters, for provenance/resume."""

    m: list
    v: list
    mu_product: float
    step: int
    epoch: int
    seed: int


@dataclass
class Checkpoint:
    config: ModelConfig
    params: list
    train_state: TrainStateBlob | None = None


def _flatten(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def _split_blob(blob: np.ndarray, shapes) -> list:
    out = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(blob[pos : pos + size].reshape(shape).copy())
        pos += size
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize a checkpoint.

    Layout: ASCII line ``DSWIR1``, one JSON line with the model config
    (and train-state scalars when present), then the raw little-endian
    float32 parameter blob in order head kernel, head bias, per block
    (conv1 kernel, conv1 bias, conv2 kernel, conv2 bias), fuse kernel,
    fuse bias, skip kernel, skip bias; kernels row-major over
    [kh][kw][c_in][c_out]. Optimizer moments follow in the same order
    when a train state is attached.
    """
    shapes = parameter_shapes(ckpt.config)
    if len(ckpt.params) != len(shapes):
        raise CheckpointFormatError(
            f"expected {len(shapes)} parameter arrays, got {len(ckpt.params)}"
        )
    for a, s in zip(ckpt.params, shapes):
        if tuple(np.asarray(a).shape) != tuple(s):
            raise CheckpointFormatError(f"parameter shape {np.asarray(a).shape} != expected {s}")
    header = {"config": ckpt.config.to_dict()}
    if ckpt.train_state is not None:
        ts = ckpt.train_state
        header["train_state"] = {
            "mu_product": ts.mu_product,
            "step": ts.step,
            "epoch": ts.epoch,
            "seed": ts.seed,
        }
    body = _flatten(ckpt.params)
    if ckpt.train_state is not None:
        body += _flatten(ckpt.train_state.m) + _flatten(ckpt.train_state.v)
    payload = (
        CHECKPOINT_MAGIC.encode("ascii")
        + b"\n"
        + json.dumps(header, sort_keys=True).encode("utf-8")
        + b"\n"
        + body
    )
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic_end = raw.find(b"\n")
    if magic_end < 0 or raw[:magic_end].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"{path}: bad or unsupported checkpoint version tag "
            f"{raw[:magic_end if magic_end > 0 else 8]!r}"
        )
    header_end = raw.find(b"\n", magic_end + 1)
    if header_end < 0:
        raise CheckpointFormatError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[magic_end + 1 : header_end].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    shapes = parameter_shapes(config)
    n_params = count_parameters(config)

    blob = np.frombuffer(raw[header_end + 1 :], dtype="<f4")
    expected = n_params * (3 if "train_state" in header else 1)
    if blob.size != expected:
        raise CheckpointFormatError(
            f"{path}: blob holds {blob.size} floats, expected {expected} "
            f"for config {config.to_dict()}"
        )
    params = _split_blob(blob[:n_params], shapes)
    train_state = None
    if "train_state" in header:
        ts = header["train_state"]
        train_state = TrainStateBlob(
            m=_split_blob(blob[n_params : 2 * n_params], shapes),
            v=_split_blob(blob[2 * n_params :], shapes),
            mu_product=float(ts["mu_product"]),
            step=int(ts["step"]),
            epoch=int(ts["epoch"]),
            seed=int(ts["seed"]),
        )
    return Checkpoint(config=config, params=params, train_state=train_state)
