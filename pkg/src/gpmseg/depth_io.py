"""Depth-prior ingestion and evaluation.

Loads depth maps from 16-bit grayscale images or raw GPMD float files,
min-max normalizes them to [0,1], and scores predictions with the usual
six depth metrics (threshold accuracies, AbsRel, RMSE, log10 error).
Also provides a seeded synthetic tunnel-shaped depth generator so tests
and the synthetic dataset never need real files.
"""

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

RAW_MAGIC = b"GPMD"

_DELTA_BASE = 1.25


@dataclass
class DepthRecord:
    image_id: str
    depth: np.ndarray  # (h, w) float32 in [0,1]
    source: str  # "file" or "synthetic"
    original_range_mm: Optional[tuple] = None

    def denormalized(self) -> np.ndarray:
        if self.original_range_mm is None:
            return self.depth.copy()
        lo, hi = self.original_range_mm
        return self.depth * (hi - lo) + lo


@dataclass
class DepthMetrics:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    rmse: float
    log10: float
    units: str  # "mm" when de-normalized, else "normalized"

    def as_dict(self) -> dict:
        return {
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "abs_rel": self.abs_rel,
            "rmse": self.rmse,
            "log10": self.log10,
            "units": self.units,
        }


def normalize_depth(raw: np.ndarray) -> tuple:
    """Min-max normalize to [0,1]; constant maps become all zeros.

    Returns (normalized float32 array, (raw_min, raw_max)).
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.float32), (lo, hi)
    norm = (raw - lo) / (hi - lo)
    return norm.astype(np.float32), (lo, hi)


def _resize_bilinear(depth: np.ndarray, target_size: tuple) -> np.ndarray:
    h, w = target_size
    img = Image.fromarray(depth.astype(np.float32), mode="F")
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32)


def _read_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8 or header[:4] != RAW_MAGIC:
            raise DataError(f"{path}: not a {RAW_MAGIC.decode()} raw depth file")
        height, width = struct.unpack("<HH", header[4:8])
        payload = fh.read()
    expected = height * width * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return data.astype(np.float64)


def load_depth(path: str, target_size: Optional[tuple] = None) -> DepthRecord:
    """Load a depth file, normalize to [0,1], optionally resample.

    Raw integer or float values are taken as millimetres; the original
    range is kept on the record so metrics can report in mm.
    """
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read depth file {path}: {exc}") from exc

    if magic == RAW_MAGIC:
        raw = _read_raw(path)
    else:
        try:
            with Image.open(path) as img:
                if img.mode not in ("L", "I", "I;16", "F"):
                    img = img.convert("L")
                raw = np.asarray(img, dtype=np.float64)
        except OSError as exc:
            raise DataError(f"cannot decode depth image {path}: {exc}") from exc

    if raw.ndim != 2:
        raise DataError(f"{path}: depth must be single-channel, got shape {raw.shape}")
    if np.isnan(raw).any():
        raise DataError(f"{path}: depth contains NaN values")
    if (raw < 0).any():
        raise DataError(f"{path}: depth contains negative values")

    depth, range_mm = normalize_depth(raw)
    if target_size is not None:
        depth = np.clip(_resize_bilinear(depth, target_size), 0.0, 1.0)
    image_id = os.path.splitext(os.path.basename(path))[0]
    return DepthRecord(image_id=image_id, depth=depth, source="file", original_range_mm=range_mm)


def save_depth_png(path: str, depth: np.ndarray, range_mm: Optional[tuple] = None) -> None:
    """Write a [0,1] depth map as 16-bit grayscale.

    With range_mm the pixels hold rounded millimetre values; otherwise
    the full 0..65535 span is used.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if range_mm is not None:
        lo, hi = range_mm
        raw = depth * (hi - lo) + lo
    else:
        raw = depth * 65535.0
    raw = np.clip(np.round(raw), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def save_depth_raw(path: str, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError(f"raw depth must be 2-d, got shape {depth.shape}")
    h, w = depth.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"raw depth dims {h}x{w} exceed the 16-bit header")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<HH", h, w))
        fh.write(depth.astype("<f4").tobytes())


def low_freq_noise(rng: np.random.Generator, height: int, width: int, cells: int = 4) -> np.ndarray:
    """Smooth noise in [-1,1]: a coarse uniform grid upsampled bilinearly."""
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1)).astype(np.float32)
    return np.clip(_resize_bilinear(grid, (height, width)), -1.0, 1.0)


def synth_depth(height: int, width: int, seed: int = 0) -> DepthRecord:
    """Deterministic tunnel-like depth: far bright core, near dark rim.

    A radial falloff around a jittered lumen center plus seeded smooth
    noise, min-max normalized. Noise amplitude is small enough that the
    center stays farther than the corners.
    """
    if height < 2 or width < 2:
        raise ValueError(f"synth_depth needs dims >= 2, got {height}x{width}")
    rng = np.random.default_rng(seed)
    cy, cx = rng.uniform(-0.2, 0.2, size=2)
    ys = np.linspace(-1.0, 1.0, height)
    xs = np.linspace(-1.0, 1.0, width)
    r2 = ((ys[:, None] - cy) / 1.4) ** 2 + ((xs[None, :] - cx) / 1.4) ** 2
    tunnel = np.exp(-2.5 * r2)
    depth = tunnel + 0.15 * low_freq_noise(rng, height, width)
    depth, _ = normalize_depth(depth)
    return DepthRecord(image_id=f"synth-{seed}", depth=depth, source="synthetic")


def depth_metrics(
    pred,
    gt,
    valid_mask=None,
    original_range_mm: Optional[tuple] = None,
) -> DepthMetrics:
    """Score a depth prediction against ground truth.

    Threshold accuracies and AbsRel use the values as given; RMSE and
    log10 are de-normalized to mm when original_range_mm is supplied,
    otherwise reported in normalized units (see the units field).
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt size mismatch: {pred.shape} vs {gt.shape}")
    if valid_mask is None:
        mask = gt > 0
    else:
        mask = np.asarray(valid_mask, dtype=bool).ravel()
        if mask.shape != gt.shape:
            raise ValueError(f"valid_mask size mismatch: {mask.shape} vs {gt.shape}")
        mask = mask & (gt > 0)
    if not mask.any():
        raise ValueError("depth_metrics: no valid pixels (gt must be > 0 somewhere)")

    p = pred[mask]
    g = gt[mask]
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < _DELTA_BASE))
    delta2 = float(np.mean(ratio < _DELTA_BASE**2))
    delta3 = float(np.mean(ratio < _DELTA_BASE**3))
    abs_rel = float(np.mean(np.abs(p - g) / g))

    if original_range_mm is not None:
        lo, hi = original_range_mm
        pm = p * (hi - lo) + lo
        gm = g * (hi - lo) + lo
        units = "mm"
    else:
        pm, gm = p, g
        units = "normalized"
    rmse = float(np.sqrt(np.mean((pm - gm) ** 2)))
    log_ok = (pm > 0) & (gm > 0)
    if log_ok.any():
        log10 = float(np.mean(np.abs(np.log10(pm[log_ok]) - np.log10(gm[log_ok]))))
    else:
        log10 = math.nan
    return DepthMetrics(delta1, delta2, delta3, abs_rel, rmse, log10, units)


def read_pairing_manifest(path: str) -> list:
    """Parse "image<TAB>depth<TAB>mask" lines into absolute path triples.

    Relative entries resolve against the manifest's directory. Blank
    lines and lines starting with # are skipped.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read pairing manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    triples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(parts)}")
        triples.append(tuple(p if os.path.isabs(p) else os.path.join(base, p) for p in parts))
    return triples
