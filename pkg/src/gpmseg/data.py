"""Datasets: a seeded synthetic polyp generator and a file-backed loader.

Each sample is a tuple (image, depth, mask, image_id) with image (3, H, W)
in [0,1], depth (1, H, W) in [0,1], mask (1, H, W) in {0, 1}, all float32.

The synthetic scenes put one true polyp and one decoy blob in opposite
image quadrants. Both blobs share the same color statistics, but only the
true polyp bulges out of the tunnel-shaped depth map, so the geometry
stream disambiguates what the image alone cannot.
"""

import os
from typing import Optional

import numpy as np
from PIL import Image

from .depth_io import DepthRecord, load_depth, low_freq_noise, read_pairing_manifest, save_depth_png, synth_depth
from .errors import DataError

_BASE_COLOR = (0.55, 0.40, 0.32)
_TINT = (0.10, -0.02, -0.02)


def _ellipse_profile(h: int, w: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    """Dome height in [0,1]: 1 at the ellipse center, 0 at and beyond the rim."""
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = (xs * cos_t + ys * sin_t) / rx
    v = (-xs * sin_t + ys * cos_t) / ry
    return np.sqrt(np.clip(1.0 - (u**2 + v**2), 0.0, 1.0))


def make_scene(image_size: int, rng: np.random.Generator):
    """One synthetic sample: (image, depth, mask) arrays."""
    h = w = image_size
    tunnel = synth_depth(h, w, seed=int(rng.integers(2**31))).depth.astype(np.float64)

    # true polyp in one quadrant, decoy in the diagonally opposite one
    quad = int(rng.integers(4))
    qy, qx = (0.25, 0.75)[quad // 2], (0.25, 0.75)[quad % 2]
    jitter = lambda: rng.uniform(-0.08, 0.08)
    cy1, cx1 = (qy + jitter()) * h, (qx + jitter()) * w
    cy2, cx2 = (1.0 - qy + jitter()) * h, (1.0 - qx + jitter()) * w
    radii = lambda: (rng.uniform(0.10, 0.20) * h, rng.uniform(0.10, 0.20) * w)
    ry1, rx1 = radii()
    ry2, rx2 = radii()
    dome1 = _ellipse_profile(h, w, cy1, cx1, ry1, rx1, rng.uniform(0, np.pi))
    dome2 = _ellipse_profile(h, w, cy2, cx2, ry2, rx2, rng.uniform(0, np.pi))

    mask = (dome1 > 0).astype(np.float32)

    # only the true polyp bulges toward the camera (smaller depth = nearer)
    bump = rng.uniform(0.25, 0.45)
    depth = np.clip(tunnel - bump * dome1, 0.0, 1.0).astype(np.float32)

    shade = 0.75 + 0.25 * low_freq_noise(rng, h, w, cells=3).astype(np.float64)
    image = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        image[c] = _BASE_COLOR[c] * shade + _TINT[c] * (dome1 + dome2)
    image += rng.normal(0.0, 0.08, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return image, depth[None], mask[None]


class SyntheticPolypDataset:
    """In-memory seeded scene collection; items are generated lazily and cached."""

    def __init__(self, n: int, image_size: int = 64, seed: int = 1234):
        if n < 1:
            raise ValueError(f"dataset size must be positive, got {n}")
        self.image_size = image_size
        self.seed = seed
        self._item_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
        self._cache = {}
        self.image_ids = [f"synth{seed}-{i:04d}" for i in range(n)]

    def __len__(self):
        return len(self._item_seeds)

    def __getitem__(self, index: int):
        if index not in self._cache:
            rng = np.random.default_rng(int(self._item_seeds[index]))
            image, depth, mask = make_scene(self.image_size, rng)
            self._cache[index] = (image, depth, mask, self.image_ids[index])
        return self._cache[index]


def generate_synthetic_dataset(root: str, n: int, image_size: int = 64, seed: int = 1234) -> str:
    """Write n synthetic triplets plus a pairing manifest; returns its path."""
    dataset = SyntheticPolypDataset(n, image_size=image_size, seed=seed)
    for sub in ("images", "depths", "masks"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    lines = []
    for i in range(n):
        image, depth, mask, image_id = dataset[i]
        rel = (
            os.path.join("images", f"{image_id}.png"),
            os.path.join("depths", f"{image_id}.png"),
            os.path.join("masks", f"{image_id}.png"),
        )
        rgb = np.clip(np.round(image * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(root, rel[0]))
        save_depth_png(os.path.join(root, rel[1]), depth[0])
        Image.fromarray((mask[0] > 0.5).astype(np.uint8) * 255, mode="L").save(os.path.join(root, rel[2]))
        lines.append("\t".join(rel))
    manifest_path = os.path.join(root, "manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path


class ManifestDataset:
    """Triplets read from a pairing manifest, resized to a square size."""

    def __init__(self, manifest_path: str, image_size: Optional[int] = None, cache: bool = True):
        self.triples = read_pairing_manifest(manifest_path)
        if not self.triples:
            raise DataError(f"pairing manifest {manifest_path} lists no samples")
        self.image_size = image_size
        self.image_ids = [
            os.path.splitext(os.path.basename(image_path))[0]
            for image_path, _, _ in self.triples
        ]
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.triples)

    def _load(self, index: int):
        image_path, depth_path, mask_path = self.triples[index]
        size = None if self.image_size is None else (self.image_size, self.image_size)
        try:
            with Image.open(image_path) as img:
                img = img.convert("RGB")
                if size is not None:
                    img = img.resize((size[1], size[0]), Image.BILINEAR)
                image = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        except OSError as exc:
            raise DataError(f"missing or unreadable image file: {image_path} ({exc})") from exc
        depth = load_depth(depth_path, target_size=size).depth[None]
        try:
            with Image.open(mask_path) as img:
                img = img.convert("L")
                if size is not None:
                    img = img.resize((size[1], size[0]), Image.NEAREST)
                mask = (np.asarray(img) > 127).astype(np.float32)[None]
        except OSError as exc:
            raise DataError(f"missing or unreadable mask file: {mask_path} ({exc})") from exc
        return image, depth, mask, self.image_ids[index]

    def __getitem__(self, index: int):
        if self._cache is None:
            return self._load(index)
        if index not in self._cache:
            self._cache[index] = self._load(index)
        return self._cache[index]
