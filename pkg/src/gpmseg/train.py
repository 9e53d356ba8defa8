"""Training harness: config, loss, schedule, augmentation, epoch loop.

Defaults mirror the reference protocol: AdamW at lr 1e-3 with weight
decay 5e-3, batch size 10, 350 epochs, cosine-annealed learning rate
with T_max 50 down to 1e-5, 256x256 crops, five seeds. Runs are
deterministic for a fixed seed under single-threaded execution.
"""

import math
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import UNet, build_model
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, TrainingDiverged
from .gpm import ChainOrder
from .metrics import SegScores, binarize, score_images

LOSS_KINDS = ("dice_bce", "dice", "bce")

LOG_HEADER = "epoch,lr,train_loss,val_dsc"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-3
    batch_size: int = 10
    epochs: int = 350
    t_max: int = 50
    lr_min: float = 1e-5
    image_size: int = 256
    seeds: tuple = (0, 1, 2, 3, 4)
    loss: str = "dice_bce"
    early_stop_patience: Optional[int] = None
    val_fraction: float = 0.1
    augment: bool = True
    base_channels: int = 64
    with_gpm: bool = True
    ordering: str = "bottom_to_top"
    similarity_scale: str = "channels"
    data_manifest: Optional[str] = None
    synthetic_samples: int = 0
    dataset_seed: int = 1234
    num_threads: int = 1  # 0 leaves the torch default in place

    def __post_init__(self):
        if self.lr_min >= self.lr:
            raise ConfigError(f"lr_min ({self.lr_min}) must be below lr ({self.lr})")
        if not 1 <= self.t_max <= self.epochs:
            raise ConfigError(f"t_max ({self.t_max}) must lie in [1, epochs={self.epochs}]")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        try:
            ChainOrder(self.ordering)
        except ValueError:
            raise ConfigError(f"unknown ordering {self.ordering!r}") from None
        if self.similarity_scale not in ("channels", "tokens"):
            raise ConfigError(f"unknown similarity_scale {self.similarity_scale!r}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# -- config file parsing ---------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_seeds(s: str) -> tuple:
    return tuple(int(part) for part in s.split(",") if part.strip())


def _parse_optional_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _parse_optional_str(s: str):
    return None if s.strip().lower() in ("", "none") else s.strip()


_PARSERS = {
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "t_max": int,
    "lr_min": float,
    "image_size": int,
    "seeds": _parse_seeds,
    "loss": str.strip,
    "early_stop_patience": _parse_optional_int,
    "val_fraction": float,
    "augment": _parse_bool,
    "base_channels": int,
    "with_gpm": _parse_bool,
    "ordering": str.strip,
    "similarity_scale": str.strip,
    "data_manifest": _parse_optional_str,
    "synthetic_samples": int,
    "dataset_seed": int,
    "num_threads": int,
}

assert set(_PARSERS) == {f.name for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Flat "key = value" lines; # starts a comment, blanks ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> TrainConfig:
    """Build a TrainConfig from an optional file plus override strings."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    raw.update(overrides or {})
    kwargs = {}
    for key, value in raw.items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key: {key}")
        try:
            kwargs[key] = _PARSERS[key](value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return TrainConfig(**kwargs)


# -- loss ------------------------------------------------------------------

def soft_dice(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-sample soft Dice of sigmoid(logits) vs target, averaged."""
    probs = torch.sigmoid(logits)
    dims = tuple(range(1, logits.dim()))
    inter = (probs * target).sum(dims)
    total = probs.sum(dims) + target.sum(dims)
    return ((2.0 * inter + eps) / (total + eps)).mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor, kind: str = "dice_bce") -> torch.Tensor:
    """BCE on logits plus (1 - soft Dice); parts selectable via kind."""
    if logits.shape != target.shape:
        raise ValueError(f"logits/target shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    loss = logits.new_zeros(())
    if kind in ("dice_bce", "bce"):
        loss = loss + F.binary_cross_entropy_with_logits(logits, target)
    if kind in ("dice_bce", "dice"):
        loss = loss + (1.0 - soft_dice(logits, target))
    return loss


# -- schedule --------------------------------------------------------------

def lr_at_epoch(epoch: int, lr: float = 1e-3, lr_min: float = 1e-5, t_max: int = 50) -> float:
    """Closed-form cosine annealing, periodic past t_max (trough at t_max,
    back at lr by 2*t_max, and so on)."""
    return lr_min + (lr - lr_min) * (1.0 + math.cos(math.pi * epoch / t_max)) / 2.0


# -- augmentation ----------------------------------------------------------

def apply_geometric(arr: np.ndarray, flip_h: bool, flip_v: bool, quarter_turns: int) -> np.ndarray:
    """Shared geometric transform for (H, W) or (C, H, W) arrays.

    Flips are involutions; quarter turns assume square spatial dims.
    """
    ax_h, ax_w = arr.ndim - 2, arr.ndim - 1
    out = arr
    if flip_h:
        out = np.flip(out, axis=ax_w)
    if flip_v:
        out = np.flip(out, axis=ax_h)
    if quarter_turns % 4:
        out = np.rot90(out, quarter_turns % 4, axes=(ax_h, ax_w))
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, mask: np.ndarray, depth: np.ndarray, rng: np.random.Generator):
    """One shared geometric draw for all three arrays, photometric jitter
    on the image only. Masks stay binary, depth values stay in range."""
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    turns = int(rng.integers(4)) if image.shape[-1] == image.shape[-2] else 0
    image = apply_geometric(image, flip_h, flip_v, turns)
    mask = apply_geometric(mask, flip_h, flip_v, turns)
    depth = apply_geometric(depth, flip_h, flip_v, turns)
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.05, 0.05)
    image = np.clip(image * scale + shift, 0.0, 1.0).astype(np.float32)
    return image, mask, depth


# -- split -----------------------------------------------------------------

def split_by_id(image_ids: Sequence[str], val_fraction: float = 0.1) -> tuple:
    """Deterministic 2-way split on a stable hash of the image id."""
    cut = int(round(val_fraction * 10000))
    train_idx, val_idx = [], []
    for i, image_id in enumerate(image_ids):
        bucket = zlib.crc32(str(image_id).encode("utf-8")) % 10000
        (val_idx if bucket < cut else train_idx).append(i)
    return train_idx, val_idx


# -- epoch loop ------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = -1  # last completed epoch
    best_val_dsc: float = -1.0
    best_epoch: int = -1
    checkpoint_path: Optional[str] = None
    history: list = field(default_factory=list)  # (epoch, lr, train_loss, val_dsc)
    data_seed: int = 0
    augment_seed: int = 0


def build_seeded_model(config: TrainConfig, seed: int) -> UNet:
    """Seed torch, then build, so two calls yield identical weights."""
    torch.manual_seed(seed)
    return build_model(
        base_channels=config.base_channels,
        with_gpm=config.with_gpm,
        ordering=config.ordering,
        similarity_scale=config.similarity_scale,
    )


def _stack_batch(samples, aug_rng=None):
    images, depths, masks = [], [], []
    for image, depth, mask, _ in samples:
        if aug_rng is not None:
            image, mask, depth = augment(image, mask, depth, aug_rng)
        images.append(image)
        depths.append(depth)
        masks.append(mask)
    x = torch.from_numpy(np.stack(images))
    d = torch.from_numpy(np.stack(depths))
    y = torch.from_numpy(np.stack(masks))
    return x, d, y


def evaluate_model(model: UNet, dataset, indices=None, batch_size: int = 10,
                   threshold: float = 0.5) -> SegScores:
    """Per-image Dice/IoU of the thresholded predictions, no augmentation."""
    if indices is None:
        indices = range(len(dataset))
    model.eval()
    pairs = []
    with torch.no_grad():
        batch = []
        for i in indices:
            batch.append(dataset[i])
            if len(batch) == batch_size:
                pairs.extend(_score_batch(model, batch, threshold))
                batch = []
        if batch:
            pairs.extend(_score_batch(model, batch, threshold))
    return score_images(pairs)


def _score_batch(model, samples, threshold):
    x, d, y = _stack_batch(samples)
    pred = binarize(model(x, d), threshold).numpy()
    gt = y.numpy() > 0.5
    return [
        (samples[j][3], pred[j, 0], gt[j, 0])
        for j in range(len(samples))
    ]


def train_run(config: TrainConfig, model: UNet, dataset, seed: int,
              out_dir: Optional[str] = None) -> TrainState:
    """Run the epoch loop; returns the final TrainState.

    Writes an "epoch,lr,train_loss,val_dsc" log and keeps the best
    checkpoint (by validation DSC) under out_dir when given. Raises
    TrainingDiverged on a non-finite loss.
    """
    if len(dataset) == 0:
        raise DataError("train_run: empty dataset")
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)

    ids = getattr(dataset, "image_ids", None)
    if ids is None:
        ids = [f"item{i:05d}" for i in range(len(dataset))]
    train_idx, val_idx = split_by_id(ids, config.val_fraction)
    if not train_idx:
        raise DataError("train_run: validation split consumed every sample")
    if not val_idx:
        val_idx = list(train_idx)  # tiny runs validate on the train set

    state = TrainState(data_seed=seed, augment_seed=seed + 1000003)
    order_rng = np.random.default_rng(state.data_seed)
    aug_rng = np.random.default_rng(state.augment_seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "log.csv"), "w", encoding="utf-8")
        log_fh.write(LOG_HEADER + "\n")
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(epoch, config.lr, config.lr_min, config.t_max)
            for group in opt.param_groups:
                group["lr"] = lr

            model.train()
            perm = order_rng.permutation(len(train_idx))
            losses = []
            for batch_index, start in enumerate(range(0, len(perm), config.batch_size)):
                chunk = perm[start:start + config.batch_size]
                samples = [dataset[train_idx[j]] for j in chunk]
                x, d, y = _stack_batch(samples, aug_rng if config.augment else None)
                logits = model(x, d)
                loss = seg_loss(logits, y, config.loss)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch, lr, batch_index)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))

            train_loss = float(np.mean(losses))
            val_dsc = evaluate_model(model, dataset, val_idx, config.batch_size).dsc
            state.epoch = epoch
            state.history.append((epoch, lr, train_loss, val_dsc))
            if log_fh is not None:
                log_fh.write(f"{epoch},{lr:.10g},{train_loss:.8f},{val_dsc:.8f}\n")
                log_fh.flush()

            if val_dsc > state.best_val_dsc:
                state.best_val_dsc = val_dsc
                state.best_epoch = epoch
                if out_dir is not None:
                    state.checkpoint_path = os.path.join(out_dir, "best.npz")
                    save_checkpoint(state.checkpoint_path, model, extra={
                        "seed": seed,
                        "epoch": epoch,
                        "val_dsc": val_dsc,
                        "train_config": config.as_dict(),
                    })
            if (config.early_stop_patience is not None
                    and epoch - state.best_epoch >= config.early_stop_patience):
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


def moving_average(values: Sequence[float], window: int = 5) -> list:
    """Simple trailing mean over consecutive windows."""
    if window < 1 or window > len(values):
        return []
    arr = np.asarray(values, dtype=np.float64)
    kernel = np.ones(window) / window
    return list(np.convolve(arr, kernel, mode="valid"))
