"""Segmentation scoring: binarization, Dice/IoU, multi-seed aggregation.

Dataset-level scores are means of per-image scores, not pixel-pooled
counts. Both masks empty counts as a perfect match (1.0, 1.0).
"""

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

DEFAULT_THRESHOLD = 0.5


def binarize(logits, threshold: float = DEFAULT_THRESHOLD) -> torch.Tensor:
    """Boolean mask sigmoid(logit) > threshold; the comparison is strict,
    so a zero logit at the default threshold maps to background."""
    t = torch.as_tensor(logits)
    return torch.sigmoid(t.float()) > threshold


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} is not binary")
    return arr.astype(bool)


def dice_iou(pred_mask, gt_mask) -> tuple:
    """(dsc, iou) for one pair of binary masks."""
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    inter = int(np.logical_and(p, g).sum())
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2.0 * inter / total, inter / union


@dataclass
class SegScores:
    dsc: float
    iou: float
    per_image: list  # (image_id, dsc, iou) per image


def score_images(pairs: Iterable) -> SegScores:
    """Score (image_id, pred_mask, gt_mask) triples; means are per-image."""
    per_image = []
    for image_id, pred, gt in pairs:
        d, i = dice_iou(pred, gt)
        per_image.append((image_id, d, i))
    if not per_image:
        raise ValueError("score_images: no images to score")
    dsc = float(np.mean([d for _, d, _ in per_image]))
    iou = float(np.mean([i for _, _, i in per_image]))
    return SegScores(dsc=dsc, iou=iou, per_image=per_image)


@dataclass
class SeedAggregate:
    per_seed: list  # SegScores, one per seed
    mean_dsc: float
    mean_iou: float


def aggregate(per_seed: Sequence[SegScores]) -> SeedAggregate:
    if not per_seed:
        raise ValueError("aggregate: empty seed list")
    return SeedAggregate(
        per_seed=list(per_seed),
        mean_dsc=float(np.mean([s.dsc for s in per_seed])),
        mean_iou=float(np.mean([s.iou for s in per_seed])),
    )


def write_score_report(path: str, scores_by_dataset: dict, notes: Sequence[str] = ()) -> None:
    """Key-value text report, one dataset per block."""
    lines = ["# segmentation scores; dataset score = mean of per-image scores"]
    lines += [f"# {note}" for note in notes]
    for dataset, scores in scores_by_dataset.items():
        lines.append(f"{dataset}.dsc = {scores.dsc:.6f}")
        lines.append(f"{dataset}.iou = {scores.iou:.6f}")
        lines.append(f"{dataset}.images = {len(scores.per_image)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_scores_csv(path: str, rows: Iterable) -> None:
    """Summary table with fixed column order: dataset, method, dsc, iou."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "dsc", "iou"])
        for dataset, method, dsc, iou in rows:
            writer.writerow([dataset, method, f"{dsc:.6f}", f"{iou:.6f}"])
