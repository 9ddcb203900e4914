"""Sliding-window, multi-scale inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from weakseg.smanet import IMAGE_MEAN, normalize_image

FUSIONS = ("mean_prob", "max_prob")


@dataclass(frozen=True)
class TilingPlan:
    window: int
    stride: int
    origins: Tuple[Tuple[int, int], ...]

    def coverage(self, image_size: Tuple[int, int]) -> np.ndarray:
        width, height = image_size
        counts = np.zeros((height, width), dtype=np.int64)
        for x, y in self.origins:
            counts[y:y + self.window, x:x + self.window] += 1
        return counts


@dataclass(frozen=True)
class InferencePolicy:
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25)
    window: int = 281
    stride: int = 140
    fusion: str = "mean_prob"
    threshold: float = 0.5
    batch_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scale set must be non-empty and positive")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be positive")
        if self.stride > self.window:
            raise ValueError(f"stride {self.stride} larger than window {self.window} leaves gaps")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


def _axis_origins(length: int, window: int, stride: int) -> List[int]:
    if window > length:
        raise ValueError(f"window {window} larger than image side {length}")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


def plan_tiling(image_size: Tuple[int, int], window: int, stride: int) -> TilingPlan:
    """Windows on a stride grid; the last row/column snaps to the image edge."""
    width, height = image_size
    if stride < 1 or stride > window:
        raise ValueError(f"stride must lie in [1, window], got {stride} for window {window}")
    xs = _axis_origins(width, window, stride)
    ys = _axis_origins(height, window, stride)
    return TilingPlan(window, stride, tuple((x, y) for y in ys for x in xs))


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a uint8 HxWx3 image to (width, height)."""
    if (image.shape[1], image.shape[0]) == tuple(size):
        return image
    return np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))


def resize_prob(prob: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    width, height = size
    if prob.shape == (height, width):
        return prob
    t = torch.from_numpy(np.ascontiguousarray(prob, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def pad_to(image: np.ndarray, min_side: int) -> np.ndarray:
    """Pad bottom/right with the mean pixel so both sides reach ``min_side``."""
    height, width = image.shape[:2]
    if height >= min_side and width >= min_side:
        return image
    fill = np.round(np.array(IMAGE_MEAN) * 255).astype(np.uint8)
    out = np.empty((max(height, min_side), max(width, min_side), 3), dtype=np.uint8)
    out[:] = fill
    out[:height, :width] = image
    return out


@torch.no_grad()
def foreground_probability(model, batch: np.ndarray) -> np.ndarray:
    """Softmax foreground channel for a uint8 NxHxWx3 batch."""
    scores = model(normalize_image(batch))
    return torch.softmax(scores.double(), dim=1)[:, 1].numpy()


def _predict_scale(model, image: np.ndarray, policy: InferencePolicy,
                   order: Optional[Sequence[int]]) -> np.ndarray:
    height, width = image.shape[:2]
    padded = pad_to(image, policy.window)
    plan = plan_tiling((padded.shape[1], padded.shape[0]), policy.window, policy.stride)
    indices = list(order) if order is not None else list(range(len(plan.origins)))
    if sorted(indices) != list(range(len(plan.origins))):
        raise ValueError("order must be a permutation of the window indices")

    preds = {}
    w = policy.window
    for start in range(0, len(indices), policy.batch_size):
        chunk = indices[start:start + policy.batch_size]
        batch = np.stack([padded[plan.origins[i][1]:plan.origins[i][1] + w,
                                 plan.origins[i][0]:plan.origins[i][0] + w] for i in chunk])
        for i, p in zip(chunk, foreground_probability(model, batch)):
            preds[i] = p

    acc = np.zeros(padded.shape[:2], dtype=np.float64)
    if policy.fusion == "mean_prob":
        counts = np.zeros(padded.shape[:2], dtype=np.int64)
        # ordered reduction keeps results independent of prediction order
        for i in range(len(plan.origins)):
            x, y = plan.origins[i]
            acc[y:y + w, x:x + w] += preds[i]
            counts[y:y + w, x:x + w] += 1
        acc /= counts
    else:
        for i in range(len(plan.origins)):
            x, y = plan.origins[i]
            np.maximum(acc[y:y + w, x:x + w], preds[i], out=acc[y:y + w, x:x + w])
    return acc[:height, :width]


def sliding_window_predict(model, image: np.ndarray, policy: InferencePolicy,
                           order: Optional[Sequence[int]] = None) -> np.ndarray:
    """Full-image foreground probability from windowed, multi-scale predictions.

    Each scale resizes the image, tiles it and fuses window outputs (mean of
    overlapping probabilities by default). Per-scale maps are resized back
    to native resolution and averaged. ``order`` permutes window processing
    at single scale, for testing.
    """
    if hasattr(model, "eval"):
        model.eval()
    height, width = image.shape[:2]
    total = np.zeros((height, width), dtype=np.float64)
    for scale in policy.scales:
        size = (max(int(round(width * scale)), 1), max(int(round(height * scale)), 1))
        prob = _predict_scale(model, resize_image(image, size), policy, order)
        total += resize_prob(prob, (width, height))
    return np.clip(total / len(policy.scales), 0.0, 1.0)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where probability strictly exceeds ``threshold``."""
    return np.asarray(prob) > threshold
