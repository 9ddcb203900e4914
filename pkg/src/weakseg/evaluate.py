"""Pixel-level precision / recall / F1 and qualitative overlays."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from weakseg import pngio
from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN
from weakseg.infer import InferencePolicy, binarize, sliding_window_predict

log = logging.getLogger(__name__)

GUTTER = 4
GUTTER_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("pixel counts must be non-negative")

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        return PixelCounts(self.tp + other.tp, self.fp + other.fp,
                           self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accumulate_counts(prediction: np.ndarray, gt: np.ndarray) -> PixelCounts:
    """Confusion counts with text as the positive class.

    Pixels whose ground truth is UNCERTAIN are excluded from every count.
    """
    prediction = np.asarray(prediction).astype(bool)
    gt = np.asarray(gt)
    if prediction.shape != gt.shape:
        raise ValueError(f"prediction {prediction.shape} and ground truth {gt.shape} differ in size")
    pos = gt == FOREGROUND
    neg = gt == BACKGROUND
    return PixelCounts(
        tp=int((prediction & pos).sum()),
        fp=int((prediction & neg).sum()),
        fn=int((~prediction & pos).sum()),
        tn=int((~prediction & neg).sum()),
    )


def compute_metrics(counts: PixelCounts) -> Tuple[float, float, float]:
    """(precision, recall, F1); each is 0 when its denominator is 0."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = f1_score(precision, recall)
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def relative_delta(f1: float, baseline_f1: float) -> float:
    """F1 difference in percentage points (inputs given in percent)."""
    return f1 - baseline_f1


def pooled_metrics(counts: Iterable[PixelCounts]) -> Tuple[float, float, float]:
    """Micro aggregation: sum counts over images, then compute metrics."""
    total = PixelCounts()
    for c in counts:
        total = total + c
    return compute_metrics(total)


def per_image_metrics(counts: Iterable[PixelCounts]) -> Tuple[float, float, float]:
    """Macro aggregation: mean of per-image metrics."""
    rows = [compute_metrics(c) for c in counts]
    if not rows:
        return 0.0, 0.0, 0.0
    return tuple(float(np.mean([r[i] for r in rows])) for i in range(3))


def evaluate_pairs(model, pairs: Sequence, policy: InferencePolicy) -> Tuple[float, float, float]:
    """Pooled metrics of a model over in-memory ``(image, label)`` pairs."""
    counts = []
    for image, label in pairs:
        prob = sliding_window_predict(model, image, policy)
        counts.append(accumulate_counts(binarize(prob, policy.threshold), label))
    return pooled_metrics(counts)


def match_prediction_dirs(pred_dir, gt_dir) -> List[Tuple[str, Path, Path]]:
    """Pair binary prediction files with ground-truth files by stem."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if (pred_dir / "masks").is_dir():
        pred_dir = pred_dir / "masks"
    pairs = []
    for pred in pngio.list_images(pred_dir):
        gt = pngio.find_by_stem(gt_dir, pred.stem)
        if gt is None:
            log.warning("no ground truth for %s", pred.name)
            continue
        pairs.append((pred.stem, pred, gt))
    return pairs


def read_prediction(path) -> np.ndarray:
    return pngio.read_mask(path) == FOREGROUND


# overlays -------------------------------------------------------------------

def colorize(labels: np.ndarray) -> np.ndarray:
    """Label codes (or a boolean mask) -> RGB using the label palette."""
    labels = np.asarray(labels)
    if labels.dtype == bool:
        labels = labels.astype(np.uint8)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    out[labels == FOREGROUND] = pngio.PALETTE[1]
    out[labels == UNCERTAIN] = pngio.PALETTE[2]
    return out


def overlay_panel(image: np.ndarray, prediction: np.ndarray, gt: np.ndarray,
                  gutter: int = GUTTER) -> np.ndarray:
    """Input | prediction | ground truth, separated by white gutters."""
    height, width = image.shape[:2]
    panel = np.empty((height, 3 * width + 2 * gutter, 3), dtype=np.uint8)
    panel[:] = GUTTER_COLOR
    for i, tile in enumerate((np.asarray(image, dtype=np.uint8), colorize(prediction), colorize(gt))):
        x = i * (width + gutter)
        panel[:, x:x + width] = tile
    return panel


def emit_overlays(images: Sequence[np.ndarray], predictions: Sequence[np.ndarray],
                  gts: Sequence[np.ndarray], out_dir, names: Sequence[str] = None) -> List[Path]:
    out_dir = Path(out_dir)
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(images))]
    paths = []
    for name, image, pred, gt in zip(names, images, predictions, gts):
        path = out_dir / f"{name}_panel.png"
        pngio.write_image(overlay_panel(image, pred, gt), path)
        paths.append(path)
    return paths
