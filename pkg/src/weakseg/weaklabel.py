"""Pixel-level supervision from bounding boxes.

A background/foreground network segments the text inside each enlarged
box. Per-box probability patches are max-fused onto a full-image canvas,
thresholded into background / foreground / uncertain, and boxes that are
not legible, machine-printed Latin text are then stamped as uncertain.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from weakseg import pngio
from weakseg.core import (
    BACKGROUND,
    FOREGROUND,
    UNCERTAIN,
    GeometryError,
    LabelMap,
    ProbabilityCanvas,
    TextBox,
    enlarge_box,
)
from weakseg.infer import InferencePolicy, resize_image, resize_prob, sliding_window_predict
from weakseg.ingest import DatasetManifest, SampleRecord, write_manifest

log = logging.getLogger(__name__)

# (patch, (x, y, w, h)) or None when the box is skipped
PatchPredictor = Callable[[np.ndarray, TextBox], Optional[Tuple[np.ndarray, tuple]]]


@dataclass(frozen=True)
class ThresholdPolicy:
    th1: float = 0.3
    th2: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.th1 <= self.th2 <= 1.0:
            raise ValueError(f"thresholds must satisfy 0 <= th1 <= th2 <= 1, got {self.th1}, {self.th2}")


@dataclass
class GeneratedDataset:
    name: str
    items: List[Tuple[str, str]] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)
    manifest_path: Optional[str] = None


def predict_box_probability(model, image: np.ndarray, box: TextBox, factor: float = 0.3,
                            min_side: int = 185, stride: Optional[int] = None):
    """Foreground probability patch over the enlarged, clamped box.

    The crop is resized so its shorter side equals ``min_side`` (aspect
    ratio kept), segmented with a sliding window of that size, and the
    result is mapped back to the crop resolution. Returns ``(patch, rect)``
    or ``None`` when the clamped box is smaller than 2x2 pixels.
    """
    height, width = image.shape[:2]
    try:
        x, y, w, h = enlarge_box(box.bounds(), factor, (width, height))
    except GeometryError as exc:
        log.warning("box skipped: %s", exc)
        return None
    if w < 2 or h < 2:
        log.warning("box %s skipped: %dx%d after clamping", box.bounds(), w, h)
        return None
    crop = image[y:y + h, x:x + w]
    scale = min_side / min(w, h)
    size = (max(int(round(w * scale)), min_side), max(int(round(h * scale)), min_side))
    policy = InferencePolicy(scales=(1.0,), window=min_side, stride=stride or max(min_side // 2, 1))
    prob = sliding_window_predict(model, resize_image(crop, size), policy)
    return resize_prob(prob, (w, h)), (x, y, w, h)


def _fuse_into(canvas: ProbabilityCanvas, patch: np.ndarray, location: Tuple[int, int]) -> None:
    x, y = location
    ph, pw = patch.shape
    if x < 0 or y < 0 or x + pw > canvas.width or y + ph > canvas.height:
        raise GeometryError(
            f"patch {pw}x{ph} at ({x}, {y}) falls outside canvas {canvas.width}x{canvas.height}")
    region = canvas.prob[y:y + ph, x:x + pw]
    np.maximum(region, patch, out=region)
    canvas.touched[y:y + ph, x:x + pw] = True


def fuse_probabilities(canvas: ProbabilityCanvas, patch: np.ndarray,
                       location: Tuple[int, int]) -> ProbabilityCanvas:
    """Return a new canvas holding the per-pixel max of canvas and patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.size and (patch.min() < 0 or patch.max() > 1):
        raise ValueError("probability patch values must lie in [0, 1]")
    out = canvas.copy()
    _fuse_into(out, patch, location)
    return out


def threshold_canvas(canvas: ProbabilityCanvas, policy: ThresholdPolicy = ThresholdPolicy()) -> LabelMap:
    prob = canvas.prob
    labels = np.full(prob.shape, UNCERTAIN, dtype=np.uint8)
    labels[prob < policy.th1] = BACKGROUND
    labels[prob > policy.th2] = FOREGROUND
    labels[~canvas.touched] = BACKGROUND
    return LabelMap(labels)


def apply_uncertainty_boxes(label: LabelMap, boxes: Iterable[TextBox]) -> LabelMap:
    """Mark every pixel of a non-qualifying box as UNCERTAIN."""
    data = label.data.copy()
    for box in boxes:
        if not box.qualifies:
            data[box.mask((label.width, label.height))] = UNCERTAIN
    return LabelMap(data)


def label_image(image: np.ndarray, boxes: Sequence[TextBox], predictor: PatchPredictor,
                policy: ThresholdPolicy = ThresholdPolicy()) -> LabelMap:
    """Fuse, threshold and override for one image."""
    height, width = image.shape[:2]
    canvas = ProbabilityCanvas.empty(width, height)
    for box in boxes:
        if not box.qualifies:
            continue
        result = predictor(image, box)
        if result is None:
            continue
        patch, (x, y, w, h) = result
        _fuse_into(canvas, np.asarray(patch, dtype=np.float64), (x, y))
    return apply_uncertainty_boxes(threshold_canvas(canvas, policy), boxes)


def model_predictor(model, factor: float = 0.3, min_side: int = 185) -> PatchPredictor:
    if hasattr(model, "eval"):
        model.eval()

    def predict(image, box):
        return predict_box_probability(model, image, box, factor, min_side)
    return predict


def generate_dataset(manifest: DatasetManifest, model, policy: ThresholdPolicy = ThresholdPolicy(),
                     out_dir=None, name: Optional[str] = None, workers: int = 1,
                     factor: float = 0.3, min_side: int = 185) -> GeneratedDataset:
    """Write one label map per record and a manifest pointing at them.

    ``model`` is either a segmentation network or a patch predictor
    callable ``(image, box) -> (patch, rect) | None``. Per-image failures
    are logged and recorded; generation continues.
    """
    if out_dir is None:
        raise ValueError("out_dir is required")
    out_dir = Path(out_dir)
    name = name or f"{manifest.name}_s"
    if hasattr(model, "parameters"):
        predictor = model_predictor(model, factor, min_side)
    else:
        predictor = model

    stems = [Path(r.image_path).stem for r in manifest.records]
    unique = len(set(stems)) == len(stems)

    def work(rec: SampleRecord):
        stem = Path(rec.image_path).stem if unique else _safe(rec.id)
        path = out_dir / "labels" / f"{stem}.png"
        try:
            if rec.flags:
                raise FileNotFoundError(f"flagged record: {', '.join(rec.flags)}")
            image = pngio.read_image(manifest.resolve(rec.image_path))
            pngio.write_label_map(label_image(image, rec.boxes, predictor, policy).data, path)
            return rec, path, None
        except Exception as exc:  # noqa: BLE001 - logged and reported per image
            log.error("label generation failed for %s: %s", rec.id, exc)
            return rec, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, manifest.records))
    else:
        results = [work(rec) for rec in manifest.records]

    dataset = GeneratedDataset(name=name)
    records = []
    for rec, path, error in results:
        if error is not None:
            dataset.failures.append((rec.id, error))
            continue
        dataset.items.append((rec.id, str(path)))
        records.append(replace(rec, image_path=str(manifest.resolve(rec.image_path)),
                               gt_path=str(path.resolve())))
    generated = DatasetManifest(name=name, root=str(out_dir.resolve()), records=tuple(records),
                                filters={**manifest.filters, "mask_rule": "labelmap",
                                         "th1": policy.th1, "th2": policy.th2})
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(generated, manifest_path)
    dataset.manifest_path = str(manifest_path)
    return dataset


def _safe(record_id: str) -> str:
    return record_id.replace("/", "__").replace("\\", "__")
