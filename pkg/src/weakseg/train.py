"""Training loops for the background/foreground and scene-text networks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN
from weakseg.ingest import DatasetManifest, SynthCrop, load_pair
from weakseg.smanet import (
    IMAGE_MEAN,
    Checkpoint,
    NetworkSpec,
    build_network,
    normalize_image,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 281
    learning_rate: float = 1e-4
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25)
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    min_side: int = 185
    heldout_fraction: float = 0.1
    f1_floor: float = 0.0
    log_every: int = 50
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.crop_size <= 0:
            raise ValueError("crop_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be a non-empty list of positive ratios")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def bgfg(cls, **overrides) -> "TrainConfig":
        return cls(**{"crop_size": 185, **overrides})


def config_digest(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


# data -----------------------------------------------------------------------

def _resize_pair(image, label, size):
    img = np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))
    lab = np.asarray(Image.fromarray(label).resize(size, Image.NEAREST))
    return img, lab


def sample_training_crop(image: np.ndarray, label: np.ndarray, crop_size: int,
                         scales: Sequence[float], rng: np.random.Generator):
    """Random-scale, random-position crop of an image/label pair.

    Scaled images smaller than the crop are padded with the mean pixel and
    the label with UNCERTAIN, so padding never contributes to the loss.
    """
    if image.shape[:2] != label.shape:
        raise ValueError(f"image {image.shape[:2]} and label {label.shape} differ in size")
    height, width = label.shape
    scale = float(scales[rng.integers(len(scales))])
    size = (max(int(round(width * scale)), 1), max(int(round(height * scale)), 1))
    if scale != 1.0:
        image, label = _resize_pair(image, label, size)
    h, w = label.shape
    ph, pw = max(h, crop_size), max(w, crop_size)
    if (ph, pw) != (h, w):
        img = np.empty((ph, pw, 3), dtype=np.uint8)
        img[:] = np.round(np.array(IMAGE_MEAN) * 255).astype(np.uint8)
        img[:h, :w] = image
        lab = np.full((ph, pw), UNCERTAIN, dtype=np.uint8)
        lab[:h, :w] = label
        image, label = img, lab
    y = int(rng.integers(ph - crop_size + 1))
    x = int(rng.integers(pw - crop_size + 1))
    return image[y:y + crop_size, x:x + crop_size], label[y:y + crop_size, x:x + crop_size]


def resize_min_side(image: np.ndarray, label: np.ndarray, min_side: int):
    """Resize so the shorter side equals ``min_side``, keeping aspect ratio."""
    h, w = label.shape
    scale = min_side / min(h, w)
    size = (max(int(round(w * scale)), min_side), max(int(round(h * scale)), min_side))
    return _resize_pair(image, label, size)


class PairSource:
    """Indexable image/label pairs, from memory or lazily from a manifest."""

    def __init__(self, pairs=None, manifest: Optional[DatasetManifest] = None, cache: int = 64):
        if (pairs is None) == (manifest is None):
            raise ValueError("PairSource needs pairs or a manifest")
        self._pairs = list(pairs) if pairs is not None else None
        self.manifest = manifest
        if manifest is not None:
            self._records = [r for r in manifest.usable() if r.gt_path is not None]
            self._load = lru_cache(maxsize=cache)(lambda i: load_pair(manifest, self._records[i]))

    def __len__(self):
        return len(self._pairs) if self._pairs is not None else len(self._records)

    def __getitem__(self, i):
        if self._pairs is not None:
            return self._pairs[i]
        return self._load(i)


def as_source(data) -> PairSource:
    if isinstance(data, PairSource):
        return data
    if isinstance(data, DatasetManifest):
        return PairSource(manifest=data)
    return PairSource(pairs=data)


# loss -----------------------------------------------------------------------

def masked_loss(scores: torch.Tensor, label: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    """Mean cross-entropy over BACKGROUND/FOREGROUND pixels.

    UNCERTAIN pixels get zero loss and zero gradient. A label with no
    certain pixels yields 0.
    """
    label = torch.as_tensor(np.asarray(label) if not torch.is_tensor(label) else label)
    valid_codes = torch.tensor([BACKGROUND, FOREGROUND, UNCERTAIN], dtype=label.dtype)
    if not torch.isin(label, valid_codes).all():
        bad = sorted(set(label[~torch.isin(label, valid_codes)].tolist()))[:5]
        raise ValueError(f"label holds values outside {{0, 1, 255}}: {bad}")
    if scores.ndim == 3:
        scores = scores.unsqueeze(0)
    target = label.long()
    if target.ndim == 2:
        target = target.unsqueeze(0)
    count = (target != UNCERTAIN).sum()
    total = F.cross_entropy(scores, target, ignore_index=UNCERTAIN, reduction="sum")
    if count == 0:
        return total * 0.0
    return total / count


# loops ----------------------------------------------------------------------

def _batch(source: PairSource, config: TrainConfig, rng: np.random.Generator):
    imgs, labs = [], []
    for _ in range(config.batch_size):
        image, label = source[int(rng.integers(len(source)))]
        img, lab = sample_training_crop(image, label, config.crop_size, config.scales, rng)
        imgs.append(img)
        labs.append(lab)
    return normalize_image(np.stack(imgs)), torch.from_numpy(np.stack(labs).astype(np.int64))


def fit(model, source, config: TrainConfig, steps: int, rng: np.random.Generator,
        optimizer=None, on_step: Optional[Callable[[int, float], None]] = None,
        start_step: int = 0) -> List[float]:
    """Run ``steps`` Adam updates; returns the loss trace."""
    source = as_source(source)
    if len(source) == 0:
        raise ValueError("training set is empty")
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    trace = []
    for step in range(start_step, start_step + steps):
        x, y = _batch(source, config, rng)
        loss = masked_loss(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        trace.append(value)
        if on_step is not None:
            on_step(step, value)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = trace[-config.log_every:]
            log.info("step %d  loss %.4f", step + 1, sum(recent) / len(recent))
    model.eval()
    return trace


def _trace_writer(path):
    if path is None:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "a", encoding="utf-8")

    def write(step, loss):
        fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
        fh.flush()
    write.close = fh.close
    return write


def _state(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def prepare_bgfg_crops(crops: Sequence[SynthCrop], min_side: int):
    pairs = []
    for crop in crops:
        label = np.where(crop.mask > 0, FOREGROUND, BACKGROUND).astype(np.uint8)
        if min(label.shape) < 2:
            continue
        pairs.append(resize_min_side(crop.image, label, min_side))
    return pairs


def train_bgfg(config: TrainConfig, crops, spec: NetworkSpec, out_path=None,
               trace_path=None, encoder_weights: Optional[str] = None) -> Checkpoint:
    """Train the background/foreground network on synthetic word crops.

    Crops are resized to ``config.min_side`` on the shorter side; a held-out
    fraction is scored with pixel F1 after training.
    """
    from weakseg.evaluate import evaluate_pairs
    from weakseg.infer import InferencePolicy

    seed_everything(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    pairs = prepare_bgfg_crops(list(crops), config.min_side)
    if not pairs:
        raise ValueError("no usable synthetic crops")
    order = rng.permutation(len(pairs))
    n_held = int(math.floor(len(pairs) * config.heldout_fraction))
    held = [pairs[i] for i in order[:n_held]]
    train = [pairs[i] for i in order[n_held:]] or held

    model = build_network(spec, encoder_weights)
    writer = _trace_writer(trace_path)
    trace = fit(model, train, config, config.max_steps, rng, on_step=writer)
    if writer is not None:
        writer.close()

    metrics = {"final_loss": trace[-1] if trace else None}
    if held:
        policy = InferencePolicy(scales=(1.0,), window=config.crop_size,
                                 stride=max(config.crop_size // 2, 1))
        _, _, f1 = evaluate_pairs(model, held, policy)
        metrics["heldout_f1"] = f1
        if f1 < config.f1_floor:
            log.warning("held-out F1 %.4f below floor %.4f", f1, config.f1_floor)
    ckpt = Checkpoint(spec=spec, state_dict=_state(model), step=config.max_steps,
                      config_digest=config_digest(config.to_dict(), spec.to_dict()),
                      task="bgfg", metrics=metrics)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt


def parse_stages(text: str) -> List[Tuple[str, int]]:
    """``"synth:200k,coco_ts:100k"`` -> ``[("synth", 200000), ("coco_ts", 100000)]``."""
    stages = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, steps = part.partition(":")
        if not sep or not name:
            raise ValueError(f"stage {part!r} must look like NAME:STEPS")
        steps = steps.strip().lower()
        mult = {"k": 1000, "m": 1000000}.get(steps[-1:], 1)
        digits = steps[:-1] if mult != 1 else steps
        try:
            stages.append((name.strip(), int(float(digits) * mult)))
        except ValueError as exc:
            raise ValueError(f"stage {part!r}: bad step count") from exc
    return stages


def train_segmentation(config: TrainConfig, stages, spec: NetworkSpec, out_dir=None,
                       init: Optional[Checkpoint] = None,
                       encoder_weights: Optional[str] = None) -> Checkpoint:
    """Train through ``stages`` in order, carrying weights across stages.

    ``stages`` is a list of ``(name, data, steps)`` with ``data`` a manifest,
    a :class:`PairSource` or a list of ``(image, label)`` pairs. When
    ``out_dir`` is given, a checkpoint is written after every stage.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("at least one training stage is required")
    seed_everything(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    model = build_network(spec, None if init is not None else encoder_weights)
    if init is not None:
        model.load_state_dict(init.state_dict)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    digest = config_digest(config.to_dict(), spec.to_dict(),
                           [(name, steps) for name, _, steps in stages])
    writer = _trace_writer(Path(out_dir) / "loss.jsonl" if out_dir is not None else None)
    step = 0
    history = []
    ckpt = None
    try:
        for i, (name, data, steps) in enumerate(stages):
            log.info("stage %d: %s for %d steps", i + 1, name, steps)
            trace = fit(model, data, config, steps, rng, optimizer, on_step=writer, start_step=step)
            step += steps
            history.append({"stage": name, "steps": steps,
                            "final_loss": trace[-1] if trace else None})
            ckpt = Checkpoint(spec=spec, state_dict=_state(model), step=step,
                              config_digest=digest, task="seg",
                              metrics={"stages": list(history)})
            if out_dir is not None:
                save_checkpoint(ckpt, Path(out_dir) / f"stage{i + 1}_{name}.pt")
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "final.pt")
    return ckpt
