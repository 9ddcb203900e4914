"""PNG readers and writers for label maps, masks and probability maps.

Label maps are stored as indexed PNGs with a three-entry palette::

    index 0  (0, 0, 0)      background
    index 1  (255, 0, 0)    foreground
    index 2  (255, 255, 0)  uncertain

Binary predictions use the first two entries only. Probability maps are
16-bit grayscale with value ``round(prob * 65535)``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN, validate_labels

PALETTE = (
    (0, 0, 0),
    (255, 0, 0),
    (255, 255, 0),
)
LABEL_PALETTE_BYTES = bytes(c for rgb in PALETTE for c in rgb)
BINARY_PALETTE_BYTES = LABEL_PALETTE_BYTES[:6]

_CODE_TO_INDEX = np.zeros(256, dtype=np.uint8)
_CODE_TO_INDEX[FOREGROUND] = 1
_CODE_TO_INDEX[UNCERTAIN] = 2
_INDEX_TO_CODE = np.array([BACKGROUND, FOREGROUND, UNCERTAIN], dtype=np.uint8)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")


def _save(img: Image.Image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def write_label_map(labels: np.ndarray, path) -> None:
    labels = validate_labels(labels)
    img = Image.fromarray(_CODE_TO_INDEX[labels], mode="P")
    img.putpalette(LABEL_PALETTE_BYTES)
    _save(img, path)


def write_binary_mask(mask: np.ndarray, path) -> None:
    img = Image.fromarray(np.asarray(mask).astype(bool).astype(np.uint8), mode="P")
    img.putpalette(BINARY_PALETTE_BYTES)
    _save(img, path)


def write_probability_map(prob: np.ndarray, path) -> None:
    prob = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(prob * 65535).astype(np.uint16))
    _save(img, path)


def read_probability_map(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 65535.0


def palette_bytes(path) -> bytes:
    with Image.open(path) as img:
        pal = img.getpalette() or []
    return bytes(pal)


def read_label_map(path) -> np.ndarray:
    """Read a label map written by :func:`write_label_map`."""
    with Image.open(path) as img:
        if img.mode != "P":
            raise ValueError(f"{path}: expected an indexed PNG, got mode {img.mode}")
        idx = np.asarray(img)
    if idx.max(initial=0) > 2:
        raise ValueError(f"{path}: palette index out of range")
    return _INDEX_TO_CODE[idx]


def read_mask(path, rule: str = "nonzero") -> np.ndarray:
    """Read any ground-truth mask image as {BACKGROUND, FOREGROUND, UNCERTAIN}.

    Indexed PNGs using the label palette keep their three classes. Other
    images are binarized: ``nonzero`` marks any non-black pixel as text,
    ``nonwhite`` marks any non-white pixel (for masks drawn on white).
    """
    with Image.open(path) as img:
        if img.mode == "P" and bytes(img.getpalette()[:6]) == BINARY_PALETTE_BYTES:
            idx = np.asarray(img)
            if idx.max(initial=0) <= 2:
                return _INDEX_TO_CODE[idx]
        arr = np.asarray(img.convert("RGB"))
    if rule == "nonzero":
        fg = arr.max(axis=2) > 0
    elif rule == "nonwhite":
        fg = arr.min(axis=2) < 255
    else:
        raise ValueError(f"unknown mask rule {rule!r}")
    return np.where(fg, FOREGROUND, BACKGROUND).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_image(arr: np.ndarray, path) -> None:
    _save(Image.fromarray(np.asarray(arr, dtype=np.uint8)), path)


def list_images(directory) -> list:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def find_by_stem(directory, stem: str):
    """Locate an image in ``directory`` named after ``stem``.

    Tries the common ground-truth naming patterns (``stem``, ``stem_GT``,
    ``gt_stem``) with any image suffix.
    """
    directory = Path(directory)
    for name in (stem, f"{stem}_GT", f"gt_{stem}", f"{stem}_gt"):
        for suffix in IMAGE_SUFFIXES + tuple(s.upper() for s in IMAGE_SUFFIXES):
            candidate = directory / f"{name}{suffix}"
            if candidate.exists():
                return candidate
    return None
