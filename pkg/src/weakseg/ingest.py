"""Dataset readers producing a uniform manifest of samples.

Manifest on-disk format (UTF-8 JSON lines). The first line is a header::

    {"manifest": NAME, "root": ROOT, "filters": {...}}

followed by one record per line, with fields in this order::

    {"id": str, "image_path": str, "gt_path": str | null, "split": str,
     "flags": [str, ...], "boxes": [TextBox dict, ...]}

TextBox dicts hold ``rect`` ([x, y, w, h]) or ``quad`` ([[x, y] x 4]),
then ``legible``, ``machine_printed``, ``script`` and ``transcription``.
Relative paths are resolved against ``root``; ``root`` itself is written
relative to the manifest file and read back as an absolute path.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, List, Optional

import numpy as np
from PIL import Image

from weakseg import pngio
from weakseg.core import GeometryError, TextBox, enlarge_box

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

MLT_LATIN = {"latin"}
MLT_UNKNOWN = {"none", "mixed", "symbols", ""}


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    boxes: tuple = ()
    gt_path: Optional[str] = None
    split: str = "train"
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "gt_path": self.gt_path,
            "split": self.split,
            "flags": list(self.flags),
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            id=str(d["id"]),
            image_path=d["image_path"],
            gt_path=d.get("gt_path"),
            split=d.get("split", "train"),
            flags=tuple(d.get("flags", ())),
            boxes=tuple(TextBox.from_dict(b) for b in d.get("boxes", ())),
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    root: str
    records: tuple = ()
    filters: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise AnnotationError(f"duplicate record ids in manifest {self.name}: {dupes}")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def split(self, name: str) -> "DatasetManifest":
        return replace(self, records=tuple(r for r in self.records if r.split == name))

    def usable(self) -> List[SampleRecord]:
        return [r for r in self.records if not r.flags]


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = os.path.relpath(Path(manifest.root).resolve(), path.parent.resolve())
    with open(path, "w", encoding="utf-8") as fh:
        header = {"manifest": manifest.name, "root": root, "filters": manifest.filters}
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise AnnotationError(f"{path}: empty manifest file")
    header = json.loads(lines[0])
    if "manifest" not in header:
        raise AnnotationError(f"{path}: missing manifest header line")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(SampleRecord.from_dict(json.loads(line)))
        except (KeyError, ValueError, TypeError) as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
    return DatasetManifest(
        name=header["manifest"],
        root=str((path.parent / header.get("root", ".")).resolve()),
        records=tuple(records),
        filters=header.get("filters", {}),
    )


def _flags_for(path: Path) -> tuple:
    return () if path.exists() else ("missing_image",)


# COCO-Text ------------------------------------------------------------------

_COCO_SPLIT = {"train": "train", "val": "val", "test": "test"}


def _coco_script(language) -> str:
    if language is None:
        return "unknown"
    language = str(language).strip().lower()
    if language == "english":
        return "latin"
    if language in ("not english", "non english", "non-english"):
        return "non_latin"
    return "unknown"


def load_cocotext(annotation_file, image_root) -> DatasetManifest:
    """Read a COCO-Text annotation file (``imgs`` / ``anns`` structure)."""
    annotation_file = Path(annotation_file)
    text = annotation_file.read_text(encoding="utf-8").strip()
    if not text:
        return DatasetManifest(name="cocotext", root=str(image_root))
    data = json.loads(text)
    imgs = data.get("imgs", {})
    by_image = {str(k): [] for k in imgs}
    for ann_id, ann in data.get("anns", {}).items():
        img_id = str(ann.get("image_id"))
        try:
            x, y, w, h = ann["bbox"]
            box = TextBox(
                rect=(int(round(x)), int(round(y)), max(int(round(w)), 1), max(int(round(h)), 1)),
                legible=ann.get("legibility", "legible") == "legible",
                machine_printed=ann.get("class", "machine printed") == "machine printed",
                script=_coco_script(ann.get("language")),
                transcription=ann.get("utf8_string"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"annotation {ann_id} (image {img_id}): {exc}") from exc
        by_image.setdefault(img_id, []).append(box)

    root = Path(image_root)
    records = []
    for img_id in sorted(by_image, key=lambda s: (len(s), s)):
        info = imgs.get(img_id)
        if info is None:
            raise AnnotationError(f"annotation references unknown image {img_id}")
        rel = info["file_name"]
        records.append(SampleRecord(
            id=img_id,
            image_path=rel,
            boxes=tuple(by_image[img_id]),
            split=_COCO_SPLIT.get(info.get("set", "train"), "train"),
            flags=_flags_for(root / rel),
        ))
    return DatasetManifest(name="cocotext", root=str(root), records=tuple(records))


# MLT ------------------------------------------------------------------------

def mlt_script(language: str) -> str:
    language = language.strip().lower()
    if language in MLT_LATIN:
        return "latin"
    if language in MLT_UNKNOWN:
        return "unknown"
    return "non_latin"


def parse_mlt_line(line: str, where: str) -> TextBox:
    parts = line.rstrip("\r\n").split(",", 9)
    if len(parts) < 9:
        raise AnnotationError(f"{where}: expected 8 coordinates and a language")
    try:
        coords = [float(v) for v in parts[:8]]
        transcription = parts[9] if len(parts) > 9 else ""
        return TextBox(
            quad=tuple(zip(coords[0::2], coords[1::2])),
            legible=transcription.strip() != "###",
            machine_printed=True,
            script=mlt_script(parts[8]),
            transcription=transcription,
        )
    except (ValueError, GeometryError) as exc:
        raise AnnotationError(f"{where}: {exc}") from exc


def load_mlt(gt_directory, image_root, split: str = "train") -> DatasetManifest:
    """Read MLT per-image ``gt_<stem>.txt`` files (quad, language, text)."""
    gt_directory, image_root = Path(gt_directory), Path(image_root)
    records = []
    for gt_file in sorted(gt_directory.glob("*.txt")):
        stem = gt_file.stem[3:] if gt_file.stem.startswith("gt_") else gt_file.stem
        boxes = []
        with open(gt_file, encoding="utf-8-sig") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    boxes.append(parse_mlt_line(line, f"{gt_file}:{lineno}"))
        image = pngio.find_by_stem(image_root, stem)
        rel = image.name if image is not None else f"{stem}.jpg"
        records.append(SampleRecord(
            id=stem, image_path=rel, boxes=tuple(boxes), split=split,
            flags=() if image is not None else ("missing_image",),
        ))
    return DatasetManifest(name="mlt", root=str(image_root), records=tuple(records))


# pixel-level datasets -------------------------------------------------------

PIXEL_KINDS = {
    "icdar2013": "nonzero",
    "totaltext": "nonzero",
    "synthetic": "nonzero",
}


def load_word_boxes(path) -> dict:
    """``words.json``: {image stem: [TextBox dict, ...]}."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {stem: [TextBox.from_dict(b) for b in boxes] for stem, boxes in data.items()}


def load_pixel_gt_dataset(kind: str, root, check_sizes: bool = True) -> DatasetManifest:
    """Read a dataset laid out as ``root/<split>/{images,masks}/``.

    Masks are matched to images by stem (``stem``, ``stem_GT``, ``gt_stem``).
    The synthetic kind additionally reads word boxes from
    ``root/<split>/words.json``.
    """
    if kind not in PIXEL_KINDS:
        raise ValueError(f"unknown pixel dataset kind {kind!r}")
    root = Path(root)
    records = []
    for split in SPLITS:
        image_dir = root / split / "images"
        if not image_dir.is_dir():
            continue
        words = {}
        if (root / split / "words.json").exists():
            words = load_word_boxes(root / split / "words.json")
        for image in pngio.list_images(image_dir):
            mask = pngio.find_by_stem(root / split / "masks", image.stem)
            flags = () if mask is not None else ("missing_mask",)
            if mask is not None and check_sizes:
                with Image.open(image) as a, Image.open(mask) as b:
                    if a.size != b.size:
                        raise AnnotationError(
                            f"{image.name}: mask size {b.size} != image size {a.size}")
            records.append(SampleRecord(
                id=f"{split}/{image.stem}",
                image_path=str(image.relative_to(root)),
                gt_path=str(mask.relative_to(root)) if mask is not None else None,
                split=split,
                boxes=tuple(words.get(image.stem, ())),
                flags=flags,
            ))
    return DatasetManifest(name=kind, root=str(root), records=tuple(records),
                           filters={"mask_rule": PIXEL_KINDS[kind]})


# selection and crops --------------------------------------------------------

def qualifying(box: TextBox) -> bool:
    return box.qualifies


def has_any_box(box: TextBox) -> bool:
    return True


PREDICATES = {"qualifying": qualifying, "any": has_any_box}


def select_images(manifest: DatasetManifest, predicate: Callable[[TextBox], bool] = qualifying,
                  name: Optional[str] = None) -> DatasetManifest:
    """Keep records with at least one box satisfying ``predicate``.

    Boxes are never removed; failing boxes stay so they can be routed to
    the uncertainty region later.
    """
    kept = tuple(r for r in manifest.records if any(predicate(b) for b in r.boxes))
    filters = dict(manifest.filters)
    filters["select"] = getattr(predicate, "__name__", "custom")
    return replace(manifest, name=name or manifest.name, records=kept, filters=filters)


@dataclass(frozen=True)
class SynthCrop:
    record_id: str
    box_index: int
    rect: tuple
    image: np.ndarray
    mask: np.ndarray


def extract_synth_crops(manifest: DatasetManifest, factor: float = 0.3) -> Iterator[SynthCrop]:
    """Yield one image/mask crop per word box, over the enlarged box."""
    rule = manifest.filters.get("mask_rule", "nonzero")
    for rec in manifest.usable():
        if rec.gt_path is None:
            raise AnnotationError(f"{rec.id}: synthetic record has no pixel mask")
        image = pngio.read_image(manifest.resolve(rec.image_path))
        mask = pngio.read_mask(manifest.resolve(rec.gt_path), rule)
        height, width = mask.shape
        for i, box in enumerate(rec.boxes):
            try:
                x, y, w, h = enlarge_box(box.bounds(), factor, (width, height))
            except GeometryError as exc:
                log.warning("%s box %d skipped: %s", rec.id, i, exc)
                continue
            yield SynthCrop(rec.id, i, (x, y, w, h),
                            image[y:y + h, x:x + w].copy(), mask[y:y + h, x:x + w].copy())


def training_split(manifest: DatasetManifest) -> DatasetManifest:
    """The train split when the manifest has one, otherwise every record."""
    if any(r.split == "train" for r in manifest.records):
        return manifest.split("train")
    return manifest


def load_pair(manifest: DatasetManifest, rec: SampleRecord):
    """Image and {0, 1, 255} label array for a record with pixel ground truth."""
    if rec.gt_path is None:
        raise AnnotationError(f"{rec.id}: record has no pixel ground truth")
    image = pngio.read_image(manifest.resolve(rec.image_path))
    rule = manifest.filters.get("mask_rule", "nonzero")
    gt_path = manifest.resolve(rec.gt_path)
    if rule == "labelmap":
        label = pngio.read_label_map(gt_path)
    else:
        label = pngio.read_mask(gt_path, rule)
    if label.shape != image.shape[:2]:
        raise AnnotationError(f"{rec.id}: ground truth {label.shape} != image {image.shape[:2]}")
    return image, label
