"""Tiny synthetic scene-text fixture used by the smoke pipeline and tests.

Layout written under ``out_dir``::

    synthetic/{train,test}/images/NNN.png      rendered scenes
    synthetic/{train,test}/masks/NNN.png       binary text masks (0/255)
    synthetic/{train,test}/words.json          word boxes per image stem
    cocotext.json                              COCO-Text style boxes
    mlt_gt/gt_NNN.txt                          MLT style quads
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

WORDS = ("SALE", "OPEN", "EXIT", "STOP", "CAFE", "BAR", "HOTEL", "TAXI", "BUS", "PARK",
         "ROAD", "INN", "SHOP", "BANK", "ZOO", "GYM")

SIZE = (112, 96)
N_TRAIN = 6
N_TEST = 2


def _background(rng, size):
    width, height = size
    base = rng.integers(0, 256, size=3)
    other = rng.integers(0, 256, size=3)
    t = np.linspace(0, 1, width)[None, :, None]
    img = base[None, None, :] * (1 - t) + other[None, None, :] * t
    img = np.repeat(img, height, axis=0)
    img = img + rng.normal(0, 6, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _contrast_color(rng, patch):
    mean = patch.reshape(-1, 3).mean(axis=0)
    if mean.mean() > 128:
        return tuple(int(v) for v in rng.integers(0, 70, size=3))
    return tuple(int(v) for v in rng.integers(190, 256, size=3))


def render_scene(rng, font, n_words):
    """Render ``n_words`` non-overlapping words; returns image, mask, boxes."""
    width, height = SIZE
    img = Image.fromarray(_background(rng, SIZE))
    draw = ImageDraw.Draw(img)
    # distractor rectangles give the background some structure
    for _ in range(2):
        x0, y0 = rng.integers(0, width - 20), rng.integers(0, height - 20)
        w, h = rng.integers(8, 30), rng.integers(8, 30)
        draw.rectangle([x0, y0, x0 + w, y0 + h], outline=tuple(int(v) for v in rng.integers(0, 256, 3)))
    mask = Image.new("L", SIZE, 0)
    mdraw = ImageDraw.Draw(mask)
    boxes = []
    taken = np.zeros((height, width), dtype=bool)
    tries = 0
    while len(boxes) < n_words and tries < 200:
        tries += 1
        word = WORDS[int(rng.integers(len(WORDS)))]
        l, t, r, b = font.getbbox(word)
        tw, th = r - l, b - t
        if tw + 4 >= width or th + 4 >= height:
            continue
        x = int(rng.integers(2, width - tw - 2)) - l
        y = int(rng.integers(2, height - th - 2)) - t
        x0, y0 = x + l, y + t
        if taken[max(y0 - 3, 0):y0 + th + 3, max(x0 - 3, 0):x0 + tw + 3].any():
            continue
        taken[y0:y0 + th, x0:x0 + tw] = True
        color = _contrast_color(rng, np.asarray(img)[y0:y0 + th, x0:x0 + tw])
        draw.text((x, y), word, font=font, fill=color)
        mdraw.text((x, y), word, font=font, fill=255)
        boxes.append({"rect": [x0, y0, tw, th], "transcription": word})
    mask = (np.asarray(mask) > 127).astype(np.uint8) * 255
    return np.asarray(img), mask, boxes


def make_fixture(out_dir, seed: int = 7) -> Path:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    font = ImageFont.load_default(size=20)
    coco = {"imgs": {}, "anns": {}, "imgToAnns": {}}
    ann_id = 0
    (out_dir / "mlt_gt").mkdir(parents=True, exist_ok=True)
    index = 0
    for split, count in (("train", N_TRAIN), ("test", N_TEST)):
        split_dir = out_dir / "synthetic" / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "masks").mkdir(parents=True, exist_ok=True)
        words = {}
        for _ in range(count):
            stem = f"{index:03d}"
            image, mask, boxes = render_scene(rng, font, n_words=int(rng.integers(2, 4)))
            Image.fromarray(image).save(split_dir / "images" / f"{stem}.png")
            Image.fromarray(mask).save(split_dir / "masks" / f"{stem}.png")
            words[stem] = [{**b, "legible": True, "machine_printed": True, "script": "latin"}
                           for b in boxes]

            img_id = str(index + 1)
            coco["imgs"][img_id] = {"id": index + 1, "file_name": f"synthetic/{split}/images/{stem}.png",
                                    "width": SIZE[0], "height": SIZE[1], "set": split}
            coco["imgToAnns"][img_id] = []
            mlt_lines = []
            for j, b in enumerate(boxes):
                ann_id += 1
                # every third image carries one box that must become uncertain
                odd = index % 3 == 2 and j == len(boxes) - 1
                coco["anns"][str(ann_id)] = {
                    "id": ann_id, "image_id": index + 1, "bbox": b["rect"],
                    "legibility": "legible", "class": "machine printed",
                    "language": "not english" if odd else "english",
                    "utf8_string": b["transcription"],
                }
                coco["imgToAnns"][img_id].append(ann_id)
                x, y, w, h = b["rect"]
                quad = [x, y, x + w, y, x + w, y + h, x, y + h]
                lang = "Arabic" if odd else "Latin"
                mlt_lines.append(",".join(str(v) for v in quad) + f",{lang},{b['transcription']}")
            if split == "train":
                (out_dir / "mlt_gt" / f"gt_{stem}.txt").write_text("\n".join(mlt_lines) + "\n",
                                                                   encoding="utf-8")
            index += 1
        (split_dir / "words.json").write_text(json.dumps(words, indent=1), encoding="utf-8")
    (out_dir / "cocotext.json").write_text(json.dumps(coco, indent=1), encoding="utf-8")
    return out_dir
