"""Independent per-pixel reference implementations used by the tests."""

import numpy as np
import torch

from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN, TextBox, enlarge_box


def eq1(p, th1=0.3, th2=0.7):
    if p < th1:
        return BACKGROUND
    if p > th2:
        return FOREGROUND
    return UNCERTAIN


def in_quad_int(cx2, cy2, quad2):
    """Even-odd test in doubled integer coordinates; edges count as inside."""
    inside = False
    for i in range(4):
        ax, ay = quad2[i]
        bx, by = quad2[(i + 1) % 4]
        cross = (bx - ax) * (cy2 - ay) - (by - ay) * (cx2 - ax)
        if cross == 0 and min(ax, bx) <= cx2 <= max(ax, bx) and min(ay, by) <= cy2 <= max(ay, by):
            return True
        if (ay > cy2) != (by > cy2):
            # cx2 < ax + (cy2 - ay) * (bx - ax) / (by - ay), without division
            lhs = (cx2 - ax) * (by - ay)
            rhs = (cy2 - ay) * (bx - ax)
            if (lhs < rhs) if by > ay else (lhs > rhs):
                inside = not inside
    return inside


def in_box(box: TextBox, x, y):
    if box.rect is not None:
        bx, by, bw, bh = box.rect
        return bx <= x < bx + bw and by <= y < by + bh
    quad2 = [(int(2 * px), int(2 * py)) for px, py in box.quad]
    return in_quad_int(2 * x + 1, 2 * y + 1, quad2)


def label_oracle(size, boxes, patches, th1=0.3, th2=0.7, factor=0.3):
    """max over qualifying enlarged boxes, then thresholds, then the override.

    ``patches`` maps each qualifying box to its probability patch over the
    enlarged rect.
    """
    width, height = size
    rects = {b: enlarge_box(b.bounds(), factor, size) for b in boxes if b.qualifies}
    out = np.zeros((height, width), dtype=np.uint8)
    for y in range(height):
        for x in range(width):
            vals = [patches[b][y - ry, x - rx] for b, (rx, ry, rw, rh) in rects.items()
                    if rx <= x < rx + rw and ry <= y < ry + rh]
            label = eq1(max(vals), th1, th2) if vals else BACKGROUND
            if any(not b.qualifies and in_box(b, x, y) for b in boxes):
                label = UNCERTAIN
            out[y, x] = label
    return out


LEVELS = np.arange(21) / 20.0  # includes 0.3 and 0.7 exactly


def random_instance(rng, size=(32, 32), max_boxes=4):
    """Random boxes (rects and integer quads) with quantized patches."""
    width, height = size
    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        attrs = dict(legible=bool(rng.random() < 0.85), machine_printed=bool(rng.random() < 0.9),
                     script=str(rng.choice(["latin", "latin", "latin", "non_latin", "unknown"])))
        if rng.random() < 0.6:
            w, h = int(rng.integers(1, 16)), int(rng.integers(1, 12))
            x, y = int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1))
            box = TextBox(rect=(x, y, w, h), **attrs)
        else:
            while True:
                pts = rng.integers(0, 32, size=(4, 2))
                area = 0.5 * sum(pts[i, 0] * pts[(i + 1) % 4, 1] - pts[(i + 1) % 4, 0] * pts[i, 1]
                                 for i in range(4))
                if area != 0:
                    break
            box = TextBox(quad=tuple(map(tuple, pts.tolist())), **attrs)
        if box not in boxes:
            boxes.append(box)
    patches = {}
    for b in boxes:
        if b.qualifies:
            _, _, w, h = enlarge_box(b.bounds(), 0.3, size)
            patches[b] = rng.choice(LEVELS, size=(h, w))
    return boxes, patches


def table_predictor(patches, size, factor=0.3):
    def predict(image, box):
        return patches[box], enlarge_box(box.bounds(), factor, size)
    return predict


class ConstantModel(torch.nn.Module):
    """Emits the same two logits at every pixel."""

    def __init__(self, bg=0.0, fg=0.0):
        super().__init__()
        self.logits = torch.tensor([bg, fg], dtype=torch.float32)

    def forward(self, x):
        n, _, h, w = x.shape
        return self.logits.view(1, 2, 1, 1).expand(n, 2, h, w).clone()


def finite_difference_error(fn, params, eps=1e-6):
    """Relative error between autograd and central differences for scalar ``fn``."""
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn().item()
                flat[i] = orig - eps
                minus = fn().item()
                flat[i] = orig
                numeric.append((plus - minus) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale
