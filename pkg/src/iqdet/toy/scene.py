"""Synthetic 64x64 detection scenes with two textured shape classes.

Class 0 is a filled rectangle with a horizontal intensity ramp; class 1 is
an elliptical ring inscribed in its box.  Shapes are rendered by 4x4
supersampled coverage, so each annotation box is the exact continuous
extent of its shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Box, iou_matrix

IMAGE_SIZE = 64
NUM_CLASSES = 2
_SUPER = 4


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray  # (1, 64, 64) in [0, 1]
    boxes: tuple[Box, ...]
    classes: tuple[int, ...]
    seed: object


def _render(kind: int, box: Box, size: int, rng: np.random.Generator) -> np.ndarray:
    """Intensity contribution of one shape (zero outside the box)."""
    s = _SUPER
    coords = (np.arange(size * s) + 0.5) / s
    xx, yy = np.meshgrid(coords, coords)
    cx, cy = box.center
    rx, ry = 0.5 * box.width, 0.5 * box.height
    if kind == 0:
        cover = (xx >= box.x1) & (xx < box.x2) & (yy >= box.y1) & (yy < box.y2)
        lo, hi = rng.uniform(0.35, 0.6), rng.uniform(0.85, 1.0)
        ramp = lo + (hi - lo) * np.clip((xx - box.x1) / box.width, 0.0, 1.0)
        val = cover * ramp
    else:
        thick = rng.uniform(2.0, 3.5)
        outer = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        irx, iry = max(rx - thick, 0.5), max(ry - thick, 0.5)
        inner = ((xx - cx) / irx) ** 2 + ((yy - cy) / iry) ** 2 < 1.0
        val = (outer & ~inner) * rng.uniform(0.8, 1.0)
    return val.reshape(size, s, size, s).mean(axis=(1, 3))


def generate_scene(seed, size: int = IMAGE_SIZE) -> SyntheticScene:
    """Deterministic scene for ``seed`` (an int or a sequence of ints)."""
    rng = np.random.default_rng(seed)
    n_target = int(rng.integers(1, 5))
    boxes: list[Box] = []
    classes: list[int] = []
    attempts = 0
    while len(boxes) < n_target and attempts < 50:
        attempts += 1
        w = float(rng.integers(10, 41))
        aspect = rng.choice([0.4, 0.6, 1.0, 1.6, 2.5])
        h = float(np.clip(round(w / aspect), 10, 40))
        x1 = float(rng.integers(0, size - int(w) + 1))
        y1 = float(rng.integers(0, size - int(h) + 1))
        cand = Box(x1, y1, x1 + w, y1 + h)
        # shapes must not overlap so every box matches its rendered pixels
        if boxes and iou_matrix(cand.as_array(), np.stack([b.as_array() for b in boxes])).max() > 0:
            continue
        boxes.append(cand)
        classes.append(int(rng.integers(0, NUM_CLASSES)))
    if not boxes:
        boxes.append(Box(16.0, 16.0, 48.0, 48.0))
        classes.append(0)
    image = rng.uniform(0.0, 0.08, size=(size, size))
    for kind, box in zip(classes, boxes):
        shape = _render(kind, box, size, rng)
        image = np.where(shape > 0, np.maximum(image, shape), image)
    return SyntheticScene(np.clip(image, 0.0, 1.0)[None], tuple(boxes), tuple(classes), seed)
