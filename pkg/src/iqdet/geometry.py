"""Boxes, IoU, normalized in-box offsets and pyramid bookkeeping.

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous image pixels.
Areas are continuous (``w * h``), not pixel counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an input violates an operation's domain."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DomainError(f"non-finite box {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DomainError(f"degenerate box {coords}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise DomainError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def contains(self, x: float, y: float, strict: bool = False) -> bool:
        """Point-in-box test; edges count as inside unless ``strict``."""
        if strict:
            return self.x1 < x < self.x2 and self.y1 < y < self.y2
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner-form arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou_rows(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Row-aligned IoU: ``out[i] = iou(a[i], b[i])``."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def normalize_offset(point: Sequence[float], gt: Box) -> tuple[float, float]:
    """Map an image point to the GT-normalized frame: center -> (0, 0), edges -> +-1."""
    cx, cy = gt.center
    return ((point[0] - cx) / (0.5 * gt.width), (point[1] - cy) / (0.5 * gt.height))


def denormalize_offset(offset: Sequence[float], gt: Box) -> tuple[float, float]:
    cx, cy = gt.center
    return (cx + offset[0] * 0.5 * gt.width, cy + offset[1] * 0.5 * gt.height)


def normalize_offsets(points: np.ndarray, gt: Box) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cx, cy = gt.center
    half = np.array([0.5 * gt.width, 0.5 * gt.height])
    return (pts - np.array([cx, cy])) / half


def denormalize_offsets(offsets: np.ndarray, gt: Box) -> np.ndarray:
    d = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    cx, cy = gt.center
    half = np.array([0.5 * gt.width, 0.5 * gt.height])
    return np.array([cx, cy]) + d * half


def regression_target(point: Sequence[float], gt: Box, stride: float) -> tuple[float, float, float, float]:
    """Stride-normalized ``(l, t, r, b)`` distances from an interior point to the GT edges."""
    x, y = float(point[0]), float(point[1])
    if not gt.contains(x, y, strict=True):
        raise DomainError(f"point {(x, y)} is not strictly inside {gt.to_list()}")
    return ((x - gt.x1) / stride, (y - gt.y1) / stride, (gt.x2 - x) / stride, (gt.y2 - y) / stride)


def regression_targets(points: np.ndarray, gt: Box, strides) -> np.ndarray:
    """Vectorized :func:`regression_target`; ``strides`` is scalar or per point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = np.broadcast_to(np.asarray(strides, dtype=np.float64), (len(pts),))
    out = np.stack(
        [pts[:, 0] - gt.x1, pts[:, 1] - gt.y1, gt.x2 - pts[:, 0], gt.y2 - pts[:, 1]], axis=1
    ) / s[:, None]
    if len(out) and not np.all(out > 0):
        raise DomainError("regression target requested for a point outside its GT")
    return out


def decode_box(point: Sequence[float], dists: Sequence[float], stride: float) -> Box:
    l, t, r, b = (float(v) for v in dists)
    if min(l, t, r, b) <= 0:
        raise DomainError(f"nonpositive distances {(l, t, r, b)}")
    x, y = float(point[0]), float(point[1])
    return Box(x - l * stride, y - t * stride, x + r * stride, y + b * stride)


def decode_boxes(points: np.ndarray, dists: np.ndarray, strides) -> np.ndarray:
    """Vectorized :func:`decode_box` returning an ``(N, 4)`` array (no validation)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(dists, dtype=np.float64).reshape(-1, 4)
    s = np.broadcast_to(np.asarray(strides, dtype=np.float64), (len(pts),))[:, None]
    return np.concatenate([pts - d[:, :2] * s, pts + d[:, 2:] * s], axis=1)


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.levels:
            raise DomainError("pyramid needs at least one level")
        strides = [s for _, s in self.levels]
        names = [n for n, _ in self.levels]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate level names {names}")
        for s in strides:
            if s < 1 or (s & (s - 1)) != 0:
                raise DomainError(f"stride {s} is not a power of two")
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise DomainError(f"strides must be strictly increasing: {strides}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "PyramidSpec":
        return cls(tuple((str(n), int(s)) for n, s in pairs))

    @classmethod
    def parse(cls, text: str) -> "PyramidSpec":
        """Parse ``"P3:8,P4:16"``."""
        pairs = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            name, _, stride = part.partition(":")
            if not stride:
                raise DomainError(f"bad level spec {part!r}")
            pairs.append((name.strip(), int(stride)))
        return cls.from_pairs(pairs)

    @property
    def strides(self) -> list[int]:
        return [s for _, s in self.levels]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.levels]

    def __len__(self) -> int:
        return len(self.levels)

    def format(self) -> str:
        return ",".join(f"{n}:{s}" for n, s in self.levels)
