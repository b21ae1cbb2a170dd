"""Quality-distribution sampling and soft label assignment.

For every GT and every pyramid level, offsets are drawn from that level's
quality GMM and mapped into the box.  Across levels only the ``k_s`` draws
with the largest quality values stay positive; each keeps its quality as a
soft classification target.  Grid cells whose centres fall outside every GT
are negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import qdist
from .geometry import Box, DomainError, PyramidSpec, decode_boxes, iou_rows, regression_targets
from .gridops import cell_centers, stencils

log = logging.getLogger(__name__)

DIST_FLOOR = 1e-3


@dataclass
class SampleSet:
    instance: np.ndarray  # (N,) int
    level: np.ndarray  # (N,) int
    draw: np.ndarray  # (N,) int, index within its (instance, level) draw
    points: np.ndarray  # (N, 2) image pixels
    offsets: np.ndarray  # (N, 2) normalized
    quality: np.ndarray  # (N,)
    stencil_index: np.ndarray  # (N, 4) flat cell index on the sample's level
    stencil_weight: np.ndarray  # (N, 4)

    def __len__(self) -> int:
        return len(self.quality)

    def take(self, idx) -> "SampleSet":
        return SampleSet(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(
            instance=np.zeros(0, dtype=np.int64), level=np.zeros(0, dtype=np.int64),
            draw=np.zeros(0, dtype=np.int64), points=np.zeros((0, 2)), offsets=np.zeros((0, 2)),
            quality=np.zeros(0), stencil_index=np.zeros((0, 4), dtype=np.int64),
            stencil_weight=np.zeros((0, 4)),
        )

    @classmethod
    def concat(cls, parts: list["SampleSet"]) -> "SampleSet":
        if not parts:
            return cls.empty()
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})


@dataclass
class AssignmentResult:
    positives: SampleSet
    classes: np.ndarray  # (N,) class id of each positive
    cls_target: np.ndarray  # (N,)
    reg_target: np.ndarray  # (N, 4) stride units
    negatives: list[np.ndarray]  # per level (H, W) bool
    gmms: list[list[qdist.QualityGMM]] = field(default_factory=list)  # [instance][level]

    @property
    def num_positives(self) -> int:
        return len(self.positives)


def _sample_stencils(points: np.ndarray, hw, stride):
    h, w = hw
    xs = np.clip(points[:, 0], 0.0, w * stride)
    ys = np.clip(points[:, 1], 0.0, h * stride)
    idx, wt, _, _ = stencils(h, w, stride, xs, ys, check=False)
    return idx, wt


def build_candidates(gt: Box, gmms, pyramid: PyramidSpec, draws_per_level: int, rng: np.random.Generator,
                     grid_shapes, instance_id: int = 0) -> SampleSet:
    """Draw ``draws_per_level`` floating-point candidates on every level."""
    if len(gmms) != len(pyramid):
        raise DomainError(f"need one GMM per level, got {len(gmms)} for {len(pyramid)} levels")
    if all(gt.width < s and gt.height < s for s in pyramid.strides):
        log.warning("GT %s is smaller than one cell on every level", gt.to_list())
    parts = []
    cx, cy = gt.center
    half = np.array([0.5 * gt.width, 0.5 * gt.height])
    for lvl, (gmm, stride, hw) in enumerate(zip(gmms, pyramid.strides, grid_shapes)):
        d, q = qdist.sample_offsets(gmm, draws_per_level, rng=rng)
        pts = np.array([cx, cy]) + d * half
        idx, wt = _sample_stencils(pts, hw, stride)
        n = len(q)
        parts.append(SampleSet(
            instance=np.full(n, instance_id, dtype=np.int64), level=np.full(n, lvl, dtype=np.int64),
            draw=np.arange(n, dtype=np.int64), points=pts, offsets=d, quality=q,
            stencil_index=idx, stencil_weight=wt,
        ))
    return SampleSet.concat(parts)


def select_topk(candidates: SampleSet, k_s: int) -> SampleSet:
    """Keep the ``k_s`` highest-quality candidates; ties go to (level, draw) ascending."""
    if k_s < 1:
        raise DomainError("k_s must be >= 1")
    order = np.lexsort((candidates.draw, candidates.level, -candidates.quality))
    return candidates.take(order[:k_s])


def soft_targets(selected: SampleSet, gts, pyramid: PyramidSpec):
    """Classification targets (the quality values) and stride-normalized regression targets."""
    if len(selected) == 0:
        raise DomainError("no samples selected")
    strides = np.asarray(pyramid.strides, dtype=np.float64)[selected.level]
    reg = np.zeros((len(selected), 4))
    for inst in np.unique(selected.instance):
        m = selected.instance == inst
        reg[m] = regression_targets(selected.points[m], gts[inst], strides[m])
    return selected.quality.copy(), reg


def negative_mask(gts, h: int, w: int, stride: float) -> np.ndarray:
    """True where a cell centre lies outside every GT (edges count as inside)."""
    centers = cell_centers(h, w, stride)
    inside = np.zeros(len(centers), dtype=bool)
    for gt in gts:
        inside |= ((centers[:, 0] >= gt.x1) & (centers[:, 0] <= gt.x2)
                   & (centers[:, 1] >= gt.y1) & (centers[:, 1] <= gt.y2))
    return (~inside).reshape(h, w)


def cells_in_box(gt: Box, h: int, w: int, stride: float) -> np.ndarray:
    centers = cell_centers(h, w, stride)
    m = ((centers[:, 0] >= gt.x1) & (centers[:, 0] <= gt.x2)
         & (centers[:, 1] >= gt.y1) & (centers[:, 1] <= gt.y2))
    return np.flatnonzero(m)


def iq_supervision_pairs(gt: Box, gmm: qdist.QualityGMM, stride: float, pred_dists: np.ndarray) -> dict:
    """Quality-vs-IoU pairs at grid cells whose centres lie inside ``gt``.

    ``pred_dists`` is the ``(4, H, W)`` predicted (l, t, r, b) map in stride
    units; distances are floored at ``DIST_FLOOR``.  Returns a dict with
    ``cells``, ``offsets``, ``p_qua`` and ``p_iou`` arrays.
    """
    _, h, w = pred_dists.shape
    cells = cells_in_box(gt, h, w, stride)
    centers = cell_centers(h, w, stride)[cells]
    cx, cy = gt.center
    offsets = (centers - np.array([cx, cy])) / np.array([0.5 * gt.width, 0.5 * gt.height])
    dists = np.maximum(pred_dists.reshape(4, -1)[:, cells].T, DIST_FLOOR)
    boxes = decode_boxes(centers, dists, stride)
    p_iou = iou_rows(boxes, np.tile(gt.as_array(), (len(cells), 1)))
    p_qua = qdist.quality_targets(gmm, offsets) if len(cells) else np.zeros(0)
    return {"cells": cells, "offsets": offsets, "p_qua": p_qua, "p_iou": p_iou}


def assign_image(gts, classes, gmms, pyramid: PyramidSpec, grid_shapes, k_s: int = 12,
                 draws_per_level: int | None = None, rng: np.random.Generator | None = None,
                 seed=None) -> AssignmentResult:
    """Full assignment for one image.

    ``gmms[i][l]`` is the quality GMM of instance ``i`` on level ``l``.  The
    generator is consumed in instance order, so results are reproducible.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    draws = k_s if draws_per_level is None else draws_per_level
    selected = []
    for i, gt in enumerate(gts):
        cands = build_candidates(gt, gmms[i], pyramid, draws, rng, grid_shapes, instance_id=i)
        # positives must sit strictly inside their GT
        keep = ((cands.points[:, 0] > gt.x1) & (cands.points[:, 0] < gt.x2)
                & (cands.points[:, 1] > gt.y1) & (cands.points[:, 1] < gt.y2))
        selected.append(select_topk(cands.take(np.flatnonzero(keep)), k_s))
    pos = SampleSet.concat(selected)
    if len(pos):
        cls_t, reg_t = soft_targets(pos, gts, pyramid)
        cls_id = np.asarray(classes, dtype=np.int64)[pos.instance]
    else:
        cls_t, reg_t, cls_id = np.zeros(0), np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    negs = [negative_mask(gts, h, w, s) for (h, w), s in zip(grid_shapes, pyramid.strides)]
    return AssignmentResult(positives=pos, classes=cls_id, cls_target=cls_t, reg_target=reg_t,
                            negatives=negs, gmms=[list(g) for g in gmms])


def grid_targets(result: AssignmentResult, num_classes: int, grid_shapes) -> list[np.ndarray]:
    """Per-level ``(A, H, W)`` classification target maps.

    Zero everywhere except at stencil cells (weight > 0) of positives, which
    take the max soft target over every positive touching them.
    """
    maps = [np.zeros((num_classes, h * w)) for h, w in grid_shapes]
    pos = result.positives
    for n in range(len(pos)):
        m = maps[pos.level[n]][result.classes[n]]
        for idx, wt in zip(pos.stencil_index[n], pos.stencil_weight[n]):
            if wt > 0:
                m[idx] = max(m[idx], result.cls_target[n])
    return [m.reshape(num_classes, h, w) for m, (h, w) in zip(maps, grid_shapes)]


def rle_rows(mask: np.ndarray) -> list[list[list[int]]]:
    """Run-length encode each row of a boolean mask as ``[start, length]`` runs of True."""
    out = []
    for row in np.asarray(mask, dtype=bool):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        out.append([[int(a), int(b - a)] for a, b in zip(edges[::2], edges[1::2])])
    return out


def rle_decode(rows, width: int) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=bool)
    for r, runs in enumerate(rows):
        for start, length in runs:
            out[r, start:start + length] = True
    return out
