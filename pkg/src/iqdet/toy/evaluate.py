"""Post-processing and box-level evaluation for the toy detector."""

from __future__ import annotations

import numpy as np

from ..geometry import iou_matrix
from ..gridops import cell_centers


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def nms(boxes, scores, iou_thresh: float = 0.6, topk: int = 100) -> np.ndarray:
    """Greedy suppression in descending score order (ties by index).

    A box is dropped when its IoU with an already-kept box exceeds
    ``iou_thresh``.  Returns kept indices, best first, at most ``topk``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if len(keep) >= topk:
            break
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def decode_detections(outs, index: int, strides, score_thresh: float = 0.05, iou_thresh: float = 0.6,
                      topk: int = 100):
    """Final detections of one image: ``(boxes (N,4), scores (N,), classes (N,))``.

    Score is ``sigmoid(cls) * sigmoid(aux)``; NMS runs per class, then the
    ``topk`` best survive overall.
    """
    all_boxes, all_scores, all_cls = [], [], []
    for out, stride in zip(outs, strides):
        cls = out["cls"][index]
        a, h, w = cls.shape
        centers = cell_centers(h, w, stride)
        dist = out["reg"][index].reshape(4, -1).T * stride
        boxes = np.concatenate([centers - dist[:, :2], centers + dist[:, 2:]], axis=1)
        score = _sigmoid(cls.reshape(a, -1)) * _sigmoid(out["aux"][index].reshape(1, -1))
        for c in range(a):
            all_boxes.append(boxes)
            all_scores.append(score[c])
            all_cls.append(np.full(h * w, c))
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_cls)
    m = scores > score_thresh
    boxes, scores, classes = boxes[m], scores[m], classes[m]
    kept = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        kept.append(idx[nms(boxes[idx], scores[idx], iou_thresh, topk)])
    if not kept:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    kept = np.concatenate(kept)
    kept = kept[np.lexsort((kept, -scores[kept]))][:topk]
    return boxes[kept], scores[kept], classes[kept]


def average_precision(detections, ground_truths, iou_thresh: float = 0.5, num_classes: int = 2) -> float:
    """11-point interpolated AP averaged over classes that have ground truth.

    ``detections[i] = (boxes, scores, classes)``, ``ground_truths[i] = (boxes, classes)``.
    """
    aps = []
    for c in range(num_classes):
        n_gt = sum(int(np.sum(np.asarray(g[1]) == c)) for g in ground_truths)
        if n_gt == 0:
            continue
        records = []  # (score, image, box)
        for img, (boxes, scores, classes) in enumerate(detections):
            for bx, sc, cl in zip(boxes, scores, classes):
                if cl == c:
                    records.append((float(sc), img, np.asarray(bx)))
        records.sort(key=lambda r: -r[0])
        matched = [np.zeros(int(np.sum(np.asarray(g[1]) == c)), dtype=bool) for g in ground_truths]
        tp = np.zeros(len(records))
        for k, (_, img, bx) in enumerate(records):
            gb, gc = ground_truths[img]
            gboxes = np.asarray(gb, dtype=np.float64).reshape(-1, 4)[np.asarray(gc) == c]
            if len(gboxes) == 0:
                continue
            ious = iou_matrix(bx, gboxes)[0]
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh and not matched[img][j]:
                matched[img][j] = True
                tp[k] = 1.0
        if len(records) == 0:
            aps.append(0.0)
            continue
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(records) + 1)
        # sum before dividing so a perfect curve gives exactly 1.0
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = precision[recall >= t]
            total += p.max() if len(p) else 0.0
        aps.append(total / 11.0)
    return float(np.mean(aps)) if aps else 0.0
