"""Detector training loss: soft focal + IoU + auxiliary BCE + quality-distribution BCE.

Every elementwise loss returns ``(loss, d loss / d input)``.

Gradient routing in :func:`total_loss`: sample positions and soft targets
are constants.  Classification, regression and auxiliary terms reach the
prediction maps through the bilinear stencils; only the quality term reaches
the GMM parameters.  The IoU target of the quality term is detached.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import qdist
from .assign import DIST_FLOOR, AssignmentResult, grid_targets, iq_supervision_pairs
from .geometry import Box, DomainError, decode_boxes, iou_rows
from .gridops import scatter_stencil

PROB_EPS = 1e-6


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_unit(t, name):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError(f"{name} must lie in [0, 1]")
    return t


def bce(logit, target):
    """Binary cross-entropy on logits: ``softplus(z) - t z``."""
    z = np.asarray(logit, dtype=np.float64)
    t = _check_unit(target, "target")
    loss = np.logaddexp(0.0, z) - t * z
    return loss, _sigmoid(z) - t


def bce_prob(p, target):
    """Binary cross-entropy on probabilities, with ``p`` clipped to ``[eps, 1 - eps]``."""
    t = _check_unit(target, "target")
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -t * np.log(pc) - (1.0 - t) * np.log1p(-pc)
    grad = (-t / pc + (1.0 - t) / (1.0 - pc)) * ((p > PROB_EPS) & (p < 1.0 - PROB_EPS))
    return loss, grad


def focal_soft(logit, target, alpha: float = 0.25, gamma: float = 2.0):
    """Focal loss for continuous targets: ``w(q) |q - p|^gamma BCE(p, q)``.

    ``w(q) = alpha q + (1 - alpha)(1 - q)`` interpolates the usual class
    balancing between the q = 0 and q = 1 cases.
    """
    z = np.asarray(logit, dtype=np.float64)
    q = _check_unit(target, "target")
    p = _sigmoid(z)
    ce = np.logaddexp(0.0, z) - q * z
    diff = p - q
    ad = np.abs(diff)
    mod = ad**gamma
    w = alpha * q + (1.0 - alpha) * (1.0 - q)
    # d|p-q|^g/dz = g |p-q|^(g-1) sign(p-q) p (1-p)
    with np.errstate(divide="ignore", invalid="ignore"):
        dmod = np.where(ad > 0, gamma * ad ** (gamma - 1.0) * np.sign(diff), 0.0) * p * (1.0 - p)
    loss = w * mod * ce
    grad = w * (dmod * ce + mod * diff)
    return loss, grad


def iou_loss(pred, target):
    """``-ln IoU`` of two boxes sharing an anchor point, in (l, t, r, b) form.

    Predictions are floored at 1e-3 (zero gradient below the floor).
    Returns per-row loss ``(N,)`` and gradient ``(N, 4)``.
    """
    pr = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    tg = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    if np.any(tg <= 0):
        raise DomainError("iou_loss targets must be positive")
    floor_mask = pr > DIST_FLOOR
    p = np.maximum(pr, DIST_FLOOR)
    l, t, r, b = p.T
    tl, tt, tr, tb = tg.T
    wp, hp = l + r, t + b
    area_p = wp * hp
    area_t = (tl + tr) * (tt + tb)
    wi = np.minimum(l, tl) + np.minimum(r, tr)
    hi = np.minimum(t, tt) + np.minimum(b, tb)
    inter = wi * hi
    union = area_p + area_t - inter
    loss = -np.log(inter / union)
    # dloss = -dI/I + dU/U, dU = dAp - dI
    dinter_dwi, dinter_dhi = hi, wi
    c_i = -1.0 / inter - 1.0 / union
    c_u = 1.0 / union
    sel = np.stack([l < tl, t < tt, r < tr, b < tb], axis=1).astype(np.float64)
    dwi_dl, dhi_dt, dwi_dr, dhi_db = sel.T
    grad = np.stack([
        c_i * dinter_dwi * dwi_dl + c_u * hp,
        c_i * dinter_dhi * dhi_dt + c_u * wp,
        c_i * dinter_dwi * dwi_dr + c_u * hp,
        c_i * dinter_dhi * dhi_db + c_u * wp,
    ], axis=1)
    return loss, grad * floor_mask


@dataclass
class LossReport:
    l_cls: float
    l_reg: float
    l_aux: float
    l_iq: float
    lambda_iq: float
    total: float

    @classmethod
    def build(cls, l_cls, l_reg, l_aux, l_iq, lambda_iq) -> "LossReport":
        total = l_cls + l_reg + l_aux + lambda_iq * l_iq
        return cls(float(l_cls), float(l_reg), float(l_aux), float(l_iq), float(lambda_iq), float(total))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LevelPrediction:
    """Raw head outputs on one level of one image."""

    cls: np.ndarray  # (A, H, W) logits
    reg: np.ndarray  # (4, H, W) distances in stride units (already positive)
    aux: np.ndarray  # (1, H, W) IoU logit


@dataclass
class ImageLossInput:
    assignment: AssignmentResult
    predictions: list[LevelPrediction]
    gts: list[Box]
    strides: list[float]
    # (n_inst, L, K, 2), (n_inst, L, K, 2), (n_inst, L, K); None skips the quality term
    gmm_params: tuple | None = None


def total_loss(batch: list[ImageLossInput], lambda_iq: float = 1.0, alpha: float = 0.25,
               gamma: float = 2.0, with_iq: bool = True):
    """Assemble the four loss terms over a batch of images.

    Returns ``(report, grads, stats)`` where ``grads[b][l]`` holds
    ``cls``/``reg``/``aux`` map gradients, ``grads[b]["gmm"]`` the
    ``(dmu, dsigma, dpi)`` arrays, and ``stats`` carries diagnostic values such
    as the IoU of each positive's predicted box.
    """
    n_pos = sum(item.assignment.num_positives for item in batch)
    norm_pos = max(n_pos, 1)
    cls_sum = reg_sum = aux_sum = 0.0
    iq_terms = []  # (b, inst, level, pairs, loss, dloss_dp)
    grads = []
    pos_ious = []

    for item in batch:
        asg = item.assignment
        shapes = [p.cls.shape[1:] for p in item.predictions]
        n_cls = item.predictions[0].cls.shape[0]
        g_img = {l: {"cls": np.zeros_like(p.cls), "reg": np.zeros_like(p.reg), "aux": np.zeros_like(p.aux)}
                 for l, p in enumerate(item.predictions)}

        # grid-level classification: zero targets except max-scattered positive stencils
        targets = grid_targets(asg, n_cls, shapes)
        for l, pred in enumerate(item.predictions):
            loss, g = focal_soft(pred.cls, targets[l], alpha, gamma)
            cls_sum += loss.sum()
            g_img[l]["cls"] += g / norm_pos

        pos = asg.positives
        for l, pred in enumerate(item.predictions):
            m = np.flatnonzero(pos.level == l)
            if len(m) == 0:
                continue
            idx, wt = pos.stencil_index[m], pos.stencil_weight[m]
            a, h, w = pred.cls.shape
            cls_flat = pred.cls.reshape(a, -1)
            z = np.einsum("nk,nk->n", cls_flat[asg.classes[m][:, None], idx], wt)
            loss, gz = focal_soft(z, asg.cls_target[m], alpha, gamma)
            cls_sum += loss.sum()
            gcls = g_img[l]["cls"].reshape(a, -1)
            for k in range(4):
                np.add.at(gcls, (asg.classes[m], idx[:, k]), gz / norm_pos * wt[:, k])

            reg_flat = pred.reg.reshape(4, -1)
            dists = np.einsum("cnk,nk->nc", reg_flat[:, idx], wt)
            rl, rg = iou_loss(dists, asg.reg_target[m])
            reg_sum += rl.sum()
            g_img[l]["reg"] += scatter_stencil((rg / norm_pos).T, idx, wt, pred.reg.shape)

            stride = item.strides[l]
            boxes = decode_boxes(pos.points[m], np.maximum(dists, DIST_FLOOR), stride)
            gt_arr = np.stack([item.gts[i].as_array() for i in pos.instance[m]])
            ious = iou_rows(boxes, gt_arr)
            pos_ious.append(ious)
            za = np.einsum("nk,nk->n", pred.aux.reshape(-1)[idx], wt)
            al, ag = bce(za, ious)
            aux_sum += al.sum()
            g_img[l]["aux"] += scatter_stencil((ag / norm_pos)[None], idx, wt, pred.aux.shape)

        if with_iq and item.gmm_params is not None:
            mu, sigma, pi = item.gmm_params
            for i, gt in enumerate(item.gts):
                for l, pred in enumerate(item.predictions):
                    gmm = qdist.QualityGMM(mu[i, l], sigma[i, l], pi[i, l])
                    pairs = iq_supervision_pairs(gt, gmm, item.strides[l], pred.reg)
                    if len(pairs["cells"]) == 0:
                        continue
                    loss, dp = bce_prob(pairs["p_qua"], pairs["p_iou"])
                    iq_terms.append((len(grads), i, l, pairs, loss, dp))
        grads.append(g_img)

    n_pairs = sum(len(t[4]) for t in iq_terms)
    iq_sum = 0.0
    for g_img, item in zip(grads, batch):
        if item.gmm_params is not None:
            mu, sigma, pi = item.gmm_params
            g_img["gmm"] = (np.zeros_like(mu), np.zeros_like(sigma), np.zeros_like(pi))
    for b, i, l, pairs, loss, dp in iq_terms:
        iq_sum += loss.sum()
        mu, sigma, pi = batch[b].gmm_params
        dens, dmu, dsig, dpi, _ = qdist.density_grad_many(mu[i, l], sigma[i, l], pi[i, l], pairs["offsets"])
        # quality = min(density, 1): no gradient where clamped
        up = dp / n_pairs * (dens < 1.0)
        gm = grads[b]["gmm"]
        gm[0][i, l] += np.einsum("n,nkc->kc", up, dmu)
        gm[1][i, l] += np.einsum("n,nkc->kc", up, dsig)
        gm[2][i, l] += up @ dpi

    l_iq = iq_sum / n_pairs if n_pairs else 0.0
    l_cls = cls_sum / norm_pos
    l_reg = reg_sum / n_pos if n_pos else 0.0
    l_aux = aux_sum / n_pos if n_pos else 0.0
    report = LossReport.build(l_cls, l_reg, l_aux, l_iq, lambda_iq)
    for g_img in grads:
        if "gmm" in g_img:
            g_img["gmm"] = tuple(lambda_iq * g for g in g_img["gmm"])
    stats = {"pos_iou": np.concatenate(pos_ious) if pos_ious else np.zeros(0), "n_pos": n_pos,
             "n_pairs": n_pairs}
    return report, grads, stats
