"""A two-level FCOS-lite detector with hand-written forward and backward passes.

Per level (stride 8 and 16 on a 64x64 input): the image is average-pooled by
``stride / 4``, then two 3x3 stride-2 ReLU convolutions build a 32-channel
feature map, and one 3x3 head convolution emits class logits, log-distances
and an IoU logit.  Distances are ``exp`` of the head output, in stride units.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..geometry import PyramidSpec

DEFAULT_PYRAMID = PyramidSpec((("P3", 8), ("P4", 16)))
MAX_LOG_DIST = 8.0


def conv2d_forward(x, w, b, stride: int):
    """3x3 convolution, padding 1.  ``x (B,C,H,W)``, ``w (C*9, Cout)``."""
    bsz, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * 9)
    out = cols @ w + b
    return out.reshape(bsz, ho, wo, -1).transpose(0, 3, 1, 2), (cols, x.shape, stride)


def conv2d_backward(dout, w, cache):
    cols, xshape, stride = cache
    bsz, c, h, wd = xshape
    cout, ho, wo = dout.shape[1], dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = cols.T @ d
    db = d.sum(axis=0)
    dcols = (d @ w.T).reshape(bsz, ho, wo, c, 3, 3)
    dxp = np.zeros((bsz, c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2))
    return dxp[:, :, 1:-1, 1:-1], dw, db


def avg_pool(x, f: int):
    if f == 1:
        return x
    b, c, h, w = x.shape
    return x.reshape(b, c, h // f, f, w // f, f).mean(axis=(3, 5))


def init_detector(seed, num_classes: int = 2, channels: int = 32, pyramid: PyramidSpec = DEFAULT_PYRAMID,
                  in_channels: int = 1, prior: float = 0.01) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    n_out = num_classes + 5
    for l in range(len(pyramid)):
        params[f"L{l}.conv1.w"] = rng.normal(0.0, np.sqrt(2.0 / (in_channels * 9)), (in_channels * 9, channels))
        params[f"L{l}.conv1.b"] = np.zeros(channels)
        params[f"L{l}.conv2.w"] = rng.normal(0.0, np.sqrt(2.0 / (channels * 9)), (channels * 9, channels))
        params[f"L{l}.conv2.b"] = np.zeros(channels)
        params[f"L{l}.head.w"] = rng.normal(0.0, 0.01, (channels * 9, n_out))
        hb = np.zeros(n_out)
        hb[:num_classes] = -np.log((1.0 - prior) / prior)
        params[f"L{l}.head.b"] = hb
    return params


def forward(params, images, num_classes: int = 2, pyramid: PyramidSpec = DEFAULT_PYRAMID):
    """Per-level outputs for ``images (B, 1, 64, 64)``.

    Returns a list of dicts with ``feat (B,C,H,W)``, ``cls (B,A,H,W)``,
    ``reg (B,4,H,W)`` positive distances, ``aux (B,1,H,W)``, plus caches.
    """
    x = np.asarray(images, dtype=np.float64)
    outs = []
    for l, stride in enumerate(pyramid.strides):
        xin = avg_pool(x, max(stride // 4, 1))
        h1, c1 = conv2d_forward(xin, params[f"L{l}.conv1.w"], params[f"L{l}.conv1.b"], 2)
        a1 = np.maximum(h1, 0.0)
        h2, c2 = conv2d_forward(a1, params[f"L{l}.conv2.w"], params[f"L{l}.conv2.b"], 2)
        feat = np.maximum(h2, 0.0)
        head, c3 = conv2d_forward(feat, params[f"L{l}.head.w"], params[f"L{l}.head.b"], 1)
        raw_reg = head[:, num_classes:num_classes + 4]
        reg = np.exp(np.clip(raw_reg, -MAX_LOG_DIST, MAX_LOG_DIST))
        outs.append({
            "feat": feat, "cls": head[:, :num_classes], "reg": reg, "aux": head[:, num_classes + 4:],
            "_cache": (h1, c1, h2, c2, c3, raw_reg),
        })
    return outs


def backward(params, outs, grads_per_level, num_classes: int = 2):
    """Backprop ``grads_per_level[l] = {"cls", "reg", "aux", optional "feat"}``.

    ``reg`` gradients are with respect to the positive distances.
    """
    g = {k: np.zeros_like(v) for k, v in params.items()}
    for l, (out, gl) in enumerate(zip(outs, grads_per_level)):
        h1, c1, h2, c2, c3, raw_reg = out["_cache"]
        dreg_raw = gl["reg"] * out["reg"] * (np.abs(raw_reg) < MAX_LOG_DIST)
        dhead = np.concatenate([gl["cls"], dreg_raw, gl["aux"]], axis=1)
        dfeat, g[f"L{l}.head.w"], g[f"L{l}.head.b"] = conv2d_backward(dhead, params[f"L{l}.head.w"], c3)
        if gl.get("feat") is not None:
            dfeat = dfeat + gl["feat"]
        dh2 = dfeat * (h2 > 0)
        da1, g[f"L{l}.conv2.w"], g[f"L{l}.conv2.b"] = conv2d_backward(dh2, params[f"L{l}.conv2.w"], c2)
        dh1 = da1 * (h1 > 0)
        _, g[f"L{l}.conv1.w"], g[f"L{l}.conv1.b"] = conv2d_backward(dh1, params[f"L{l}.conv1.w"], c1)
    return g
