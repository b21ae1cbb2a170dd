"""End-to-end toy training: detector + quality encoder + assignment + SGD.

Two assignment modes share everything except the quality GMM:

* ``iqdet``  - GMMs come from the encoder applied to RoIAligned GT features
  and the encoder is trained by the quality BCE term.
* ``center`` - every GT uses a fixed centred Gaussian and the quality term
  is skipped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import qde
from ..assign import assign_image
from ..formats import FormatError, parse_bool, read_tensors, write_tensors
from ..geometry import Box
from ..losses import ImageLossInput, LevelPrediction, total_loss
from ..qdist import QualityGMM
from . import detector
from .evaluate import average_precision, decode_detections
from .scene import NUM_CLASSES, generate_scene

log = logging.getLogger(__name__)

MODES = ("iqdet", "center")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    seed: int = 0
    lambda_iq: float = 1.0
    n_components: int = 2
    k_s: int = 12
    draws_per_level: int = 12
    mode: str = "iqdet"
    channels: int = 32
    hidden: int = 256
    pool: int = 7
    samples_per_bin: int = 2
    extractor: str = "roialign"
    learn_mu: bool = True
    learn_sigma: bool = True
    learn_pi: bool = True
    center_sigma: float = 0.5
    iq_to_backbone: bool = False  # L_IQ stops at the encoder input unless enabled

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "k_s", "draws_per_level", "channels", "hidden", "pool", "n_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.lr <= 0 or not 0 <= self.momentum < 1 or self.lambda_iq < 0:
            raise ValueError("invalid optimizer settings")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise FormatError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    kwargs[key] = parse_bool(raw)
                elif kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as exc:
                raise FormatError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    def encoder_config(self) -> qde.EncoderConfig:
        return qde.EncoderConfig(
            in_channels=self.channels, pool=self.pool, hidden=self.hidden, n_components=self.n_components,
            learn_mu=self.learn_mu, learn_sigma=self.learn_sigma, learn_pi=self.learn_pi,
            samples_per_bin=self.samples_per_bin, extractor=self.extractor,
        )


def init_state(cfg: TrainConfig) -> dict:
    params = detector.init_detector([cfg.seed, 1], NUM_CLASSES, cfg.channels)
    enc = qde.init_weights([cfg.seed, 2], cfg.encoder_config())
    for k, v in enc.as_dict().items():
        params[f"qde.{k}"] = v
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return {"params": params, "velocity": velocity, "step": 0}


def encoder_weights(params) -> qde.EncoderWeights:
    return qde.EncoderWeights.from_dict({k[4:]: v for k, v in params.items() if k.startswith("qde.")})


def scene_batch(cfg: TrainConfig, step: int):
    return [generate_scene([cfg.seed, step, b]) for b in range(cfg.batch_size)]


def compute_gmms(params, outs, scenes, cfg: TrainConfig):
    """Per-image ``(mu, sigma, pi)`` arrays of shape ``(n_inst, L, K, ...)`` plus encoder cache."""
    strides = detector.DEFAULT_PYRAMID.strides
    n_lv, k = len(strides), cfg.n_components
    if cfg.mode == "center":
        per_image = []
        for sc in scenes:
            g = QualityGMM.fixed(k, 0.0, cfg.center_sigma, 1.0)
            n = len(sc.boxes)
            per_image.append((np.broadcast_to(g.mu, (n, n_lv, k, 2)).copy(),
                              np.broadcast_to(g.sigma, (n, n_lv, k, 2)).copy(),
                              np.broadcast_to(g.pi, (n, n_lv, k)).copy()))
        return per_image, None
    enc_cfg = cfg.encoder_config()
    rows, meta = [], []
    for b, sc in enumerate(scenes):
        for i, gt in enumerate(sc.boxes):
            for l, stride in enumerate(strides):
                grid = qde.FeatureGrid(outs[l]["feat"][b], stride)
                rows.append(qde.extract_feature(grid, gt, enc_cfg))
                meta.append((b, i, l))
    mu, sigma, pi, cache = qde.encode_batch(encoder_weights(params), np.stack(rows), enc_cfg)
    per_image = []
    r = 0
    for sc in scenes:
        n = len(sc.boxes) * n_lv
        per_image.append((mu[r:r + n].reshape(-1, n_lv, k, 2), sigma[r:r + n].reshape(-1, n_lv, k, 2),
                          pi[r:r + n].reshape(-1, n_lv, k)))
        r += n
    return per_image, (cache, meta, enc_cfg)


def _gmm_objects(params_img):
    mu, sigma, pi = params_img
    return [[QualityGMM(mu[i, l], sigma[i, l], pi[i, l]) for l in range(mu.shape[1])] for i in range(len(mu))]


def loss_and_grads(params, scenes, cfg: TrainConfig, rng: np.random.Generator):
    """One forward/assignment/loss/backward pass.  Returns ``(report, grads, stats)``."""
    pyramid = detector.DEFAULT_PYRAMID
    strides = pyramid.strides
    images = np.stack([sc.image for sc in scenes])
    outs = detector.forward(params, images, NUM_CLASSES, pyramid)
    gmm_params, enc = compute_gmms(params, outs, scenes, cfg)
    shapes = [o["cls"].shape[2:] for o in outs]

    batch = []
    for b, sc in enumerate(scenes):
        asg = assign_image(list(sc.boxes), sc.classes, _gmm_objects(gmm_params[b]), pyramid, shapes,
                           k_s=cfg.k_s, draws_per_level=cfg.draws_per_level, rng=rng)
        preds = [LevelPrediction(o["cls"][b], o["reg"][b], o["aux"][b]) for o in outs]
        batch.append(ImageLossInput(asg, preds, list(sc.boxes), [float(s) for s in strides],
                                    gmm_params[b] if cfg.mode == "iqdet" else None))
    report, lgrads, stats = total_loss(batch, lambda_iq=cfg.lambda_iq, with_iq=cfg.mode == "iqdet")

    level_grads = []
    for l, o in enumerate(outs):
        level_grads.append({
            "cls": np.stack([g[l]["cls"] for g in lgrads]),
            "reg": np.stack([g[l]["reg"] for g in lgrads]),
            "aux": np.stack([g[l]["aux"] for g in lgrads]),
            "feat": None,
        })

    grads = {}
    mu_std = 0.0
    if enc is not None:
        cache, meta, enc_cfg = enc
        dmu = np.concatenate([g["gmm"][0].reshape(-1, cfg.n_components, 2) for g in lgrads])
        dsig = np.concatenate([g["gmm"][1].reshape(-1, cfg.n_components, 2) for g in lgrads])
        dpi = np.concatenate([g["gmm"][2].reshape(-1, cfg.n_components) for g in lgrads])
        egrads, dx = qde.encode_backward(encoder_weights(params), cache, dmu, dsig, dpi, enc_cfg)
        for k, v in egrads.as_dict().items():
            grads[f"qde.{k}"] = v
        if cfg.iq_to_backbone and enc_cfg.extractor != "roipool":
            for l in range(len(outs)):
                level_grads[l]["feat"] = np.zeros_like(outs[l]["feat"])
            for row, (b, i, l) in enumerate(meta):
                if not np.any(dx[row]):
                    continue
                fshape = outs[l]["feat"].shape[1:]
                level_grads[l]["feat"][b] += qde.extract_feature_backward(
                    fshape, strides[l], scenes[b].boxes[i], dx[row], enc_cfg)
        mus = np.concatenate([g[0] for g in gmm_params])
        if len(mus) > 1:
            mu_std = float(mus.std(axis=0).mean())
    else:
        for k, v in params.items():
            if k.startswith("qde."):
                grads[k] = np.zeros_like(v)

    grads.update(detector.backward({k: v for k, v in params.items() if not k.startswith("qde.")},
                                   outs, level_grads, NUM_CLASSES))
    stats["mu_std"] = mu_std
    stats["outs"] = outs
    return report, grads, stats


def sgd_step(state: dict, grads: dict, cfg: TrainConfig) -> float:
    params, vel = state["params"], state["velocity"]
    names = sorted(params)
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
    for k in names:
        g = grads[k] * scale
        if k.rsplit(".", 1)[-1].startswith("w"):
            g = g + cfg.weight_decay * params[k]
        vel[k] *= cfg.momentum
        vel[k] += g
        params[k] -= cfg.lr * vel[k]
    return norm


def train(cfg: TrainConfig, out_dir=None, log_callback=None) -> dict:
    """Run ``cfg.steps`` SGD steps; optionally write ``log.jsonl`` and a checkpoint to ``out_dir``.

    Returns the final state with a ``log`` list of per-step records.
    """
    state = init_state(cfg)
    records = []
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.steps > 0:  # a zero-step run emits only the initial checkpoint
            fh = open(out / "log.jsonl", "w")
    try:
        for step in range(cfg.steps):
            scenes = scene_batch(cfg, step)
            rng = np.random.default_rng([cfg.seed, step, 7])
            report, grads, stats = loss_and_grads(state["params"], scenes, cfg, rng)
            if not math.isfinite(report.total):
                if out is not None:
                    (out / f"abort_step{step}.json").write_text(json.dumps({
                        "step": step, "report": report.to_dict(),
                        "scene_seeds": [[cfg.seed, step, b] for b in range(cfg.batch_size)],
                    }, indent=1))
                raise NumericalAbort(f"non-finite loss at step {step}: {report.to_dict()}")
            gnorm = sgd_step(state, grads, cfg)
            state["step"] = step + 1
            rec = {"step": step, **report.to_dict(),
                   "mean_pos_iou": float(stats["pos_iou"].mean()) if len(stats["pos_iou"]) else 0.0,
                   "n_pos": int(stats["n_pos"]), "mu_std": stats["mu_std"], "grad_norm": gnorm}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if log_callback is not None:
                log_callback(rec)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint", state, cfg)
    state["log"] = records
    return state


def save_checkpoint(prefix, state: dict, cfg: TrainConfig) -> None:
    prefix = Path(prefix)
    tensors = {k: state["params"][k] for k in sorted(state["params"])}
    write_tensors(prefix.with_suffix(".iqt"), tensors)
    manifest = {
        "format": "IQT1",
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "step": int(state["step"]),
        "config": cfg.to_mapping(),
    }
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".iqt", ".json"):
        prefix = prefix.with_suffix("")
    try:
        manifest = json.loads(prefix.with_suffix(".json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint manifest: {exc}") from exc
    tensors = read_tensors(prefix.with_suffix(".iqt"))
    missing = set(manifest["tensors"]) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint is missing tensors {sorted(missing)}")
    cfg = TrainConfig.from_mapping({k: str(v) for k, v in manifest["config"].items()})
    params = {k: tensors[k].astype(np.float64) for k in manifest["tensors"]}
    return params, cfg


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def eval_scene_seeds(n: int, seed: int = 2024):
    return [[seed, i] for i in range(n)]


def evaluate(params, cfg: TrainConfig, scenes) -> dict:
    """AP@0.5, AP@0.75 and mean predicted-box IoU of assigned positives on ``scenes``."""
    strides = detector.DEFAULT_PYRAMID.strides
    dets, gts, ious = [], [], []
    for start in range(0, len(scenes), 16):
        chunk = scenes[start:start + 16]
        rng = np.random.default_rng([cfg.seed, start, 11])
        _, _, stats = loss_and_grads(params, chunk, cfg, rng)
        ious.append(stats["pos_iou"])
        outs = stats["outs"]
        for b, sc in enumerate(chunk):
            dets.append(decode_detections(outs, b, strides))
            gts.append((np.stack([bx.as_array() for bx in sc.boxes]), np.asarray(sc.classes)))
    allious = np.concatenate(ious) if ious else np.zeros(0)
    return {
        "ap50": average_precision(dets, gts, 0.5, NUM_CLASSES),
        "ap75": average_precision(dets, gts, 0.75, NUM_CLASSES),
        "mean_pos_iou": float(allious.mean()) if len(allious) else 0.0,
        "n_scenes": len(scenes),
    }
