"""``iqdet`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 invariant violation, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import qde
from .assign import assign_image, rle_rows
from .formats import FormatError, read_annotations, read_config, read_tensors
from .geometry import DomainError, PyramidSpec
from .qdist import QualityGMM, quality_targets, sample_offsets

EXIT_INPUT, EXIT_INVARIANT, EXIT_NUMERIC = 2, 3, 4
DEFAULT_COUNT = 12
DECIMALS = 6


class InputError(Exception):
    """Bad command-line input that is not a file-format problem."""


def _r(x):
    """Round for stable golden output; ``-0.0`` prints as ``0.0``."""
    v = round(float(x), DECIMALS)
    return 0.0 if v == 0 else v


def _rl(a):
    return [_r(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _read_gmm(path) -> QualityGMM:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read GMM file {path}: {exc}") from exc
    try:
        return QualityGMM.from_json(obj)
    except DomainError as exc:
        raise FormatError(f"invalid GMM in {path}: {exc}") from exc


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# ---------------------------------------------------------------- assign

ASSIGN_DEFAULTS = {"pyramid": "P3:8,P4:16", "k_s": "12", "draws_per_level": "12", "mode": "iqdet",
                   "n_components": "2", "hidden": "256", "pool": "7", "samples_per_bin": "2",
                   "center_sigma": "0.5", "encoder_seed": "0"}


def _assign_settings(config_path) -> dict:
    values = dict(ASSIGN_DEFAULTS)
    if config_path is not None:
        values.update(read_config(config_path))
    unknown = set(values) - set(ASSIGN_DEFAULTS)
    if unknown:
        raise FormatError(f"unknown assign config keys {sorted(unknown)}")
    try:
        return {
            "pyramid": PyramidSpec.parse(values["pyramid"]),
            "k_s": int(values["k_s"]), "draws_per_level": int(values["draws_per_level"]),
            "mode": values["mode"], "n_components": int(values["n_components"]),
            "hidden": int(values["hidden"]), "pool": int(values["pool"]),
            "samples_per_bin": int(values["samples_per_bin"]),
            "center_sigma": float(values["center_sigma"]), "encoder_seed": int(values["encoder_seed"]),
        }
    except DomainError as exc:
        raise FormatError(str(exc)) from exc
    except ValueError as exc:
        raise FormatError(f"bad assign config value: {exc}") from exc


def cmd_assign(args) -> int:
    cfg = _assign_settings(args.config)
    if cfg["mode"] not in ("iqdet", "center"):
        raise FormatError(f"mode must be iqdet or center, got {cfg['mode']!r}")
    if cfg["k_s"] < 1 or cfg["draws_per_level"] < 1:
        raise FormatError("k_s and draws_per_level must be positive")
    pyramid = cfg["pyramid"]
    tensors = read_tensors(args.features)
    (img_w, img_h), boxes, classes = read_annotations(args.annotations)
    grids = []
    for name in pyramid.names:
        if name not in tensors:
            raise FormatError(f"features file has no tensor for level {name!r}")
        t = tensors[name].astype(np.float64)
        if t.ndim != 3:
            raise FormatError(f"level {name!r} must be (C, H, W), got shape {t.shape}")
        grids.append(t)
    if len({g.shape[0] for g in grids}) != 1:
        raise FormatError("all levels need the same channel count")
    shapes = [g.shape[1:] for g in grids]

    k = cfg["n_components"]
    if cfg["mode"] == "center":
        fixed = QualityGMM.fixed(k, 0.0, cfg["center_sigma"], 1.0)
        gmms = [[fixed for _ in pyramid.strides] for _ in boxes]
    else:
        enc_cfg = qde.EncoderConfig(in_channels=grids[0].shape[0], pool=cfg["pool"], hidden=cfg["hidden"],
                                    n_components=k, samples_per_bin=cfg["samples_per_bin"])
        weights = qde.init_weights(cfg["encoder_seed"], enc_cfg)
        gmms = []
        for box in boxes:
            feats = np.stack([qde.extract_feature(qde.FeatureGrid(g, s), box, enc_cfg)
                              for g, s in zip(grids, pyramid.strides)])
            mu, sigma, pi, _ = qde.encode_batch(weights, feats, enc_cfg)
            gmms.append([QualityGMM(mu[l], sigma[l], pi[l]) for l in range(len(pyramid))])

    res = assign_image(boxes, classes, gmms, pyramid, shapes, k_s=cfg["k_s"],
                       draws_per_level=cfg["draws_per_level"], seed=_seed(args))
    pos = res.positives
    out = {
        "image_size": [_r(img_w), _r(img_h)],
        "pyramid": pyramid.format(),
        "seed": _seed(args),
        "mode": cfg["mode"],
        "instances": [
            {"box": _rl(b.as_array()), "class": int(c),
             "gmms": [{"mu": [_rl(row) for row in g.mu], "sigma": [_rl(row) for row in g.sigma],
                       "pi": _rl(g.pi)} for g in gl]}
            for b, c, gl in zip(boxes, classes, gmms)
        ],
        "positives": [
            {"instance": int(pos.instance[n]), "level": pyramid.names[int(pos.level[n])],
             "draw": int(pos.draw[n]), "point": _rl(pos.points[n]), "offset": _rl(pos.offsets[n]),
             "cls_target": _r(res.cls_target[n]), "reg_target": _rl(res.reg_target[n]),
             "class": int(res.classes[n])}
            for n in range(len(pos))
        ],
        "negatives": {name: {"shape": [int(m.shape[0]), int(m.shape[1])], "rle_rows": rle_rows(m)}
                      for name, m in zip(pyramid.names, res.negatives)},
    }
    _emit(_dump(out), args.out)
    return 0


# ---------------------------------------------------------------- sample / viz

def cmd_sample(args) -> int:
    gmm = _read_gmm(args.gmm)
    if args.count < 1:
        raise InputError("--count must be >= 1")
    d, q = sample_offsets(gmm, args.count, rng_seed=_seed(args))
    _emit(_dump({"seed": _seed(args), "count": args.count, "offsets": [_rl(row) for row in d],
                 "quality": _rl(q)}), args.out)
    return 0


def heatmap(gmm: QualityGMM, resolution: int) -> np.ndarray:
    """``uint8 (R, R)`` image of the capped quality surface over the GT square; row 0 is the top."""
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    xx, yy = np.meshgrid(c, c)
    q = quality_targets(gmm, np.stack([xx.ravel(), yy.ravel()], axis=1))
    # round half up, so x.5 never depends on banker's rounding
    return np.floor(255.0 * q + 0.5).astype(np.uint8).reshape(resolution, resolution)


def offsets_to_pixels(d: np.ndarray, resolution: int) -> np.ndarray:
    """``(N, 2)`` integer ``(row, col)`` of each offset's pixel."""
    px = np.floor((np.asarray(d) + 1.0) * 0.5 * resolution).astype(np.int64)
    px = np.clip(px, 0, resolution - 1)
    return px[:, ::-1]


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.astype(np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def cmd_viz(args) -> int:
    gmm = _read_gmm(args.gmm)
    r = args.resolution
    if r < 16:
        raise InputError("--resolution must be >= 16")
    if args.count < 0:
        raise InputError("--count must be >= 0")
    if args.out is None:
        raise InputError("viz needs --out PREFIX")
    gray = heatmap(gmm, r)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if args.count:
        d, _ = sample_offsets(gmm, args.count, rng_seed=_seed(args))
        for row, col in offsets_to_pixels(d, r):
            rgb[row, col] = (255, 0, 0)
    prefix = Path(args.out)
    write_pgm(prefix.with_suffix(".pgm"), gray)
    write_ppm(prefix.with_suffix(".ppm"), rgb)
    return 0


# ---------------------------------------------------------------- toy training

def _train_config(args):
    from .toy.train import TrainConfig

    values = read_config(args.config) if args.config is not None else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.mode is not None:
        values["mode"] = args.mode
    if args.steps is not None:
        values["steps"] = str(args.steps)
    return TrainConfig.from_mapping(values)


def cmd_train_toy(args) -> int:
    from .toy.train import train

    cfg = _train_config(args)
    out = Path(args.out) if args.out is not None else Path("run")
    state = train(cfg, out)
    last = state["log"][-1] if state["log"] else None
    summary = {"out": str(out), "steps": state["step"]}
    if last is not None:
        summary.update(total=_r(last["total"]), mean_pos_iou=_r(last["mean_pos_iou"]))
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def cmd_eval_toy(args) -> int:
    from .toy.scene import generate_scene
    from .toy.train import eval_scene_seeds, evaluate, load_checkpoint

    if args.checkpoint is None:
        raise InputError("eval-toy needs --checkpoint PATH")
    params, cfg = load_checkpoint(args.checkpoint)
    if args.mode is not None and args.mode != cfg.mode:
        from dataclasses import replace

        cfg = replace(cfg, mode=args.mode)
    n = 200 if args.count is None else args.count
    if n < 1:
        raise InputError("--count must be >= 1")
    scenes = [generate_scene(s) for s in eval_scene_seeds(n, 2024 if args.seed is None else args.seed)]
    metrics = evaluate(params, cfg, scenes)
    _emit(_dump({k: (_r(v) if isinstance(v, float) else v) for k, v in metrics.items()}), args.out)
    return 0


def cmd_report(args) -> int:
    from .report import render

    if args.out is None:
        raise InputError("report needs --out DIR")
    paths = render(args.runs, args.out, window=args.window)
    sys.stdout.write(Path(paths["summary"]).read_text())
    return 0


# ---------------------------------------------------------------- dispatch

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    common.add_argument("--out", help="output path (stdout when omitted, where applicable)")

    p = argparse.ArgumentParser(prog="iqdet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("assign", parents=[common], help="label assignment for one image")
    s.add_argument("features", help="IQT1 file with one (C, H, W) tensor per pyramid level")
    s.add_argument("annotations", help="annotation JSON")
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("sample", parents=[common], help="draw offsets from a quality GMM")
    s.add_argument("gmm", help="GMM JSON with mu, sigma, pi")
    s.add_argument("--count", type=int, default=DEFAULT_COUNT)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("viz", parents=[common], help="PGM heatmap and PPM sample overlay of a quality GMM")
    s.add_argument("gmm", help="GMM JSON with mu, sigma, pi")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--count", type=int, default=DEFAULT_COUNT)
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy detector")
    s.add_argument("--mode", choices=("iqdet", "center"))
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval-toy", parents=[common], help="evaluate a toy checkpoint on held-out scenes")
    s.add_argument("--checkpoint", help="checkpoint prefix, .iqt or .json")
    s.add_argument("--mode", choices=("iqdet", "center"))
    s.add_argument("--count", type=int, help="number of held-out scenes (default 200)")
    s.set_defaults(func=cmd_eval_toy)

    s = sub.add_parser("report", help="summary CSV and figures from training runs")
    s.add_argument("runs", nargs="+", help="run directories containing log.jsonl")
    s.add_argument("--out", help="output directory")
    s.add_argument("--window", type=int, default=50, help="moving-average window for figures")
    s.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    raw = os.environ.get("IQDET_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"IQDET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"IQDET_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    from .toy.train import NumericalAbort

    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        with _thread_limit():
            return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DomainError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        # remaining ValueErrors come from config validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
