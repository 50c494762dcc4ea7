"""Command-line interface: ``rectiplane <command> [flags]``.

Exit codes
    0  success
    1  other failure (bad configuration, numerical or imaging error)
    2  invalid invocation or unusable path (unwritable output, missing data)
    3  training diverged
    4  a required checkpoint is missing
    5  an input image could not be read
    6  unknown layer name
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff.tensor import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointMissing,
    ConfigError,
    CorruptCheckpoint,
    DatasetEmpty,
    DivergedLoss,
    IoFailure,
    RectiplaneError,
)
from .geometry import AngleBins
from .imaging import (
    ParamRanges,
    dataset_checksum,
    load_png,
    load_split,
    make_splits,
    save_png,
    split_counts,
)
from .models import PRESETS, forward_stage1, forward_stage2, rectify_images
from .training import (
    LossConfig,
    TrainConfig,
    evaluate,
    format_angle_table,
    format_regression_table,
    load_model,
    mean_predictor_report,
)

log = logging.getLogger("rectiplane")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED, EXIT_NO_CKPT, EXIT_BAD_IMAGE, EXIT_BAD_LAYER = range(7)


class UsageError(RectiplaneError):
    pass


class UnknownLayer(RectiplaneError):
    pass


class BadImage(RectiplaneError):
    pass


# ---------------------------------------------------------------- helpers


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


def _need_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command} is randomized and requires an explicit --seed")
    return int(args.seed)


def _load_ckpt(path, what: str) -> Checkpoint:
    if not path:
        raise CheckpointMissing(f"no {what} checkpoint given")
    if not Path(path).is_file():
        raise CheckpointMissing(f"{what} checkpoint {path} does not exist")
    return load_checkpoint(path)


def _load_data(root, split: str):
    d = Path(root) / split
    if not (d / "manifest.jsonl").is_file():
        raise UsageError(f"no dataset split at {d}")
    return load_split(d)


def _model(args):
    persp = _load_ckpt(args.ckpt_perspective, "perspective") if args.ckpt_perspective or not args.ckpt_angle else None
    angle = _load_ckpt(args.ckpt_angle, "angle") if args.ckpt_angle else None
    return load_model(persp, angle)


def _load_images(paths, size: int) -> list[tuple[Path, np.ndarray, np.ndarray]]:
    """(path, original image, image resized to the network input)."""
    from PIL import Image as PILImage

    out = []
    for p in paths:
        try:
            img = load_png(p)
        except IoFailure as exc:
            raise BadImage(str(exc)) from exc
        small = img
        if img.shape != (size, size):
            pil = PILImage.fromarray((img * 255).astype(np.float32), mode="F")
            small = np.asarray(pil.resize((size, size), PILImage.BILINEAR), dtype=np.float64) / 255.0
        out.append((Path(p), img, small))
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    seed = _need_seed(args)
    out = _out_dir(args.out_dir)
    counts = split_counts(total=args.count) if args.count is not None else split_counts(scale=args.scale)
    preset = PRESETS[args.preset]
    size = args.size or preset.input_size
    half = math.radians(args.theta_deg)
    bins = AngleBins(-args.theta_deg, args.theta_deg, args.bin_width or preset.bins.width_deg)
    ranges = ParamRanges(theta=(-half, half))
    make_splits(out, counts, seed, ranges=ranges, bins=bins, size=size, threads=args.threads)
    checksum = dataset_checksum(out)
    print(json.dumps({**counts, "checksum": checksum}))
    return EXIT_OK


def _train_config(args, seed: int, net) -> TrainConfig:
    return TrainConfig(
        stage=args.stage,
        variant=args.variant,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=seed,
        loss=LossConfig(lam=args.lam, mu=args.l2_mu),
        optimizer=args.optimizer,
        patience=args.patience,
        teacher_forcing=args.teacher_forcing,
        augment=not args.no_augment,
        schedule=args.schedule,
        net=net,
    )


def cmd_train(args) -> int:
    from .training import train_stage

    seed = _need_seed(args)
    init = None
    if args.stage == "angle":
        init = _load_ckpt(args.init_from, "stage-1 (--init-from)")
    out = _out_dir(args.out_dir)
    train, val = _load_data(args.data, "train"), _load_data(args.data, "val")
    net = replace(PRESETS[args.preset], bins=train.manifest.bins, input_size=int(train.manifest.header["size"]))
    if init is not None and "net" in init.metadata:
        from .models import NetConfig

        net = NetConfig.from_dict(init.metadata["net"])
        if net.bins != train.manifest.bins:
            raise ConfigError("dataset angle bins differ from the stage-1 checkpoint's")
    cfg = _train_config(args, seed, net)
    result = train_stage(train, val, cfg, init=init)
    name = "perspective" if args.stage == "perspective" else f"angle-{args.variant}"
    save_checkpoint(result.checkpoint, out / f"{name}.rpln")
    _write(out / f"{name}-history.json", json.dumps(result.history, indent=2))
    tr = evaluate(train, result.model, "train")
    va = evaluate(val, result.model, "val")
    _write(out / f"{name}-metrics.json", json.dumps({"train": tr.to_dict(), "val": va.to_dict()}, indent=2, sort_keys=True))
    if args.stage == "perspective":
        print(format_regression_table([(name, tr, va)]))
    else:
        print(format_angle_table([(name, va, va)]).replace("test", "val*"))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args.out_dir)
    model = _model(args)
    data = _load_data(args.data, args.split)
    report = evaluate(data, model, args.split)
    payload = report.to_dict()
    train_dir = Path(args.data) / "train" / "manifest.jsonl"
    if train_dir.is_file():
        from .imaging import Manifest

        recs = Manifest.read(train_dir).records
        mean = np.mean([[r.encoded_px, r.encoded_py] for r in recs], axis=0)
    else:
        mean = data.encoded.mean(axis=0)
    base = mean_predictor_report(data, args.split, mean)
    payload["baseline"] = {"l1": base.l1, "l2": base.l2, "mean": [float(v) for v in mean]}
    _write(out / f"metrics-{args.split}.json", json.dumps(payload, indent=2, sort_keys=True))
    if report.top1 is not None:
        _write(out / f"histogram-{args.split}.csv", report.histogram_csv())
    print(format_regression_table([("model", report, report), ("mean baseline", base, base)]))
    if report.top1 is not None:
        print(format_angle_table([("model", report, report)]))
    return EXIT_OK


def cmd_rectify(args) -> int:
    out = _out_dir(args.out_dir)
    model = _model(args)
    items = _load_images(args.input, model.config.input_size)
    for path, img, small in items:
        pred = rectify_images(model, small[None])
        enc = pred["encoded"][0]
        full = _rectify_full(model, img, pred)
        panels = np.concatenate([img, full["perspective"], full["rectified"]], axis=1)
        save_png(out / f"{path.stem}_rectified.png", panels)
        encoding = model.config.encoding
        record = {
            "input": str(path),
            "encoded": [float(enc[0]), float(enc[1])],
            "px": float(encoding.decode(enc[0])),
            "py": float(encoding.decode(enc[1])),
            "frame_size": model.config.frame_size,
            "theta": None if "theta" not in pred else float(pred["theta"][0]),
            "bin": None if "bin" not in pred else int(pred["bin"][0]),
        }
        _write(out / f"{path.stem}.json", json.dumps(record, indent=2, sort_keys=True))
        print(json.dumps(record))
    return EXIT_OK


def _rectify_full(model, img: np.ndarray, pred: dict) -> dict[str, np.ndarray]:
    """Apply predicted warps to the image at its own resolution."""
    from .stn import supervised_stn_forward

    x = Tensor(img[None, :, :, None].astype(np.float32))
    persp = supervised_stn_forward(model.perspective.stn, Tensor(pred["encoded"][:1]), x)
    rect = persp
    if "theta" in pred:
        rect = supervised_stn_forward(model.angle.rotation_stn, Tensor(pred["theta"][:1]), persp)
    return {"perspective": persp.data[0, :, :, 0], "rectified": rect.data[0, :, :, 0]}


def _tile(act: np.ndarray) -> np.ndarray:
    """[H, W, C] activation -> normalised channel grid with 1-px separators."""
    h, w, c = act.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.ones((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i in range(c):
        ch = act[:, :, i].astype(np.float64)
        lo, hi = ch.min(), ch.max()
        ch = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        r, q = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = ch
    return grid


def layer_activations(model, image: np.ndarray) -> dict[str, np.ndarray]:
    acts: dict[str, Tensor] = {}
    s1 = forward_stage1(model.perspective, image[None], training=False, acts=acts)
    if model.angle is not None:
        forward_stage2(model.angle, s1, training=False, acts=acts)
    return {k: v.data[0] for k, v in acts.items()}


def cmd_dump_features(args) -> int:
    out = _out_dir(args.out_dir)
    model = _model(args)
    (path, _, small), = _load_images([args.input], model.config.input_size)
    acts = layer_activations(model, small)
    if args.layer not in acts:
        raise UnknownLayer(f"unknown layer {args.layer!r}; available: {', '.join(acts)}")
    act = acts[args.layer]
    if act.ndim == 1:
        act = act[None, None, :]
    stem = args.layer.replace(".", "_")
    save_png(out / f"{stem}.png", _tile(act))
    info = {
        "layer": args.layer,
        "input": str(path),
        "shape": list(act.shape),
        "channels": int(act.shape[-1]),
        "channel_max": [float(v) for v in act.reshape(-1, act.shape[-1]).max(axis=0)],
    }
    _write(out / f"{stem}.json", json.dumps(info, indent=2))
    print(json.dumps({k: info[k] for k in ("layer", "shape", "channels")}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values; command-line flags override it")
    common.add_argument("--seed", type=int, help="random seed (required by gen-data and train)")
    common.add_argument("--out-dir", default=".", help="all outputs are written here")
    common.add_argument(
        "--threads", type=int, default=1,
        help="worker threads for data generation and numeric kernels; training is bit-reproducible only with 1",
    )
    common.add_argument("--log-level", default=None, help="overrides the RECTIPLANE_LOG environment variable")

    p = argparse.ArgumentParser(prog="rectiplane", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic train/val/test dataset")
    g.add_argument("--count", type=int, help="total samples, split 80/10/10")
    g.add_argument("--scale", type=float, default=1.0, help="multiplier on the 8000/1000/1000 split")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    g.add_argument("--size", type=int, help="image side in pixels (default from preset)")
    g.add_argument("--theta-deg", type=float, default=30.0, help="rotations are drawn from +-this many degrees")
    g.add_argument("--bin-width", type=float, help="angle bin width in degrees (default from preset)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--data", required=True, help="dataset root holding train/ and val/")
    t.add_argument("--stage", choices=("perspective", "angle"), default="perspective")
    t.add_argument("--variant", choices=("shared", "independent"), default="shared")
    t.add_argument("--init-from", help="stage-1 checkpoint (required for --stage angle)")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--schedule", choices=("constant", "cosine"), default="cosine", help="per-epoch learning-rate schedule")
    t.add_argument("--l2-mu", type=float, default=0.0, help="weight of the squared angle-error penalty")
    t.add_argument("--lam", type=float, default=1.0, help="weight of the angle loss")
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--teacher-forcing", type=float, default=0.5, help="fraction of epochs warping with true parameters")
    t.add_argument("--no-augment", action="store_true", help="disable mirror augmentation")
    t.set_defaults(func=cmd_train)

    def model_flags(sp):
        sp.add_argument("--ckpt-perspective", help="stage-1 checkpoint")
        sp.add_argument("--ckpt-angle", help="stage-2 checkpoint (includes its stage 1)")

    e = sub.add_parser("eval", parents=[common], help="metrics of a model on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    model_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rectify", parents=[common], help="rectify image files")
    r.add_argument("--input", nargs="+", required=True)
    model_flags(r)
    r.set_defaults(func=cmd_rectify)

    d = sub.add_parser("dump-features", parents=[common], help="save one layer's activations as an image grid")
    d.add_argument("--input", required=True)
    d.add_argument("--layer", required=True)
    model_flags(d)
    d.set_defaults(func=cmd_dump_features)
    return p


def parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(values, dict):
            parser.error("config file must hold a JSON object")
        known = vars(args)
        unknown = sorted(k for k in values if k.replace("-", "_") not in known or k in ("command", "func", "config"))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def _setup_logging(level: str | None) -> None:
    name = (level or os.environ.get("RECTIPLANE_LOG") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    _setup_logging(args.log_level)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except DivergedLoss as exc:
        code, msg = EXIT_DIVERGED, exc
    except (CheckpointMissing, FileNotFoundError) as exc:
        code, msg = EXIT_NO_CKPT, exc
    except BadImage as exc:
        code, msg = EXIT_BAD_IMAGE, exc
    except UnknownLayer as exc:
        code, msg = EXIT_BAD_LAYER, exc
    except (UsageError, DatasetEmpty) as exc:
        code, msg = EXIT_USAGE, exc
    except IoFailure as exc:
        code, msg = EXIT_USAGE, exc
    except (RectiplaneError, ValueError, CorruptCheckpoint) as exc:
        code, msg = EXIT_FAIL, exc
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
