"""Losses, stage-wise training, evaluation metrics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tape, Tensor
from .checkpoint import Checkpoint
from .errors import CheckpointMissing, ConfigError, DatasetEmpty, DivergedLoss, ShapeMismatch
from .geometry import AngleBins
from .imaging import LoadedSplit
from .models import (
    DESK_CONFIG,
    NetConfig,
    Rectifier,
    build_angle_net,
    build_perspective_net,
    forward_stage1,
    forward_stage2,
)

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 2e-5, 1e-5)
TOP_K = (1, 2, 5)


# ---------------------------------------------------------------- losses


def loss_perspective(pred: Tensor, target) -> Tensor:
    """Mean squared Euclidean distance in encoded units."""
    return ops.l2_loss(pred, np.asarray(target, dtype=np.float64))


def loss_angle(logits: Tensor, bin_targets, mu: float = 0.0, bins: AngleBins | None = None, thetas=None) -> Tensor:
    """Cross-entropy over bins, plus ``mu * (E[bin centre] - theta)^2`` in degrees."""
    ce = ops.softmax_cross_entropy(logits, np.asarray(bin_targets))
    if mu <= 0:
        return ce
    if bins is None or thetas is None:
        raise ConfigError("the squared-error penalty needs bins and true angles")
    n, c = logits.shape
    if c != bins.count:
        raise ShapeMismatch(f"{c} logits for {bins.count} bins")
    centers = Tensor(np.degrees(bins.centers()).reshape(c, 1))
    expected = ops.matmul(ops.softmax(logits), centers)
    diff = ops.sub(expected, np.degrees(np.asarray(thetas, dtype=np.float64)).reshape(n, 1))
    return ops.add(ce, ops.mul(ops.mean(ops.square(diff)), mu))


def loss_total(perspective_term, angle_term, lam: float = 1.0) -> Tensor:
    return ops.add(perspective_term, ops.mul(angle_term, lam))


# ---------------------------------------------------------------- optimisers


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)


# ---------------------------------------------------------------- configuration


@dataclass
class LossConfig:
    lam: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    stage: str = "perspective"  # or "angle"
    variant: str = "shared"  # or "independent"
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    patience: int = 10
    teacher_forcing: float = 0.5  # fraction of epochs warping with ground truth
    augment: bool = True  # random horizontal/vertical mirroring with exact label updates
    schedule: str = "constant"  # or "cosine": per-epoch decay from learning_rate towards 0
    divergence_factor: float = 1e6  # loss above this multiple of the first step's counts as diverged
    net: NetConfig = DESK_CONFIG

    def validate(self) -> None:
        if self.stage not in ("perspective", "angle"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.variant not in ("shared", "independent"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.learning_rate <= 0 or self.batch_size < 2 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("learning rate, batch size (>= 2), epochs and patience must be positive")
        if self.divergence_factor <= 1:
            raise ConfigError("divergence factor must exceed 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "net"}
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["net"] = NetConfig.from_dict(d["net"]) if "net" in d else DESK_CONFIG
        return cls(**d)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    split: str
    n: int
    l2: float | None = None
    l1: float | None = None
    top1: float | None = None
    top2: float | None = None
    top5: float | None = None
    var: float | None = None
    mean_error: float | None = None
    histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = {str(k): v for k, v in sorted(self.histogram.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def histogram_csv(self) -> str:
        rows = ["bin_error,count"] + [f"{k},{v}" for k, v in sorted(self.histogram.items())]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["histogram"] = {int(k): int(v) for k, v in d.get("histogram", {}).items()}
        return cls(**d)


def regression_metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(l2, l1): mean squared distance per sample and mean absolute error per value."""
    e = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return float(np.mean(np.sum(e * e, axis=1))), float(np.mean(np.abs(e)))


def classification_metrics(logits: np.ndarray, targets: np.ndarray) -> dict:
    logits = np.asarray(logits, np.float64)
    targets = np.asarray(targets, np.int64)
    n = len(targets)
    order = np.argsort(-logits, axis=1, kind="stable")
    rank = np.argmax(order == targets[:, None], axis=1)
    out = {f"top{k}": float(np.mean(rank < k)) for k in TOP_K}
    err = order[:, 0] - targets
    out["var"] = float(np.var(err)) if n else 0.0
    out["mean_error"] = float(np.mean(err)) if n else 0.0
    out["histogram"] = dict(Counter(int(e) for e in err))
    return out


def predict(model: Rectifier, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode encoded predictions and (if an angle stage exists) logits."""
    enc, logits = [], []
    angle = model.angle
    for s in range(0, len(images), batch_size):
        x = images[s:s + batch_size]
        out = forward_stage1(
            model.perspective,
            x,
            training=False,
            want_features=angle is not None and angle.variant == "shared",
            want_images=angle is not None and angle.variant == "independent",
        )
        enc.append(out.encoded.data.astype(np.float64))
        if angle is not None:
            logits.append(forward_stage2(angle, out, training=False).data.astype(np.float64))
    e = np.concatenate(enc) if enc else np.zeros((0, 2))
    return e, (np.concatenate(logits) if angle is not None and logits else None)


def evaluate_predictions(split_name: str, data: LoadedSplit, encoded: np.ndarray | None, logits: np.ndarray | None) -> MetricsReport:
    rep = MetricsReport(split=split_name, n=len(data))
    if encoded is not None:
        rep.l2, rep.l1 = regression_metrics(encoded, data.encoded)
    if logits is not None:
        m = classification_metrics(logits, data.bins)
        rep.top1, rep.top2, rep.top5 = m["top1"], m["top2"], m["top5"]
        rep.var, rep.mean_error, rep.histogram = m["var"], m["mean_error"], m["histogram"]
    return rep


def evaluate(data: LoadedSplit, model: Rectifier, split_name: str = "val") -> MetricsReport:
    if len(data) == 0:
        raise DatasetEmpty(f"split {split_name!r} is empty")
    enc, logits = predict(model, data.images)
    return evaluate_predictions(split_name, data, enc, logits)


def mean_predictor_report(data: LoadedSplit, split_name: str = "val", mean: np.ndarray | None = None) -> MetricsReport:
    """Metrics of a predictor that always outputs one constant encoding."""
    m = data.encoded.mean(axis=0) if mean is None else np.asarray(mean)
    return evaluate_predictions(split_name, data, np.broadcast_to(m, data.encoded.shape), None)


def _fmt(v, pct=False) -> str:
    if v is None:
        return "-"
    return f"{100 * v:.2f}%" if pct else f"{v:.4f}"


def format_regression_table(rows: list[tuple[str, MetricsReport, MetricsReport]]) -> str:
    lines = [
        f"{'Expr.':<14}| {'l2 train':>10} {'l2 val':>10} | {'l1 train':>10} {'l1 val':>10}",
        "-" * 62,
    ]
    for name, tr, va in rows:
        lines.append(f"{name:<14}| {_fmt(tr.l2):>10} {_fmt(va.l2):>10} | {_fmt(tr.l1):>10} {_fmt(va.l1):>10}")
    return "\n".join(lines)


def format_angle_table(rows: list[tuple[str, MetricsReport, MetricsReport]]) -> str:
    head = f"{'Expr.':<14}| {'Acc val':>9} {'Acc test':>9} | {'Var val':>8} {'Var test':>8} | {'Top2 val':>9} {'Top2 test':>9} | {'Top5 val':>9} {'Top5 test':>9}"
    lines = [head, "-" * len(head)]
    for name, va, te in rows:
        lines.append(
            f"{name:<14}| {_fmt(va.top1, True):>9} {_fmt(te.top1, True):>9} | {_fmt(va.var):>8} {_fmt(te.var):>8} | "
            f"{_fmt(va.top2, True):>9} {_fmt(te.top2, True):>9} | {_fmt(va.top5, True):>9} {_fmt(te.top5, True):>9}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- training


@dataclass
class Batch:
    images: np.ndarray
    encoded: np.ndarray
    bins: np.ndarray
    thetas: np.ndarray


def mirror_batch(batch: Batch, codes: np.ndarray, bins: AngleBins, encoding) -> Batch:
    """Mirror sample i horizontally if ``codes[i] & 1`` and vertically if ``codes[i] & 2``.

    Conjugating the distortion by a reflection negates the perspective
    coefficient along the flipped axis and the rotation angle, so labels
    transform exactly: encoded ``e -> 2 * scale * offset - e``.
    """
    imgs = batch.images.copy()
    enc = batch.encoded.copy()
    thetas = batch.thetas.copy()
    mid = 2.0 * encoding.scale * encoding.offset
    for i, c in enumerate(codes):
        if c & 1:
            imgs[i] = imgs[i][:, ::-1]
            enc[i, 0] = mid - enc[i, 0]
        if c & 2:
            imgs[i] = imgs[i][::-1]
            enc[i, 1] = mid - enc[i, 1]
        if c in (1, 2):
            thetas[i] = -thetas[i]
    new_bins = np.array([bins.index(t) for t in thetas], dtype=np.int64)
    return Batch(imgs, enc, new_bins, thetas)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Rectifier
    history: list[dict]
    step_losses: list[float]
    best_epoch: int


def model_state(model: Rectifier) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=np.float32) for k, v in model.params().state().items()}


def load_model(stage1: Checkpoint | None, stage2: Checkpoint | None = None) -> Rectifier:
    """Rebuild a model from checkpoints; an angle checkpoint carries both stages."""
    if stage2 is not None:
        net = NetConfig.from_dict(stage2.metadata["net"])
        persp = build_perspective_net(net)
        angle = build_angle_net(net, persp, stage2.metadata.get("variant", "shared"))
        model = Rectifier(persp, angle)
        model.params().load_state(stage2.tensors)
        return model
    if stage1 is None:
        raise CheckpointMissing("no checkpoint given")
    net = NetConfig.from_dict(stage1.metadata["net"])
    model = Rectifier(build_perspective_net(net))
    model.params().load_state(stage1.tensors)
    return model


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "cosine":
        return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * epoch / config.epochs))
    return config.learning_rate


def _check_finite(loss: float, step: int, limit: float = math.inf) -> None:
    if not math.isfinite(loss):
        raise DivergedLoss(f"loss became {loss} at step {step}")
    if loss > limit:
        raise DivergedLoss(f"loss {loss:.3g} at step {step} exceeds the divergence limit {limit:.3g}")


def train_stage(
    train: LoadedSplit,
    val: LoadedSplit,
    config: TrainConfig,
    init: Checkpoint | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch training of one stage with best-validation checkpointing.

    Perspective stage: the head is fit to encoded (px, py).  Angle stage:
    starts from a stage-1 checkpoint; the shared variant fine-tunes the
    backbone under ``l2 + lam * (CE [+ mu term])`` while the independent
    variant keeps stage 1 frozen and trains only its own tensors.
    """
    config.validate()
    if len(train) == 0:
        raise DatasetEmpty("training split is empty")
    if len(val) == 0:
        raise DatasetEmpty("validation split is empty")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    net = config.net
    if train.images.shape[1] != net.input_size:
        raise ConfigError(f"images are {train.images.shape[1]} px, network expects {net.input_size}")

    if config.stage == "perspective":
        model = Rectifier(build_perspective_net(net, config.seed))
        trainable = list(model.perspective.params)
    else:
        if init is None:
            raise CheckpointMissing("angle stage needs a stage-1 checkpoint")
        stage1_net = NetConfig.from_dict(init.metadata["net"]) if "net" in init.metadata else net
        if stage1_net != net:
            raise ConfigError("stage-1 checkpoint was trained with a different network config")
        persp = build_perspective_net(net, config.seed)
        persp.params.load_state(init.tensors)
        model = Rectifier(persp, build_angle_net(net, persp, config.variant, config.seed))
        trainable = list(model.angle.params)
        if config.variant == "shared":
            trainable = list(model.perspective.params) + trainable

    opt = Adam(trainable, config.learning_rate) if config.optimizer == "adam" else SGD(trainable, config.learning_rate)
    n = len(train)
    bs = min(config.batch_size, n)
    tf_epochs = int(round(config.teacher_forcing * config.epochs))
    history: list[dict] = []
    step_losses: list[float] = []
    best_score, best_epoch, best_state = -math.inf, -1, None
    stale = 0
    step = 0
    limit = math.inf
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        forced = epoch < tf_epochs
        opt.lr = learning_rate_at(config, epoch)
        for s in range(0, n - bs + 1, bs):
            idx = np.sort(order[s:s + bs])
            batch = Batch(train.images[idx], train.encoded[idx], train.bins[idx], train.thetas[idx])
            if config.augment:
                batch = mirror_batch(batch, rng.integers(0, 4, size=len(idx)), net.bins, net.encoding)
            for p in trainable:
                p.grad = None
            if config.stage == "perspective":
                with Tape() as tape:
                    out = forward_stage1(model.perspective, batch.images, training=True, rng=rng, want_features=False, want_images=False)
                    loss = loss_perspective(out.encoded, batch.encoded)
                    val_loss = float(loss.data)
                    _check_finite(val_loss, step)
                    tape.backward(loss)
            else:
                val_loss = _angle_step(model, config, batch, forced, rng)
            if not step_losses:
                limit = config.divergence_factor * max(val_loss, 1e-12)
            _check_finite(val_loss, step, limit)
            step_losses.append(val_loss)
            opt.step()
            step += 1
        report = evaluate(val, model, "val")
        score = -report.l1 if config.stage == "perspective" else report.top1
        recent = step_losses[-max(1, n // bs):]
        entry = {"epoch": epoch, "train_loss": float(np.mean(recent)), "val": report.to_dict(), "teacher_forced": forced}
        history.append(entry)
        log.info("epoch %d loss %.4f val %s", epoch, entry["train_loss"],
                 f"l1={report.l1:.4f}" if config.stage == "perspective" else f"top1={report.top1:.3f}")
        if on_epoch is not None:
            on_epoch(entry)
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, model_state(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop after %d stale epochs", stale)
                break
    model.params().load_state(best_state)
    meta = {
        "net": net.to_dict(),
        "train": config.to_dict(),
        "variant": config.variant,
        "epoch": best_epoch,
        "metrics": history[best_epoch]["val"],
        "l2_angle_penalty": config.loss.mu > 0,
    }
    ckpt = Checkpoint(config.stage, best_state, meta)
    return TrainResult(ckpt, model, history, step_losses, best_epoch)


def _angle_step(model: Rectifier, config: TrainConfig, batch: Batch, forced: bool, rng) -> float:
    persp, angle = model.perspective, model.angle
    warp_with = batch.encoded if forced else None
    bins = config.net.bins
    mu = config.loss.mu
    if angle.variant == "shared":
        with Tape() as tape:
            s1 = forward_stage1(persp, batch.images, training=True, rng=rng, warp_with=warp_with, want_images=False)
            logits = forward_stage2(angle, s1, training=True, rng=rng)
            a_term = loss_angle(logits, batch.bins, mu, bins, batch.thetas)
            loss = loss_total(loss_perspective(s1.encoded, batch.encoded), a_term, config.loss.lam)
            value = float(loss.data)
            _check_finite(value, -1)
            tape.backward(loss)
        return value
    # independent: stage 1 is frozen, evaluated outside the tape
    s1 = forward_stage1(persp, batch.images, training=False, warp_with=warp_with, want_features=False)
    with Tape() as tape:
        logits = forward_stage2(angle, s1, training=True, rng=rng)
        loss = ops.mul(loss_angle(logits, batch.bins, mu, bins, batch.thetas), config.loss.lam)
        value = float(loss.data)
        _check_finite(value, -1)
        tape.backward(loss)
    return value
