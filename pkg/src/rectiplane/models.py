"""Perspective regressor, angle classifier and the band-kernel angle bank."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ParamSet, Tensor
from .errors import ConfigError, InvalidSize
from .geometry import FRAME_SIZE, AngleBins, PerspectiveEncoding
from .stn import StnBlock, supervised_stn_forward


# ---------------------------------------------------------------- band kernels


def band_kernel(k: int, theta: float, bandwidth: float = 1.0, high: float = 1.0, low: float = 0.0, supersample: int = 8) -> np.ndarray:
    """k x k matched filter for a line at screen angle ``theta`` (CCW, radians).

    Each cell takes ``low + (high - low) * coverage`` where coverage is the
    fraction of the cell lying within ``bandwidth / 2`` of the line through the
    kernel centre; the result is shifted to zero mean and scaled to unit
    Frobenius norm.
    """
    if k < 1 or k % 2 == 0:
        raise InvalidSize(f"kernel size must be odd and positive, got {k}")
    if bandwidth < 1:
        raise InvalidSize(f"bandwidth must be >= 1 pixel, got {bandwidth}")
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    c = np.arange(k) - (k - 1) / 2.0
    gx, gy = np.meshgrid(c, c)
    nx, ny = math.sin(theta), math.cos(theta)
    cov = np.zeros((k, k))
    for dy in sub:
        for dx in sub:
            cov += np.abs((gx + dx) * nx + (gy + dy) * ny) <= bandwidth / 2.0
    kern = low + (high - low) * cov / supersample**2
    kern = kern - kern.mean()
    norm = np.linalg.norm(kern)
    return kern / norm if norm > 0 else kern


def band_bank(k: int, bins: AngleBins, bandwidth: float = 1.0) -> np.ndarray:
    """Stack of band kernels, one per bin centre: shape [k, k, C]."""
    return np.stack([band_kernel(k, t, bandwidth) for t in bins.centers()], axis=-1)


def bank_responses(img: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Global max of each bank channel's same-padded response on a 2-D image."""
    x = Tensor(np.asarray(img, dtype=np.float64)[None, :, :, None])
    w = Tensor(bank[:, :, None, :])
    return ops.conv2d(x, w).data.reshape(-1, bank.shape[-1]).max(axis=0)


def estimate_rotation(
    img: np.ndarray,
    bins: AngleBins,
    k: int = 9,
    bandwidths: tuple[float, ...] = (1.0, 2.0, 3.0),
) -> int:
    """Bin whose band kernel responds most strongly to the ink of ``img``.

    Dark-on-light images are inverted so strokes are bright; the strongest
    response over several bandwidths is kept per angle.
    """
    x = np.asarray(img, dtype=np.float64)
    x = np.median(x) - x
    resp = np.max([bank_responses(x, band_bank(k, bins, bw)) for bw in bandwidths], axis=0)
    return int(np.argmax(resp))


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 256
    frame_size: int = FRAME_SIZE
    # (layers, channels) per conv-pool-batchnorm block of the perspective net
    blocks: tuple[tuple[int, int], ...] = ((2, 64), (2, 128), (1, 128), (1, 128))
    stn_tap: int = 2  # block whose pooled output is warped by the stage-1 STN
    fc_layers: int = 3
    fc_width: int = 1024
    dropout: float = 0.5
    stage2_conv: int = 128
    stage2_pool: bool = True
    independent_blocks: tuple[tuple[int, int], ...] = ((2, 64), (2, 128))
    angle_kernel: int = 9
    band_width: float = 2.0
    angle_fc: int = 512
    global_kind: str = "max"
    bins: AngleBins = field(default_factory=AngleBins)
    encoding: PerspectiveEncoding = field(default_factory=PerspectiveEncoding)
    input_offset: float = 0.5

    def validate(self) -> None:
        if self.input_size % (2 ** len(self.blocks)):
            raise ConfigError(f"input {self.input_size} not divisible by 2^{len(self.blocks)}")
        if not 0 <= self.stn_tap < len(self.blocks):
            raise ConfigError(f"stn_tap {self.stn_tap} outside {len(self.blocks)} blocks")
        if self.angle_kernel % 2 == 0 or self.angle_kernel < 1:
            raise ConfigError("angle kernel size must be odd")
        if self.global_kind not in ("max", "avg"):
            raise ConfigError(f"unknown global reduction {self.global_kind!r}")
        if self.fc_layers < 1 or self.fc_width < 1:
            raise ConfigError("need at least one hidden fully connected layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")

    @property
    def feature_size(self) -> int:
        """Side of the map entering the fully connected layers."""
        return self.input_size // 2 ** len(self.blocks)

    @property
    def tap_size(self) -> int:
        return self.input_size // 2 ** (self.stn_tap + 1)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size, "frame_size": self.frame_size,
            "blocks": [list(b) for b in self.blocks], "stn_tap": self.stn_tap,
            "fc_layers": self.fc_layers, "fc_width": self.fc_width, "dropout": self.dropout,
            "stage2_conv": self.stage2_conv, "stage2_pool": self.stage2_pool,
            "independent_blocks": [list(b) for b in self.independent_blocks],
            "angle_kernel": self.angle_kernel, "band_width": self.band_width, "angle_fc": self.angle_fc,
            "global_kind": self.global_kind, "bins": self.bins.to_dict(),
            "encoding": {"scale": self.encoding.scale, "offset": self.encoding.offset, "p_max": self.encoding.p_max},
            "input_offset": self.input_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        d["independent_blocks"] = tuple(tuple(b) for b in d["independent_blocks"])
        d["bins"] = AngleBins(**d["bins"])
        d["encoding"] = PerspectiveEncoding(**d["encoding"])
        return cls(**d)


FULL_CONFIG = NetConfig()

DESK_CONFIG = NetConfig(
    input_size=64,
    blocks=((2, 16), (2, 32), (2, 64)),
    stn_tap=0,
    fc_width=256,
    dropout=0.2,
    stage2_conv=32,
    stage2_pool=False,
    independent_blocks=((2, 16),),
    angle_kernel=5,
    band_width=1.0,
    angle_fc=128,
    bins=AngleBins(-30.0, 30.0, 4.0),
)

PRESETS = {"full": FULL_CONFIG, "desk": DESK_CONFIG}


# ---------------------------------------------------------------- layers


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


class Conv:
    def __init__(self, params: ParamSet, name: str, k: int, cin: int, cout: int, rng: np.random.Generator):
        self.name = name
        self.w = params.add(f"{name}.w", glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
        self.b = params.add(f"{name}.b", np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b)


class Dense:
    def __init__(self, params: ParamSet, name: str, din: int, dout: int, rng: np.random.Generator):
        self.name = name
        self.w = params.add(f"{name}.w", glorot(rng, (din, dout), din, dout))
        self.b = params.add(f"{name}.b", np.zeros(dout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.w, self.b)


class BatchNorm:
    def __init__(self, params: ParamSet, name: str, c: int):
        self.name = name
        self.gamma = params.add(f"{name}.gamma", np.ones(c, np.float32))
        self.beta = params.add(f"{name}.beta", np.zeros(c, np.float32))
        self.running_mean = params.add_buffer(f"{name}.running_mean", np.zeros(c, np.float32))
        self.running_var = params.add_buffer(f"{name}.running_var", np.ones(c, np.float32))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class ConvBlock:
    """``layers`` ReLU convolutions, 2x2 max pool, batch norm."""

    def __init__(self, params: ParamSet, name: str, layers: int, cin: int, cout: int, rng: np.random.Generator):
        self.name = name
        self.convs = [Conv(params, f"{name}.conv{i}", 3, cin if i == 0 else cout, cout, rng) for i in range(layers)]
        self.bn = BatchNorm(params, f"{name}.bn", cout)

    def __call__(self, x: Tensor, training: bool, acts: dict | None = None) -> tuple[Tensor, Tensor]:
        """Returns (pooled pre-norm output, normalised output)."""
        for conv in self.convs:
            x = ops.relu(conv(x))
            if acts is not None:
                acts[conv.name] = x
        pooled = ops.maxpool2(x)
        out = self.bn(pooled, training)
        if acts is not None:
            acts[f"{self.name}.pool"] = pooled
            acts[f"{self.name}.bn"] = out
        return pooled, out


# ---------------------------------------------------------------- networks


class PerspectiveNet:
    def __init__(self, config: NetConfig, rng: np.random.Generator, prefix: str = "stage1"):
        config.validate()
        self.config = config
        self.params = ParamSet()
        cin = 1
        self.blocks = []
        for i, (layers, ch) in enumerate(config.blocks):
            self.blocks.append(ConvBlock(self.params, f"{prefix}.block{i}", layers, cin, ch, rng))
            cin = ch
        flat = config.feature_size**2 * cin
        self.fcs = []
        for i in range(config.fc_layers):
            self.fcs.append(Dense(self.params, f"{prefix}.fc{i}", flat if i == 0 else config.fc_width, config.fc_width, rng))
        self.head = Dense(self.params, f"{prefix}.head", config.fc_width, 2, rng)
        # start every prediction at the encoding of zero perspective
        self.head.b.data[:] = config.encoding.encode(0.0)
        self.stn = StnBlock("perspective", config.encoding, config.frame_size)
        self.tap_channels = config.blocks[config.stn_tap][1]

    def prepare(self, images) -> Tensor:
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
        if x.ndim == 3:
            x = x[..., None]
        s = self.config.input_size
        if x.shape[1:] != (s, s, 1):
            raise ConfigError(f"expected images of shape [N, {s}, {s}, 1], got {x.shape}")
        return Tensor(x - self.config.input_offset)

    def features(self, images, training: bool, acts: dict | None = None, upto: int | None = None) -> tuple[Tensor, Tensor | None]:
        """Run the conv blocks; returns (pooled tap output, final normalised map)."""
        x = self.prepare(images)
        tap = None
        last = len(self.blocks) - 1 if upto is None else upto
        for i, block in enumerate(self.blocks[: last + 1]):
            pooled, x = block(x, training, acts)
            if i == self.config.stn_tap:
                tap = pooled
        return tap, x

    def regress(self, fmap: Tensor, training: bool, rng: np.random.Generator | None, acts: dict | None = None) -> Tensor:
        x = ops.flatten(fmap)
        for fc in self.fcs:
            x = ops.dropout(ops.relu(fc(x)), self.config.dropout, training, rng)
            if acts is not None:
                acts[fc.name] = x
        # the encoding is positive by construction; |x| keeps the head
        # non-negative without the flat region where ReLU or softplus stall
        out = ops.absolute(self.head(x))
        if acts is not None:
            acts[self.head.name] = out
        return out


@dataclass
class Stage1Output:
    encoded: Tensor  # [N, 2] head prediction
    rectified_features: Tensor | None  # STN-warped tap map
    rectified_images: Tensor | None  # STN-warped input images
    warp_params: Any = None  # encoded values actually used for the warps


def forward_stage1(
    net: PerspectiveNet,
    images,
    training: bool = False,
    rng: np.random.Generator | None = None,
    warp_with=None,
    want_features: bool = True,
    want_images: bool = True,
    acts: dict | None = None,
) -> Stage1Output:
    """Predict encoded (px, py) and warp tap features / images by its inverse.

    ``warp_with`` substitutes other encoded parameters (e.g. ground truth for
    teacher forcing) for the warps; the returned ``encoded`` is always the
    network's own prediction.
    """
    tap, fmap = net.features(images, training, acts)
    encoded = net.regress(fmap, training, rng, acts)
    params = encoded if warp_with is None else Tensor(np.asarray(warp_with, dtype=np.float64))
    feats = supervised_stn_forward(net.stn, params, tap) if want_features else None
    imgs = None
    if want_images:
        raw = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
        if raw.ndim == 3:
            raw = raw[..., None]
        imgs = supervised_stn_forward(net.stn, params, Tensor(raw))
    if acts is not None and feats is not None:
        acts["stage1.stn"] = feats
    return Stage1Output(encoded, feats, imgs, params)


class AngleNet:
    """Angle classifier over ``bins.count`` classes.

    ``shared`` consumes the stage-1 STN-rectified tap features (so it reuses the
    perspective net's early blocks); ``independent`` runs its own fresh blocks
    on the stage-1-rectified image.
    """

    def __init__(self, config: NetConfig, rng: np.random.Generator, variant: str = "shared", perspective: PerspectiveNet | None = None, prefix: str = "stage2"):
        if variant not in ("shared", "independent"):
            raise ConfigError(f"unknown angle-net variant {variant!r}")
        if variant == "shared" and perspective is None:
            raise ConfigError("shared variant needs the perspective net it shares with")
        config.validate()
        self.config = config
        self.variant = variant
        self.perspective = perspective
        self.params = ParamSet()
        self.blocks = []
        if variant == "shared":
            cin = perspective.tap_channels
        else:
            cin = 1
            for i, (layers, ch) in enumerate(config.independent_blocks):
                self.blocks.append(ConvBlock(self.params, f"{prefix}.block{i}", layers, cin, ch, rng))
                cin = ch
        self.conv = Conv(self.params, f"{prefix}.conv", 3, cin, config.stage2_conv, rng)
        self.bn = BatchNorm(self.params, f"{prefix}.bn", config.stage2_conv)
        n, k = config.bins.count, config.angle_kernel
        self.bank = Conv(self.params, f"{prefix}.angle_bank", k, config.stage2_conv, n, rng)
        bank = band_bank(k, config.bins, config.band_width)
        # match the Glorot magnitude of a k x k slice
        scale = k * math.sqrt(6.0 / (k * k * (config.stage2_conv + n))) / math.sqrt(3.0)
        self.bank.w.data[...] = (bank[:, :, None, :] * scale).astype(np.float32)
        self.fc = Dense(self.params, f"{prefix}.fc", n, config.angle_fc, rng)
        self.out = Dense(self.params, f"{prefix}.logits", config.angle_fc, n, rng)
        self.rotation_stn = StnBlock("rotation", config.encoding, config.frame_size)

    @property
    def backbone_params(self) -> list[Tensor]:
        """Stage-1 tensors this classifier reads through (shared variant only)."""
        if self.variant != "shared":
            return []
        p = self.perspective
        return [t for b in p.blocks[: p.config.stn_tap + 1] for t in _block_tensors(b)]


def _block_tensors(block: ConvBlock) -> list[Tensor]:
    out = []
    for c in block.convs:
        out += [c.w, c.b]
    return out + [block.bn.gamma, block.bn.beta]


def forward_stage2(net: AngleNet, stage1: Stage1Output, training: bool = False, rng: np.random.Generator | None = None, acts: dict | None = None) -> Tensor:
    """Logits over the angle bins."""
    if net.variant == "shared":
        x = stage1.rectified_features
        if x is None:
            raise ConfigError("shared variant needs rectified features from stage 1")
    else:
        if stage1.rectified_images is None:
            raise ConfigError("independent variant needs rectified images from stage 1")
        x = Tensor(stage1.rectified_images.data - net.config.input_offset)
        for block in net.blocks:
            _, x = block(x, training, acts)
    x = ops.relu(net.conv(x))
    if acts is not None:
        acts[net.conv.name] = x
    if net.config.stage2_pool:
        x = ops.maxpool2(x)
    x = net.bn(x, training)
    resp = net.bank(x)
    if acts is not None:
        acts[net.bank.name] = resp
    g = ops.global_reduce(resp, net.config.global_kind)
    h = ops.dropout(ops.relu(net.fc(g)), net.config.dropout, training, rng)
    return net.out(h)


@dataclass
class Rectifier:
    """Both stages together; the unit that checkpoints are saved from."""

    perspective: PerspectiveNet
    angle: AngleNet | None = None

    @property
    def config(self) -> NetConfig:
        return self.perspective.config

    def params(self) -> ParamSet:
        ps = ParamSet()
        ps.update(self.perspective.params)
        if self.angle is not None:
            ps.update(self.angle.params)
        return ps

    def param_count(self) -> int:
        return self.params().count()


def build_perspective_net(config: NetConfig, seed: int = 0) -> PerspectiveNet:
    return PerspectiveNet(config, np.random.default_rng(np.random.SeedSequence([seed, 1])))


def build_angle_net(config: NetConfig, perspective: PerspectiveNet, variant: str = "shared", seed: int = 0) -> AngleNet:
    if perspective.config.bins != config.bins:
        raise ConfigError("angle bins differ between the stages")
    return AngleNet(config, np.random.default_rng(np.random.SeedSequence([seed, 2])), variant, perspective)


def rectify_images(model: Rectifier, images, fill=None) -> dict[str, np.ndarray]:
    """Full inference: predicted encodings, angles and both rectified panels."""
    p1 = forward_stage1(model.perspective, images, training=False)
    out = {"encoded": p1.encoded.data.astype(np.float64), "perspective": p1.rectified_images.data[..., 0]}
    if model.angle is not None:
        logits = forward_stage2(model.angle, p1, training=False).data
        bins = model.config.bins
        idx = logits.argmax(axis=1)
        theta = bins.centers()[idx]
        rect = supervised_stn_forward(model.angle.rotation_stn, theta, p1.rectified_images)
        out.update(logits=logits, bin=idx, theta=theta, rectified=rect.data[..., 0])
    return out
