"""Images, procedural scenes, non-differentiable warping and datasets.

Images are float arrays in [0, 1], shape (H, W) for grayscale or (H, W, C).
The renderer draws dark, word-broken horizontal bands on a light ground
(optionally under a textured "picture" block for caption-style patches); the
dataset generator distorts each scene with a sampled planar transform.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ConstraintUnsatisfiable, IoFailure, SpecTooLarge
from .geometry import (
    FRAME_SIZE,
    AngleBins,
    Homography,
    PerspectiveEncoding,
    PlanarParams,
    apply_many,
    centered_grid,
    invert,
    rescale,
    stagewise_homography,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "rectiplane-manifest"
MANIFEST_VERSION = 1
MAX_REJECTIONS = 1000


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"image must be HxW or HxWx{{1,3}}, got {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "text"  # "text" or "caption"
    line_count: int = 4
    line_thickness: float = 4.0
    line_spacing: float = 4.0
    ink: float = 0.15
    background: float = 0.9
    noise_sigma: float = 0.0
    glyph_jitter: float = 0.0
    caption_block_fraction: float = 0.4
    blur_sigma: float = 0.0

    def validate(self, size: int) -> None:
        if self.kind not in ("text", "caption"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.line_count < 2:
            raise ValueError("need at least two text lines")
        if not 0.0 <= self.ink < self.background <= 1.0:
            raise ValueError("ink must be darker than the background")
        if self.line_thickness < 1 or self.line_spacing < 1:
            raise ValueError("line thickness and spacing must be at least one pixel")
        avail = size * (1.0 - self.caption_block_fraction) if self.kind == "caption" else size
        if self.line_count * (self.line_thickness + self.line_spacing) > avail:
            raise SpecTooLarge(
                f"{self.line_count} lines of {self.line_thickness}+{self.line_spacing}px do not fit in {avail:.1f}px"
            )


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1) covered by [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _paint_rect(img: np.ndarray, x0: float, x1: float, y0: float, y1: float, value: float) -> None:
    h, w = img.shape
    cov = np.outer(_coverage_1d(y0, y1, h), _coverage_1d(x0, x1, w))
    img *= 1.0 - cov
    img += value * cov


def _draw_text_lines(img, spec: SceneSpec, rng: np.random.Generator, top: float, bottom: float) -> None:
    h, w = img.shape
    t, s = spec.line_thickness, spec.line_spacing
    block = spec.line_count * t + (spec.line_count - 1) * s
    slack = max(bottom - top - block, 0.0)
    y = top + rng.uniform(0.0, slack) if slack > 0 else top
    # patches are crops of a page, so lines run (almost) edge to edge
    left = w * rng.uniform(0.0, 0.04)
    for line in range(spec.line_count):
        right = w * rng.uniform(0.96, 1.0)
        if line == spec.line_count - 1 and spec.line_count > 2:
            right = left + (right - left) * rng.uniform(0.4, 0.95)
        x = left + (t * rng.uniform(0.0, 2.0) if line == 0 else 0.0)
        while x < right:
            word = t * rng.uniform(2.0, 7.0)
            thick = max(1.0, t + spec.glyph_jitter * rng.uniform(-0.5, 0.5))
            dy = spec.glyph_jitter * rng.uniform(-0.25, 0.25)
            yc = y + t / 2.0 + dy
            _paint_rect(img, x, min(x + word, right), yc - thick / 2.0, yc + thick / 2.0, spec.ink)
            gap = max(1.0, t * rng.uniform(0.6, 1.4) + spec.glyph_jitter * rng.uniform(-1.0, 1.0))
            x += word + gap
        y += t + s


def _draw_picture(img, spec: SceneSpec, rng: np.random.Generator, bottom: float) -> None:
    h, w = img.shape
    x0, x1 = int(round(w * rng.uniform(0.0, 0.06))), int(round(w * rng.uniform(0.94, 1.0)))
    y0, y1 = int(round(h * rng.uniform(0.0, 0.04))), int(math.floor(bottom))
    if x1 - x0 < 2 or y1 - y0 < 2:
        return
    field_ = ndimage.gaussian_filter(rng.normal(size=(y1 - y0, x1 - x0)), sigma=max(1.0, w / 32.0))
    span = np.ptp(field_)
    field_ = (field_ - field_.min()) / span if span > 0 else np.zeros_like(field_)
    lo, hi = spec.ink, spec.background
    patch = lo + (hi - lo) * (0.15 + 0.6 * field_)
    # a few geometric shapes on top of the texture
    yy, xx = np.mgrid[0:y1 - y0, 0:x1 - x0]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, y1 - y0), rng.uniform(0, x1 - x0)
        ry, rx = rng.uniform(0.1, 0.4) * (y1 - y0), rng.uniform(0.1, 0.4) * (x1 - x0)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        patch[inside] = lo + (hi - lo) * rng.uniform(0.0, 0.5)
    img[y0:y1, x0:x1] = patch


def render_scene(spec: SceneSpec, size: int, seed: int) -> np.ndarray:
    """Deterministic grayscale rendering of ``spec`` on a ``size`` x ``size`` patch."""
    spec.validate(size)
    rng = np.random.default_rng(seed)
    img = np.full((size, size), spec.background, dtype=np.float64)
    if spec.kind == "caption":
        split = size * spec.caption_block_fraction
        _draw_picture(img, spec, rng, split)
        _draw_text_lines(img, spec, rng, split + spec.line_spacing, size)
    else:
        _draw_text_lines(img, spec, rng, 0.0, size)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def random_scene_spec(rng: np.random.Generator, size: int) -> SceneSpec:
    """Draw a varied scene description scaled to ``size`` pixels."""
    kind = "text" if rng.random() < 0.65 else "caption"
    t = size * rng.uniform(0.045, 0.075)
    s = t * rng.uniform(0.8, 1.5)
    frac = rng.uniform(0.35, 0.5) if kind == "caption" else 0.0
    avail = size * (1.0 - frac) * 0.97
    max_lines = int(avail // (t + s))
    if max_lines < 2:
        t = s = avail / 4.0
        max_lines = 2
    n = int(rng.integers(max(2, max_lines - 1), max_lines + 1))
    bg = rng.uniform(0.7, 0.98)
    return SceneSpec(
        kind=kind,
        line_count=n,
        line_thickness=float(t),
        line_spacing=float(s),
        ink=float(rng.uniform(0.02, 0.3)),
        background=float(bg),
        noise_sigma=float(rng.uniform(0.0, 0.02)),
        glyph_jitter=float(0.15 * t),
        caption_block_fraction=float(frac) if kind == "caption" else 0.4,
        blur_sigma=float(rng.uniform(0.3, 0.7) * size / 64.0),
    )


def render_line(size: int, theta: float, width: float = 1.0, supersample: int = 8) -> np.ndarray:
    """Bright anti-aliased line through the centre at screen angle ``theta``
    (counter-clockwise, radians) on a black ground."""
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    gx, gy = centered_grid(size, size)
    # distance from the line with direction (cos t, -sin t) in y-down coords
    nx, ny = math.sin(theta), math.cos(theta)
    acc = np.zeros((size, size))
    for dy in sub:
        for dx in sub:
            acc += np.abs((gx + dx) * nx + (gy + dy) * ny) <= width / 2.0
    return acc / supersample**2


# ---------------------------------------------------------------- warping


def warp(img: np.ndarray, h: Homography, out_size: int | tuple[int, int] | None = None, fill: float | None = None) -> np.ndarray:
    """Inverse-map ``img`` through ``h`` with bilinear interpolation.

    Output pixel ``q`` takes the input value at ``apply(invert(h), q)``, both in
    centred coordinates of their own image.  Samples beyond the input blend
    into ``fill`` (default: median of the input's border pixels).
    """
    img = np.asarray(img, dtype=np.float64)
    hin, win = img.shape[:2]
    if out_size is None:
        hout, wout = hin, win
    elif isinstance(out_size, int):
        hout = wout = out_size
    else:
        hout, wout = out_size
    hinv = invert(h)
    gx, gy = centered_grid(hout, wout)
    sx, sy = apply_many(hinv, gx, gy)
    coords = [sy + (hin - 1) / 2.0, sx + (win - 1) / 2.0]
    if fill is None:
        fill = float(np.median(np.concatenate([img[0].ravel(), img[-1].ravel(), img[:, 0].ravel(), img[:, -1].ravel()])))
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="grid-constant", cval=fill)
    return np.stack(
        [ndimage.map_coordinates(img[..., ch], coords, order=1, mode="grid-constant", cval=fill) for ch in range(img.shape[2])],
        axis=-1,
    )


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParamRanges:
    """Closed sampling intervals, in reference-frame units."""

    theta: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    alpha: tuple[float, float] = (0.5, 0.8)
    px: tuple[float, float] = (-9e-4, 9e-4)
    py: tuple[float, float] = (-9e-4, 9e-4)
    tx: tuple[float, float] = (-12.0, 12.0)
    ty: tuple[float, float] = (-12.0, 12.0)

    @classmethod
    def for_theta_span(cls, span: float, **kw) -> "ParamRanges":
        """Symmetric rotation range of total width ``span`` radians."""
        return cls(theta=(-span / 2.0, span / 2.0), **kw)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamRanges":
        return cls(**{k: tuple(float(x) for x in v) for k, v in d.items()})


def content_fits(p: PlanarParams, frame_size: int = FRAME_SIZE) -> bool:
    """True when all four patch corners stay inside the canvas after the
    stage-wise transform."""
    half = frame_size / 2.0
    cx = np.array([-half, half, half, -half])
    cy = np.array([-half, -half, half, half])
    h = stagewise_homography(p)
    zh = h.m[2, 0] * cx + h.m[2, 1] * cy + 1.0
    if np.any(zh <= 1e-6):
        return False
    x, y = apply_many(h, cx, cy)
    return bool(np.all(np.abs(x) <= half) and np.all(np.abs(y) <= half))


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_params(ranges: ParamRanges, frame_size: int = FRAME_SIZE, seed=None) -> PlanarParams:
    """Uniform theta/px/py; alpha, tx, ty redrawn until the patch stays inside."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = _uniform(rng, ranges.theta)
    px = _uniform(rng, ranges.px)
    py = _uniform(rng, ranges.py)
    for _ in range(MAX_REJECTIONS):
        p = PlanarParams(
            theta=theta,
            alpha=_uniform(rng, ranges.alpha),
            px=px,
            py=py,
            tx=_uniform(rng, ranges.tx),
            ty=_uniform(rng, ranges.ty),
        )
        if content_fits(p, frame_size):
            return p
    raise ConstraintUnsatisfiable(
        f"no (alpha, tx, ty) keeps the patch inside after {MAX_REJECTIONS} draws (theta={theta:.3f}, px={px:.2e}, py={py:.2e})"
    )


def distort(img: np.ndarray, p: PlanarParams, frame_size: int = FRAME_SIZE, fill: float | None = None) -> np.ndarray:
    """Apply the stage-wise transform ``p`` (reference-frame units) to ``img``."""
    h = rescale(stagewise_homography(p), frame_size / img.shape[1])
    return warp(img, h, fill=fill)


# ---------------------------------------------------------------- datasets


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img)).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, img: np.ndarray) -> None:
    try:
        Path(path).write_bytes(png_bytes(img))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    """Grayscale float image in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    params: PlanarParams
    encoded_px: float
    encoded_py: float
    angle_bin: int
    scene_seed: int
    checksum: str = ""
    kind: str = "text"

    def to_line(self) -> str:
        head = json.dumps(
            {
                "image_path": self.image_path,
                "encoded_px": self.encoded_px,
                "encoded_py": self.encoded_py,
                "angle_bin": self.angle_bin,
                "scene_seed": self.scene_seed,
                "checksum": self.checksum,
                "kind": self.kind,
            }
        )
        return head[:-1] + ', "params": ' + self.params.to_record() + "}"

    @classmethod
    def from_line(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        return cls(
            image_path=d["image_path"],
            params=PlanarParams.from_record(d["params"]),
            encoded_px=float(d["encoded_px"]),
            encoded_py=float(d["encoded_py"]),
            angle_bin=int(d["angle_bin"]),
            scene_seed=int(d["scene_seed"]),
            checksum=d.get("checksum", ""),
            kind=d.get("kind", "text"),
        )


@dataclass
class Manifest:
    header: dict
    records: list[SampleRecord] = field(default_factory=list)

    @property
    def bins(self) -> AngleBins:
        return AngleBins(**self.header["bins"])

    @property
    def encoding(self) -> PerspectiveEncoding:
        return PerspectiveEncoding(**self.header["encoding"])

    @property
    def ranges(self) -> ParamRanges:
        return ParamRanges.from_dict(self.header["ranges"])

    def to_text(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)] + [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        try:
            Path(path).write_text(self.to_text(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path) -> "Manifest":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise IoFailure(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
            raise IoFailure(f"{path}: unsupported manifest header {header.get('format')!r} v{header.get('version')}")
        return cls(header, [SampleRecord.from_line(ln) for ln in lines[1:] if ln.strip()])

    def revalidate(self) -> list[int]:
        """Indices of records whose stored bin/encodings disagree with their params."""
        bins, enc = self.bins, self.encoding
        bad = []
        for i, r in enumerate(self.records):
            if (
                r.angle_bin != bins.index(r.params.theta)
                or r.encoded_px != enc.encode(r.params.px)
                or r.encoded_py != enc.encode(r.params.py)
            ):
                bad.append(i)
        return bad


def _sample_seeds(seed: int, index: int) -> tuple[int, np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence([seed, index])
    scene_ss, param_ss, spec_ss = ss.spawn(3)
    scene_seed = int(scene_ss.generate_state(1, np.uint64)[0])
    return scene_seed, np.random.default_rng(spec_ss), np.random.default_rng(param_ss)


def make_dataset(
    count: int,
    out_dir,
    seed: int,
    ranges: ParamRanges = ParamRanges(),
    bins: AngleBins = AngleBins(),
    encoding: PerspectiveEncoding = PerspectiveEncoding(),
    size: int = 64,
    frame_size: int = FRAME_SIZE,
    spec_distribution: Callable[[np.random.Generator, int], SceneSpec] = random_scene_spec,
    threads: int = 1,
) -> Manifest:
    """Render, distort and write ``count`` samples plus ``manifest.jsonl``.

    Every sample draws from its own stream seeded by ``(seed, index)``, so the
    output does not depend on ``threads``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise IoFailure(f"cannot create dataset directory {out}: {exc}") from exc

    def one(i: int) -> SampleRecord:
        scene_seed, spec_rng, param_rng = _sample_seeds(seed, i)
        spec = spec_distribution(spec_rng, size)
        scene = render_scene(spec, size, scene_seed)
        p = sample_params(ranges, frame_size, param_rng)
        img = distort(scene, p, frame_size, fill=spec.background)
        data = png_bytes(img)
        name = f"{i:06d}.png"
        try:
            (out / name).write_bytes(data)
        except OSError as exc:
            raise IoFailure(f"cannot write {out / name}: {exc}") from exc
        return SampleRecord(
            image_path=name,
            params=p,
            encoded_px=encoding.encode(p.px),
            encoded_py=encoding.encode(p.py),
            angle_bin=bins.index(p.theta),
            scene_seed=scene_seed,
            checksum=hashlib.sha256(data).hexdigest(),
            kind=spec.kind,
        )

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, range(count)))
    else:
        records = [one(i) for i in range(count)]
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "count": count,
        "size": size,
        "frame_size": frame_size,
        "ranges": ranges.to_dict(),
        "bins": bins.to_dict(),
        "encoding": asdict(encoding),
    }
    manifest = Manifest(header, records)
    manifest.write(out / "manifest.jsonl")
    log.info("wrote %d samples to %s", count, out)
    return manifest


SPLITS = ("train", "val", "test")
DEFAULT_SPLIT = {"train": 8000, "val": 1000, "test": 1000}


def split_counts(scale: float | None = None, total: int | None = None) -> dict[str, int]:
    """Default proportions (8000/1000/1000) scaled by ``scale`` or fitted to ``total``."""
    if total is not None:
        val = test = int(round(total * 0.1))
        return {"train": total - val - test, "val": val, "test": test}
    scale = 1.0 if scale is None else scale
    return {k: int(round(v * scale)) for k, v in DEFAULT_SPLIT.items()}


def make_splits(out_dir, counts: dict[str, int], seed: int, **kw) -> dict[str, Manifest]:
    out = {}
    for i, split in enumerate(SPLITS):
        split_seed = int(np.random.SeedSequence([seed, 1000 + i]).generate_state(1, np.uint32)[0])
        out[split] = make_dataset(counts.get(split, 0), Path(out_dir) / split, split_seed, **kw)
    return out


def dataset_checksum(root) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        path = Path(root) / split / "manifest.jsonl"
        if path.exists():
            h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class LoadedSplit:
    images: np.ndarray  # [N, S, S, 1] float32
    encoded: np.ndarray  # [N, 2]
    bins: np.ndarray  # [N]
    thetas: np.ndarray  # [N]
    params: list[PlanarParams]
    manifest: Manifest

    def __len__(self) -> int:
        return len(self.bins)

    def subset(self, idx) -> "LoadedSplit":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            encoded=self.encoded[idx],
            bins=self.bins[idx],
            thetas=self.thetas[idx],
            params=[self.params[i] for i in idx],
        )


def load_split(split_dir) -> LoadedSplit:
    split_dir = Path(split_dir)
    man = Manifest.read(split_dir / "manifest.jsonl")
    size = int(man.header["size"])
    n = len(man.records)
    images = np.zeros((n, size, size, 1), dtype=np.float32)
    for i, r in enumerate(man.records):
        images[i, :, :, 0] = load_png(split_dir / r.image_path)
    return LoadedSplit(
        images=images,
        encoded=np.array([[r.encoded_px, r.encoded_py] for r in man.records], dtype=np.float64).reshape(n, 2),
        bins=np.array([r.angle_bin for r in man.records], dtype=np.int64),
        thetas=np.array([r.params.theta for r in man.records], dtype=np.float64),
        params=[r.params for r in man.records],
        manifest=man,
    )
