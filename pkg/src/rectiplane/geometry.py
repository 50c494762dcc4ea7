"""Planar transformation maths.

Coordinates are centred on the patch: origin at the patch centre, x to the
right, y downwards.  A homography acts on column vectors ``(x, y, 1)`` and is
always stored with its bottom-right element equal to one.

Transformation parameters live in a *reference frame* of ``frame_size``
pixels (256 by default).  Images or feature maps of another size use
:func:`rescale`, which conjugates the matrix by the pixel pitch so that the
same parameters describe the same physical distortion at any resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    DegenerateComposition,
    DegenerateProjection,
    OutOfRange,
    SingularMatrix,
)

FRAME_SIZE = 256
P_MAX = 9e-4

_Z_EPS = 1e-12
_DET_EPS = 1e-14


@dataclass(frozen=True)
class PlanarParams:
    """Rotation ``theta`` (rad), scale ``alpha``, perspective ``px, py`` (1/px)
    and translation ``tx, ty`` (px)."""

    theta: float = 0.0
    alpha: float = 1.0
    px: float = 0.0
    py: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def validate(self, p_max: float = P_MAX, theta_range: tuple[float, float] | None = None) -> None:
        if not self.alpha > 0:
            raise OutOfRange(f"alpha must be positive, got {self.alpha}")
        if abs(self.px) > p_max or abs(self.py) > p_max:
            raise OutOfRange(f"perspective ({self.px}, {self.py}) exceeds p_max={p_max}")
        if theta_range is not None and not theta_range[0] <= self.theta <= theta_range[1]:
            raise OutOfRange(f"theta={self.theta} outside {theta_range}")

    def to_record(self) -> str:
        """Flat JSON object, every value written with 17 significant digits."""
        body = ", ".join(f'"{k}": {format(float(v), ".17g")}' for k, v in asdict(self).items())
        return "{" + body + "}"

    @classmethod
    def from_record(cls, text: str | dict) -> "PlanarParams":
        d = json.loads(text) if isinstance(text, str) else text
        return cls(**{k: float(d[k]) for k in ("theta", "alpha", "px", "py", "tx", "ty")})


@dataclass(frozen=True, eq=False)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < _Z_EPS:
            raise DegenerateComposition("bottom-right element is ~0; cannot normalise")
        m = m / m[2, 2]
        m[2, 2] = 1.0
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def __matmul__(self, other: "Homography") -> "Homography":
        return compose(self, other)

    def allclose(self, other: "Homography", atol: float = 1e-10) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        return f"Homography({self.m.tolist()})"


def homography_from_params(p: PlanarParams) -> Homography:
    c, s = math.cos(p.theta), math.sin(p.theta)
    a = p.alpha
    return Homography(
        [[a * c, a * s, p.tx],
         [-a * s, a * c, p.ty],
         [p.px, p.py, 1.0]]
    )


def similarity(theta: float = 0.0, alpha: float = 1.0, tx: float = 0.0, ty: float = 0.0) -> Homography:
    return homography_from_params(PlanarParams(theta=theta, alpha=alpha, tx=tx, ty=ty))


def perspective(px: float, py: float) -> Homography:
    return Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])


def apply(h: Homography, pt) -> tuple[float, float]:
    x, y = float(pt[0]), float(pt[1])
    m = h.m
    xh = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    yh = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    zh = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(zh) < _Z_EPS:
        raise DegenerateProjection(f"point {pt} maps to infinity")
    return xh / zh, yh / zh


def apply_many(h: Homography, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`apply` over arrays of equal shape."""
    m = h.m
    xh = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    yh = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    zh = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    if np.any(np.abs(zh) < _Z_EPS):
        raise DegenerateProjection("some points map to infinity")
    return xh / zh, yh / zh


def invert(h: Homography) -> Homography:
    det = np.linalg.det(h.m)
    if abs(det) < _DET_EPS:
        raise SingularMatrix(f"determinant {det:.3e} too small to invert")
    inv = np.linalg.inv(h.m)
    if abs(inv[2, 2]) < _Z_EPS:
        raise SingularMatrix("inverse has ~0 bottom-right element")
    return Homography(inv)


def compose(a: Homography, b: Homography) -> Homography:
    """``a`` applied after ``b``."""
    prod = a.m @ b.m
    if abs(prod[2, 2]) < _Z_EPS:
        raise DegenerateComposition("product has ~0 bottom-right element")
    return Homography(prod)


def decompose_stagewise(p: PlanarParams) -> tuple[Homography, Homography]:
    """Split into (perspective-only, similarity) factors.

    ``compose(persp, sim)`` is the stage-wise transform: translation, rotation
    and scale first, then perspective.  It agrees with
    :func:`homography_from_params` up to a rotation of the perspective row
    and a corner term ``px*tx + py*ty``.
    """
    return perspective(p.px, p.py), similarity(p.theta, p.alpha, p.tx, p.ty)


def stagewise_homography(p: PlanarParams) -> Homography:
    persp, sim = decompose_stagewise(p)
    return compose(persp, sim)


def rescale(h: Homography, pixel_scale: float) -> Homography:
    """Express a reference-frame homography in a grid whose pixels are
    ``pixel_scale`` reference pixels wide."""
    d = np.diag([pixel_scale, pixel_scale, 1.0])
    dinv = np.diag([1.0 / pixel_scale, 1.0 / pixel_scale, 1.0])
    return Homography(dinv @ h.m @ d)


def centered_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred (x, y) coordinates of every pixel centre, each of shape (H, W)."""
    ys = np.arange(height, dtype=np.float64) - (height - 1) / 2.0
    xs = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


@dataclass(frozen=True)
class PerspectiveEncoding:
    """Affine map ``scale * (p + offset)`` making perspective targets positive."""

    scale: float = 1e4
    offset: float = 1e-3
    p_max: float = P_MAX

    def __post_init__(self):
        if self.offset <= self.p_max:
            raise ValueError("offset must exceed p_max so encoded values stay positive")

    def encode(self, p):
        arr = np.asarray(p, dtype=np.float64)
        if np.any(np.abs(arr) > self.p_max):
            raise OutOfRange(f"perspective value beyond p_max={self.p_max}")
        out = self.scale * (arr + self.offset)
        return float(out) if out.ndim == 0 else out

    def decode(self, u):
        out = np.asarray(u, dtype=np.float64) / self.scale - self.offset
        return float(out) if out.ndim == 0 else out


_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class AngleBins:
    """Half-open bins ``[min + i*w, min + (i+1)*w)`` in degrees."""

    min_deg: float = -45.0
    max_deg: float = 45.0
    width_deg: float = 2.0
    count: int = field(init=False)

    def __post_init__(self):
        span = (self.max_deg - self.min_deg) / self.width_deg
        n = round(span)
        if self.width_deg <= 0 or abs(span - n) > 1e-9:
            raise ValueError("bin range must be an integer multiple of the width")
        if n < 2:
            raise ValueError("need at least two bins")
        object.__setattr__(self, "count", int(n))

    @classmethod
    def symmetric(cls, half_range_deg: float, width_deg: float) -> "AngleBins":
        return cls(-half_range_deg, half_range_deg, width_deg)

    def index(self, theta: float) -> int:
        deg = math.degrees(theta)
        pos = (deg - self.min_deg) / self.width_deg
        if pos < -_EDGE_TOL or deg >= self.max_deg:
            raise OutOfRange(f"{deg:.6f} deg outside [{self.min_deg}, {self.max_deg})")
        # tolerance absorbs radian->degree round-off at exact edges
        return min(max(int(math.floor(pos + _EDGE_TOL)), 0), self.count - 1)

    def center(self, i: int) -> float:
        if not 0 <= i < self.count:
            raise OutOfRange(f"bin {i} outside [0, {self.count})")
        return math.radians(self.min_deg + (i + 0.5) * self.width_deg)

    def centers(self) -> np.ndarray:
        return np.radians(self.min_deg + (np.arange(self.count) + 0.5) * self.width_deg)

    def one_hot(self, i: int) -> np.ndarray:
        if not 0 <= i < self.count:
            raise OutOfRange(f"bin {i} outside [0, {self.count})")
        v = np.zeros(self.count)
        v[i] = 1.0
        return v

    @property
    def theta_range(self) -> tuple[float, float]:
        return math.radians(self.min_deg), math.radians(self.max_deg)

    def to_dict(self) -> dict:
        return {"min_deg": self.min_deg, "max_deg": self.max_deg, "width_deg": self.width_deg}


def bin_index(theta: float, bins: AngleBins) -> int:
    return bins.index(theta)


def bin_center(i: int, bins: AngleBins) -> float:
    return bins.center(i)


def one_hot(i: int, bins: AngleBins) -> np.ndarray:
    return bins.one_hot(i)


def quad_corners(half: float) -> Iterable[tuple[float, float]]:
    return ((-half, -half), (half, -half), (half, half), (-half, half))
