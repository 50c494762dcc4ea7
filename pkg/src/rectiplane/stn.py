"""Differentiable warping: sampling grids and bilinear sampling.

A sampling grid holds, for every output pixel, the *centred* source
coordinate ``(x, y)`` in input pixels.  To undo a distortion ``H`` the grid
is ``apply(H, q)`` at each output pixel ``q``, i.e. the sampler warps the
input by ``invert(H)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff.tensor import Tensor, as_tensor, record
from .errors import DegenerateProjection, ShapeMismatch
from .geometry import FRAME_SIZE, PerspectiveEncoding, centered_grid

_Z_EPS = 1e-12


def grid_from_perspective(
    encoded: Tensor,
    out_shape: tuple[int, int],
    encoding: PerspectiveEncoding = PerspectiveEncoding(),
    pixel_scale: float = 1.0,
) -> Tensor:
    """Grid that removes the perspective given by encoded ``(px, py)``.

    ``encoded`` is ``[N, 2]`` in encoded units; ``pixel_scale`` is the width of
    one output pixel in reference-frame pixels.
    """
    encoded = as_tensor(encoded)
    if encoded.ndim != 2 or encoded.shape[1] != 2:
        raise ShapeMismatch(f"encoded perspective must be [N, 2], got {encoded.shape}")
    h, w = out_shape
    gx, gy = centered_grid(h, w)
    p = (encoded.data.astype(np.float64) / encoding.scale - encoding.offset) * pixel_scale
    z = 1.0 + p[:, 0, None, None] * gx + p[:, 1, None, None] * gy
    if np.any(np.abs(z) < _Z_EPS):
        raise DegenerateProjection("perspective grid maps a pixel to infinity")
    sx, sy = gx / z, gy / z
    out = np.stack([sx, sy], axis=-1)

    def back(g):
        # d(x/z)/dp_k = -x * c_k / z^2 with c = (x, y)
        common = (g[..., 0] * gx + g[..., 1] * gy) / (z * z)
        dpx = -(common * gx).sum(axis=(1, 2))
        dpy = -(common * gy).sum(axis=(1, 2))
        d = np.stack([dpx, dpy], axis=1) * (pixel_scale / encoding.scale)
        return (d.astype(encoded.dtype),)

    return record(out, (encoded,), back)


def grid_from_rotation(theta, out_shape: tuple[int, int]) -> Tensor:
    """Grid that removes a rotation by ``theta`` (radians, one per sample)."""
    theta = as_tensor(theta)
    t = np.atleast_1d(theta.data.astype(np.float64))
    h, w = out_shape
    gx, gy = centered_grid(h, w)
    c = np.cos(t)[:, None, None]
    s = np.sin(t)[:, None, None]
    sx = c * gx + s * gy
    sy = -s * gx + c * gy
    out = np.stack([sx, sy], axis=-1)

    def back(g):
        d = (g[..., 0] * (-s * gx + c * gy) + g[..., 1] * (-c * gx - s * gy)).sum(axis=(1, 2))
        return (d.reshape(theta.shape).astype(theta.dtype),)

    return record(out, (theta,), back)


def identity_grid(n: int, out_shape: tuple[int, int]) -> np.ndarray:
    gx, gy = centered_grid(*out_shape)
    return np.broadcast_to(np.stack([gx, gy], axis=-1), (n, *out_shape, 2)).copy()


def border_fill(features: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel median of the border pixels, shape [N, C]."""
    f = np.asarray(features)
    border = np.concatenate(
        [f[:, 0, :, :], f[:, -1, :, :], f[:, 1:-1, 0, :], f[:, 1:-1, -1, :]], axis=1
    )
    return np.median(border, axis=1)


def bilinear_sample(features, grid, fill=0.0) -> Tensor:
    """Sample ``features[N,H,W,C]`` at ``grid[N,Ho,Wo,2]`` (centred x, y).

    Outside the input the signal is treated as the constant ``fill`` (scalar or
    ``[N, C]``), so interpolation blends smoothly into the border value.
    Differentiable w.r.t. both the features and the grid; the fill is a
    constant.
    """
    features, grid = as_tensor(features), as_tensor(grid)
    if features.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != features.shape[0]:
        raise ShapeMismatch(f"features {features.shape} / grid {grid.shape} inconsistent")
    n, h, w, c = features.shape
    _, ho, wo, _ = grid.shape
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=np.float64), (n, c)) if np.ndim(fill) else np.full((n, c), float(fill))

    cols = grid.data[..., 0].astype(np.float64) + (w - 1) / 2.0
    rows = grid.data[..., 1].astype(np.float64) + (h - 1) / 2.0
    x0 = np.floor(cols)
    y0 = np.floor(rows)
    wx = (cols - x0)[..., None]
    wy = (rows - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    fdata = features.data
    flat = fdata.reshape(n * h * w, c)
    bidx = np.arange(n)[:, None, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            lin = (bidx * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
            vals = np.where(valid[..., None], flat[lin], fill_arr[:, None, None, :])
            corners.append((lin, valid, vals))
    v00, v01, v10, v11 = (cr[2] for cr in corners)
    weights = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    out = weights[0] * v00 + weights[1] * v01 + weights[2] * v10 + weights[3] * v11

    def back(g):
        gd = g.astype(np.float64)
        gfeat = None
        if features.requires_grad:
            gflat = np.zeros((n * h * w, c), dtype=np.float64)
            for (lin, valid, _), wgt in zip(corners, weights):
                contrib = (gd * wgt)[valid]
                np.add.at(gflat, lin[valid], contrib)
            gfeat = gflat.reshape(fdata.shape).astype(fdata.dtype)
        ggrid = None
        if grid.requires_grad:
            dcol = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            drow = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            ggrid = np.stack([(gd * dcol).sum(-1), (gd * drow).sum(-1)], axis=-1).astype(grid.dtype)
        return gfeat, ggrid

    return record(out.astype(fdata.dtype, copy=False), (features, grid), back)


@dataclass(frozen=True)
class StnBlock:
    """A warp driven by an externally supervised parameter head.

    ``kind`` is ``"perspective"`` (parameters are encoded ``[N, 2]``) or
    ``"rotation"`` (parameters are angles ``[N]`` in radians).  The block always
    applies the inverse of the predicted transform.
    """

    kind: str = "perspective"
    encoding: PerspectiveEncoding = field(default_factory=PerspectiveEncoding)
    frame_size: int = FRAME_SIZE
    fill: str | float = "border_median"

    def grid(self, params, out_shape: tuple[int, int]) -> Tensor:
        if self.kind == "perspective":
            scale = self.frame_size / out_shape[1]
            return grid_from_perspective(params, out_shape, self.encoding, scale)
        if self.kind == "rotation":
            return grid_from_rotation(params, out_shape)
        raise ValueError(f"unknown STN kind {self.kind!r}")


def supervised_stn_forward(block: StnBlock, predicted_params, features) -> Tensor:
    """Warp ``features`` by the inverse of the transform in ``predicted_params``.

    No loss is attached here; the caller supervises the same head output.
    """
    features = as_tensor(features)
    out_shape = features.shape[1:3]
    grid = block.grid(predicted_params, out_shape)
    fill = border_fill(features.data) if block.fill == "border_median" else float(block.fill)
    return bilinear_sample(features, grid, fill)
