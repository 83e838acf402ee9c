"""Structural similarity split into luminance, contrast and structure.

For images ``x`` and ``y`` with local means ``mu``, standard deviations
``sigma`` and covariance ``sigma_xy``::

    l = (2 mu_x mu_y + C1) / (mu_x^2 + mu_y^2 + C1)
    c = (2 sigma_x sigma_y + C2) / (sigma_x^2 + sigma_y^2 + C2)
    s = (sigma_xy + C3) / (sigma_x sigma_y + C3)
    ssim = mean(l^alpha * c^beta * s^gamma)

Local moments come from a separable window applied in "valid" mode, so
border voxels never enter a map.  ``mode="global"`` uses one uniform window
covering the whole volume.  Every function is differentiable through the
active :class:`~harmonize3d.tensor.Tape`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .tensor import Tensor, concat, correlate1d
from .volume import Volume

__all__ = [
    "SsimParams",
    "SsimComponents",
    "gaussian_window",
    "ssim_components",
    "ssim",
    "ssim_loss",
    "structure_term",
    "luminance_term",
]

# Added to clamped variances before the square root: keeps d sqrt(v)/dv finite
# in flat regions while moving s and c by < 1e-8 (C3 ~ 4.5e-4 with defaults).
_VAR_FLOOR = 1e-12
_WORK_DTYPE = np.float64


@dataclass(frozen=True)
class SsimParams:
    window_radius: int = 3
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    mode: Literal["windowed", "global"] = "windowed"
    window: Literal["gaussian", "uniform"] = "gaussian"

    def __post_init__(self):
        if self.window_radius < 0 or self.window_sigma <= 0:
            raise ValueError("window radius must be >= 0 and sigma > 0")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("k1, k2 and the dynamic range must be positive")
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.mode not in ("windowed", "global"):
            raise ValueError(f"unknown SSIM mode {self.mode!r}")
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    def with_mode(self, mode: str) -> "SsimParams":
        return replace(self, mode=mode)


@dataclass
class SsimComponents:
    l_map: Tensor
    c_map: Tensor
    s_map: Tensor
    l: Tensor
    c: Tensor
    s: Tensor
    ssim: Tensor


def gaussian_window(radius: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian weights on ``[-radius, radius]``."""
    if radius < 0 or sigma <= 0:
        raise ValueError("radius must be >= 0 and sigma > 0")
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return w / w.sum()


def _as_batch(x) -> Tensor:
    if isinstance(x, Volume):
        x = Tensor(x.voxels)
    elif not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 4:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    elif x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected a single-channel volume, got shape {x.shape}")
    return x.astype(_WORK_DTYPE)


def _kernels(params: SsimParams, extents: tuple[int, int, int]) -> list[np.ndarray]:
    if params.mode == "global":
        return [np.full(n, 1.0 / n) for n in extents]
    size = 2 * params.window_radius + 1
    if min(extents) < size:
        raise ValueError(f"volume extents {extents} smaller than the {size}-voxel window")
    if params.window == "uniform":
        k = np.full(size, 1.0 / size)
    else:
        k = gaussian_window(params.window_radius, params.window_sigma)
    return [k, k, k]


def _filter(t: Tensor, kernels: list[np.ndarray]) -> Tensor:
    for axis, k in enumerate(kernels):
        t = correlate1d(t, k, axis)
    return t


def _inputs(x, y):
    tx, ty = _as_batch(x), _as_batch(y)
    if tx.shape != ty.shape:
        raise ValueError(f"shape mismatch: {tx.shape} vs {ty.shape}")
    return tx, ty


def _means(tx: Tensor, ty: Tensor, kernels) -> tuple[Tensor, Tensor]:
    b = tx.shape[0]
    m = _filter(concat([tx, ty], axis=0), kernels)
    return m[:b], m[b:]


def _luminance_map(mx: Tensor, my: Tensor, c1: float) -> Tensor:
    return (mx * my * 2.0 + c1) / (mx * mx + my * my + c1)


def _second_order_maps(tx: Tensor, ty: Tensor, kernels, params: SsimParams):
    b = tx.shape[0]
    stacked = concat([tx, ty, tx * tx, ty * ty, tx * ty], axis=0)
    f = _filter(stacked, kernels)
    mx, my, exx, eyy, exy = (f[i * b : (i + 1) * b] for i in range(5))
    vx = (exx - mx * mx).clamp(0.0, None) + _VAR_FLOOR
    vy = (eyy - my * my).clamp(0.0, None) + _VAR_FLOOR
    sxy = vx.sqrt() * vy.sqrt()
    cov = exy - mx * my
    l_map = _luminance_map(mx, my, params.c1)
    c_map = (sxy * 2.0 + params.c2) / (vx + vy + params.c2)
    s_map = (cov + params.c3) / (sxy + params.c3)
    return l_map, c_map, s_map


def _powered(t: Tensor, exponent: float) -> Tensor:
    return t if exponent == 1.0 else t.pow(exponent)


def ssim_components(x, y, params: SsimParams = SsimParams()) -> SsimComponents:
    """Luminance, contrast and structure maps of ``x`` against ``y`` and their means.

    ``x``/``y`` may be volumes, arrays or tensors of shape (D, H, W),
    (B, D, H, W) or (B, 1, D, H, W).  The scalar outputs are cast back to the
    inputs' dtype.
    """
    tx, ty = _inputs(x, y)
    out_dtype = x.dtype if isinstance(x, Tensor) else np.float32
    kernels = _kernels(params, tx.shape[2:])
    l_map, c_map, s_map = _second_order_maps(tx, ty, kernels, params)
    prod = _powered(l_map, params.alpha) * _powered(c_map, params.beta) * _powered(s_map, params.gamma)
    return SsimComponents(
        l_map=l_map,
        c_map=c_map,
        s_map=s_map,
        l=l_map.mean().astype(out_dtype),
        c=c_map.mean().astype(out_dtype),
        s=s_map.mean().astype(out_dtype),
        ssim=prod.mean().astype(out_dtype),
    )


def ssim(x, y, params: SsimParams = SsimParams()) -> Tensor:
    return ssim_components(x, y, params).ssim


def ssim_loss(x, y, params: SsimParams = SsimParams()) -> Tensor:
    """``1 - ssim(x, y)``; lies in [0, 2]."""
    return 1.0 - ssim(x, y, params)


def structure_term(x, y, params: SsimParams = SsimParams()) -> Tensor:
    """Spatial mean of the structure map ``s(x, y)``."""
    tx, ty = _inputs(x, y)
    out_dtype = x.dtype if isinstance(x, Tensor) else np.float32
    _, _, s_map = _second_order_maps(tx, ty, _kernels(params, tx.shape[2:]), params)
    return s_map.mean().astype(out_dtype)


def luminance_term(x, y, params: SsimParams = SsimParams()) -> Tensor:
    """Spatial mean of the luminance map ``l(x, y)``; needs only first moments."""
    tx, ty = _inputs(x, y)
    out_dtype = x.dtype if isinstance(x, Tensor) else np.float32
    mx, my = _means(tx, ty, _kernels(params, tx.shape[2:]))
    return _luminance_map(mx, my, params.c1).mean().astype(out_dtype)
