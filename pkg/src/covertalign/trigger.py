"""Covert text trigger: clamped geometry, warped masks, fixed-size imprint.

The trigger carries two learnable scalars, an isotropic scale ``s`` and a
rotation ``theta``. ``s`` turns into per-axis width/height ratios through a
clamped linear map, the text raster is warped into the image frame by an
inverse rotation-scale grid, and the resulting binary mask stamps a
fixed-magnitude perturbation onto the clean image. The stamped image uses the
hard {0,1} mask; gradients flow through the soft bilinear mask and through
the clamp interiors so Adam can keep adjusting (s, theta).

Mask geometry is computed in float64 regardless of the pipeline dtype, which
makes hard masks reproducible bit-for-bit against a per-pixel reference
implementation; the cast back to the pipeline dtype happens at the imprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    affine_grid,
    cast,
    clamp,
    grid_sample_bilinear,
    straight_through,
)
from .textimage import TextImage

R_MIN_DEFAULT = 0.05
R_MAX_DEFAULT = 0.95
ADAM_LR = 0.05
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MID_GRAY = 127.5  # perturbation sign flips here so the full swing survives [0,255]


def _zeros2() -> np.ndarray:
    return np.zeros(2, dtype=np.float64)


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators and step counter for (s, theta)."""

    m: np.ndarray = field(default_factory=_zeros2)
    v: np.ndarray = field(default_factory=_zeros2)
    step: int = 0

    def __post_init__(self):
        for name in ("m", "v"):
            arr = getattr(self, name)
            if arr.shape != (2,):
                raise ValueError(f"AdamState.{name} must hold exactly two entries, got shape {arr.shape}")
        if self.step < 0:
            raise ValueError(f"AdamState.step must be >= 0, got {self.step}")


@dataclass(frozen=True)
class TriggerParams:
    """Learnable trigger geometry. Starts at identity: s=1, theta=0."""

    s: float = 1.0
    theta: float = 0.0
    r_min: float = R_MIN_DEFAULT
    r_max: float = R_MAX_DEFAULT
    adam: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        if not (math.isfinite(self.s) and math.isfinite(self.theta)):
            raise ValueError("TriggerParams: s and theta must be finite")
        if not (0.0 < self.r_min < self.r_max < 1.0):
            raise ValueError(
                f"TriggerParams: need 0 < r_min < r_max < 1, got ({self.r_min}, {self.r_max})"
            )


@dataclass(frozen=True)
class TriggerMask:
    """Soft and hard warped text masks plus the geometry that produced them.

    hard[p] = 1 exactly when soft[p] >= 0.5; s is None when the mask was
    built from explicit ratios rather than a scale parameter.
    """

    soft: np.ndarray
    hard: np.ndarray
    s: float | None
    theta: float
    r_w: float
    r_h: float

    def __post_init__(self):
        self.soft.flags.writeable = False
        self.hard.flags.writeable = False

    @property
    def ink_area(self) -> float:
        return float(self.hard.sum())


def effective_scales(s, text_dims, image_dims, bounds=(R_MIN_DEFAULT, R_MAX_DEFAULT)):
    """Map the scale parameter to clamped per-axis ratios (r_w, r_h).

    r_w = clamp((w_t/W)*s, r_min, r_max) and likewise for r_h with the
    height ratio. Accepts a float (returns floats) or a 0-d Tensor (returns
    tensors whose gradient follows the clamp interior rule). Both paths run
    the identical arithmetic, so their results agree bit-for-bit.
    """
    h_t, w_t = text_dims
    H, W = image_dims
    r_min, r_max = bounds
    if min(h_t, w_t, H, W) <= 0:
        raise ValueError(f"effective_scales: dims must be positive, got {text_dims}, {image_dims}")
    if not (0.0 < r_min < r_max < 1.0):
        raise ValueError(f"effective_scales: bad bounds ({r_min}, {r_max})")
    wr = w_t / W
    hr = h_t / H
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ValueError(f"effective_scales: s must be scalar, got shape {s.data.shape}")
        if not np.all(np.isfinite(s.data)):
            raise ValueError("effective_scales: non-finite s")
        return clamp(s * wr, r_min, r_max), clamp(s * hr, r_min, r_max)
    s = float(s)
    if not math.isfinite(s):
        raise ValueError("effective_scales: non-finite s")
    return (
        float(np.clip(s * wr, r_min, r_max)),
        float(np.clip(s * hr, r_min, r_max)),
    )


def _warp_soft(raster: np.ndarray, theta, r_w, r_h, H: int, W: int) -> Tensor:
    # float64 geometry regardless of pipeline dtype; raster is (h_t, w_t) binary
    src = Tensor(raster[None].astype(np.float64))
    grid = affine_grid(theta, r_w, r_h, H, W)
    return grid_sample_bilinear(src, grid)


def _snapshot(soft3: Tensor, s, theta: float, r_w: float, r_h: float) -> TriggerMask:
    soft = soft3.data[0].copy()
    hard = (soft >= 0.5).astype(np.float32)
    return TriggerMask(soft=soft, hard=hard, s=s, theta=theta, r_w=r_w, r_h=r_h)


def build_mask(textimg: TextImage, theta: float, r_w: float, r_h: float,
               H: int, W: int, s: float | None = None) -> TriggerMask:
    """Warp the text raster to an H x W mask, anchored at the image center.

    Pure evaluation path (no gradients); the differentiable equivalent is
    :func:`mask_graph`, which runs the same float64 arithmetic.
    """
    for name, r in (("r_w", r_w), ("r_h", r_h)):
        if not (0.0 < r < 1.0):
            raise ValueError(f"build_mask: {name}={r} outside (0, 1)")
    th = Tensor(np.asarray(theta, dtype=np.float64))
    rw = Tensor(np.asarray(r_w, dtype=np.float64))
    rh = Tensor(np.asarray(r_h, dtype=np.float64))
    soft3 = _warp_soft(textimg.raster[0], th, rw, rh, H, W)
    return _snapshot(soft3, s, float(theta), float(r_w), float(r_h))


def mask_graph(textimg: TextImage, s_leaf: Tensor, theta_leaf: Tensor,
               image_dims, bounds=(R_MIN_DEFAULT, R_MAX_DEFAULT)):
    """Differentiable mask construction from (s, theta) leaves.

    Returns (soft3, mask): soft3 is the (1, H, W) float64 tensor on the tape,
    mask the detached TriggerMask snapshot. Leaves must be 0-d float64.
    """
    H, W = image_dims
    h_t, w_t = textimg.raster.shape[1:]
    rw_t, rh_t = effective_scales(s_leaf, (h_t, w_t), (H, W), bounds)
    soft3 = _warp_soft(textimg.raster[0], theta_leaf, rw_t, rh_t, H, W)
    mask = _snapshot(soft3, float(s_leaf.data), float(theta_leaf.data),
                     float(rw_t.data), float(rh_t.data))
    return soft3, mask


def delta_pattern(x: np.ndarray, eps: float) -> np.ndarray:
    """Per-pixel perturbation +-eps pointing toward mid-gray.

    Frozen from the clean image: pixels below 127.5 get +eps, the rest -eps,
    so stamped values always keep the full swing inside [0, 255].
    """
    if eps <= 0:
        raise ValueError(f"delta_pattern: eps must be > 0, got {eps}")
    return np.where(x < MID_GRAY, eps, -eps).astype(x.dtype)


def imprint(x: np.ndarray, mask: TriggerMask, eps: float) -> np.ndarray:
    """Stamp the hard mask onto a clean image: clamp(x + hard * delta, 0, 255)."""
    _check_image(x, mask.hard.shape)
    delta = delta_pattern(x, eps)
    return np.clip(x + mask.hard.astype(x.dtype) * delta, 0.0, 255.0).astype(x.dtype)


def imprint_graph(x: np.ndarray, soft3: Tensor, hard: np.ndarray, eps: float,
                  dtype=np.float32) -> Tensor:
    """Differentiable imprint: hard mask forward, soft mask backward.

    The forward value equals :func:`imprint`; gradients reach soft3 scaled by
    the frozen delta pattern (straight-through across the 0.5 threshold and
    the [0,255] clamp interior).
    """
    _check_image(x, hard.shape)
    x = x.astype(dtype)
    delta = delta_pattern(x, eps)
    soft_cast = cast(soft3, dtype)
    mask_st = straight_through(hard[None].astype(dtype), soft_cast)
    return clamp(Tensor(x) + mask_st * Tensor(delta), 0.0, 255.0)


def _check_image(x: np.ndarray, hw) -> None:
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if x.shape[1:] != tuple(hw):
        raise ValueError(f"image spatial dims {x.shape[1:]} do not match mask {tuple(hw)}")
    if x.min() < 0.0 or x.max() > 255.0:
        raise ValueError("image values must lie in [0, 255]")


@dataclass(frozen=True)
class TriggerForward:
    """One differentiable trigger evaluation: leaves, mask snapshot, x_trig."""

    s_leaf: Tensor
    theta_leaf: Tensor
    mask: TriggerMask
    x_trig: Tensor


def trigger_graph(textimg: TextImage, params: TriggerParams, x_clean: np.ndarray,
                  eps: float, dtype=np.float32) -> TriggerForward:
    """Build the full differentiable path from (s, theta) to the stamped image."""
    s_leaf = Tensor(np.asarray(params.s, dtype=np.float64), requires_grad=True)
    theta_leaf = Tensor(np.asarray(params.theta, dtype=np.float64), requires_grad=True)
    H, W = x_clean.shape[1:]
    soft3, mask = mask_graph(textimg, s_leaf, theta_leaf, (H, W),
                             (params.r_min, params.r_max))
    x_trig = imprint_graph(x_clean, soft3, mask.hard, eps, dtype)
    return TriggerForward(s_leaf=s_leaf, theta_leaf=theta_leaf, mask=mask, x_trig=x_trig)


def adam_step(params: TriggerParams, grads, lr: float = ADAM_LR,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> TriggerParams:
    """One Adam ascent step on (s, theta) from gradients of the source score."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != (2,):
        raise ValueError(f"adam_step: expected gradients for (s, theta), got shape {g.shape}")
    for name, val in (("s", g[0]), ("theta", g[1])):
        if not math.isfinite(val):
            raise ValueError(f"adam_step: non-finite gradient for {name}")
    state = params.adam
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    return replace(
        params,
        s=float(params.s + update[0]),
        theta=float(params.theta + update[1]),
        adam=AdamState(m=m, v=v, step=t),
    )
