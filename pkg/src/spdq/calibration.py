"""Offline calibration: asymmetric clip search and adaptive rounding.

Both passes run per linear layer on a small set of captured input
activations, before any training. The clip search walks a 2-d grid of
candidate (alpha, beta) ranges, scoring each by the squared output error the
quantized-clipped weights produce on the calibration inputs. Adaptive
rounding then replaces nearest rounding with a learned per-weight choice
between floor and floor + 1, optimized against the same block outputs with a
regularizer that anneals the choices to hard 0/1.

Everything here is deterministic: no RNG, fixed iteration orders, so
repeated runs produce identical clip ranges and masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant import ClipRange, QuantSpec, element_quant_params, quantize_dequantize

__all__ = [
    "AdaRoundConfig",
    "CalibrationSet",
    "RoundingMask",
    "adaround_block",
    "capture_activations",
    "clip_objective",
    "search_asymmetric_clip",
]

# Rectified-sigmoid stretch bounds: h(v) = clamp(sigmoid(v) * (HI - LO) + LO, 0, 1)
# reaches exact 0 and 1 at finite v, so hardened choices can settle.
_STRETCH_LO = -0.1
_STRETCH_HI = 1.1


@dataclass
class CalibrationSet:
    """Captured inputs feeding one named layer, one row per sample."""

    layer: str
    inputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim != 2:
            raise ValueError(f"calibration inputs must be 2-d, got {self.inputs.shape}")
        if len(self.inputs) == 0:
            raise ValueError(f"empty calibration set for layer {self.layer!r}")


@dataclass(frozen=True)
class AdaRoundConfig:
    """Adaptive-rounding optimizer settings.

    The regularizer weight grows geometrically from ``reg_start`` to
    ``reg_end`` while its sharpness exponent anneals from ``beta_start`` down
    to ``beta_end``, loose first (free movement), strict last (hardening).
    """

    iterations: int = 500
    lr: float = 1e-2
    reg_start: float = 0.01
    reg_end: float = 10.0
    beta_start: float = 20.0
    beta_end: float = 2.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0 or self.reg_start <= 0 or self.reg_end <= 0:
            raise ValueError("lr and regularizer weights must be positive")


@dataclass
class RoundingMask:
    """Outcome of adaptive rounding for one block.

    ``mask`` holds the hardened 0/1 choices (add to floored codes), ``soft``
    the final continuous values, and the two MSEs compare the returned mask
    against plain nearest rounding on the calibration inputs.
    """

    mask: np.ndarray
    soft: np.ndarray
    mse: float
    nearest_mse: float


def capture_activations(model, layer_name: str, images: np.ndarray,
                        tokens: np.ndarray | None = None) -> CalibrationSet:
    """Record the inputs a named linear layer sees on a full-precision pass."""
    captured = model.capture((layer_name,), images, tokens)
    return CalibrationSet(layer=layer_name, inputs=captured[layer_name])


def clip_objective(w: np.ndarray, inputs: np.ndarray, spec: QuantSpec,
                   clip: ClipRange) -> float:
    """Squared output error of clipped-quantized weights, summed over samples."""
    wq = quantize_dequantize(w, spec, clip).astype(np.float64)
    diff = inputs.astype(np.float64) @ (wq - w.astype(np.float64)).T
    return float(np.sum(diff * diff))


def search_asymmetric_clip(w: np.ndarray, inputs: np.ndarray | CalibrationSet,
                           spec: QuantSpec, grid_steps: int = 11
                           ) -> tuple[ClipRange, float]:
    """Grid-search clamp bounds minimizing quantized output error.

    Candidates are fractions (grid_steps points from 0.5 to 1.0) of the
    weight minimum and maximum; ties go to the widest range, so clipping
    never wins without strictly helping. Returns the best range and its
    objective value.
    """
    if isinstance(inputs, CalibrationSet):
        inputs = inputs.inputs
    w = np.asarray(w)
    inputs = np.asarray(inputs)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-d weight tensor, got shape {w.shape}")
    if inputs.ndim != 2 or inputs.shape[1] != w.shape[1]:
        raise ValueError(
            f"calibration inputs {inputs.shape} do not feed weights {w.shape}")
    if len(inputs) == 0:
        raise ValueError("empty calibration set")
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    w_min = float(w.min())
    w_max = float(w.max())
    if w_min == w_max == 0.0:
        return ClipRange(-1e-8, 1e-8), 0.0  # all-zero weights: nothing to clip
    fracs = np.linspace(0.5, 1.0, grid_steps)
    alphas = [w_min * f for f in fracs] if w_min < 0 else [w_min]
    betas = [w_max * f for f in fracs] if w_max > 0 else [w_max]

    best: tuple[float, float, ClipRange] | None = None
    for alpha in alphas:
        for beta in betas:
            if alpha >= beta:
                continue
            clip = ClipRange(alpha, beta)
            obj = clip_objective(w, inputs, spec, clip)
            width = beta - alpha
            if best is None or obj < best[0] or (obj == best[0] and width > best[1]):
                best = (obj, width, clip)
    assert best is not None
    return best[2], best[0]


def _rect_sigmoid(v: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-v))
    return np.clip(sig * (_STRETCH_HI - _STRETCH_LO) + _STRETCH_LO, 0.0, 1.0)


def _rect_sigmoid_inverse(h: np.ndarray) -> np.ndarray:
    inner = (h - _STRETCH_LO) / (_STRETCH_HI - _STRETCH_LO)
    return np.log(inner / (1.0 - inner))


def adaround_block(w: np.ndarray, inputs: np.ndarray | CalibrationSet, spec: QuantSpec,
                   clip: ClipRange | None = None,
                   config: AdaRoundConfig = AdaRoundConfig()) -> RoundingMask:
    """Learn per-weight floor / floor+1 rounding for one linear block.

    Minimizes mean squared block-output error against the full-precision
    weights, plus an annealed regularizer pulling every continuous choice to
    0 or 1. The soft values start at the fractional parts (hardening the
    start point reproduces nearest rounding), and the best hardened candidate
    seen wins, so the result never does worse than nearest rounding on the
    calibration inputs.
    """
    if isinstance(inputs, CalibrationSet):
        inputs = inputs.inputs
    w = np.asarray(w)
    inputs = np.asarray(inputs, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-d weight tensor, got shape {w.shape}")
    if inputs.ndim != 2 or inputs.shape[1] != w.shape[1]:
        raise ValueError(
            f"calibration inputs {inputs.shape} do not feed weights {w.shape}")
    if not np.all(np.isfinite(inputs)):
        raise ValueError("non-finite calibration inputs")

    w64 = w.astype(np.float64)
    wc = np.clip(w64, clip.alpha, clip.beta) if clip is not None else w64
    scales, zeros = element_quant_params(w, spec, clip)
    levels = spec.levels
    floor_code = np.floor(wc / scales)
    frac = wc / scales - floor_code

    ref = inputs @ w64.T
    denom = ref.size

    def hardened_mse(mask: np.ndarray) -> float:
        q = np.clip(floor_code + mask + zeros, 0, levels)
        wq = (q - zeros) * scales
        diff = inputs @ wq.T - ref
        return float(np.mean(diff * diff))

    nearest_mask = (np.rint(wc / scales) - floor_code).astype(np.int64)
    nearest_mse = hardened_mse(nearest_mask)
    best_mask = nearest_mask
    best_mse = nearest_mse

    v = _rect_sigmoid_inverse(np.clip(frac, 1e-4, 1.0 - 1e-4))
    m1 = np.zeros_like(v)
    m2 = np.zeros_like(v)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    T = config.iterations
    for it in range(T):
        t = it / max(T - 1, 1)
        reg_weight = config.reg_start * (config.reg_end / config.reg_start) ** t
        sharp = config.beta_start + (config.beta_end - config.beta_start) * t

        h = _rect_sigmoid(v)
        q_soft = floor_code + h + zeros
        q_clipped = np.clip(q_soft, 0, levels)
        wq = (q_clipped - zeros) * scales
        err = inputs @ wq.T - ref
        mse = np.mean(err * err)
        centered = np.abs(2.0 * h - 1.0)
        reg = reg_weight * np.sum(1.0 - centered ** sharp)
        loss = mse + reg
        if not math.isfinite(loss):
            raise ValueError(f"adaround_block: non-finite loss at iteration {it}")

        d_wq = (2.0 / denom) * (err.T @ inputs)
        d_h = d_wq * scales * ((q_soft > 0) & (q_soft < levels))
        d_h -= reg_weight * sharp * centered ** (sharp - 1.0) * np.sign(2.0 * h - 1.0) * 2.0
        sig = 1.0 / (1.0 + np.exp(-v))
        inner = sig * (_STRETCH_HI - _STRETCH_LO) + _STRETCH_LO
        d_v = d_h * ((inner > 0) & (inner < 1)) * (_STRETCH_HI - _STRETCH_LO) * sig * (1.0 - sig)

        m1 = beta1 * m1 + (1 - beta1) * d_v
        m2 = beta2 * m2 + (1 - beta2) * d_v * d_v
        step = config.lr * (m1 / (1 - beta1 ** (it + 1))) / (
            np.sqrt(m2 / (1 - beta2 ** (it + 1))) + eps)
        v -= step

        hard = (_rect_sigmoid(v) >= 0.5).astype(np.int64)
        cand = hardened_mse(hard)
        if cand < best_mse:
            best_mse = cand
            best_mask = hard

    return RoundingMask(mask=best_mask.astype(np.uint8), soft=_rect_sigmoid(v),
                        mse=best_mse, nearest_mse=nearest_mse)
