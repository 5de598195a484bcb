"""Bidirectional distillation losses for quantization-aware training.

A frozen full-precision teacher guides the quantized student through a
confidence-weighted pair of KL terms:

    distill = gamma * KL(P_student || P_teacher)
              + (1 - gamma) * KL(P_teacher || P_student)

``gamma`` is the teacher's average probability on the correct class,
estimated over a fixed window of early batches and frozen afterwards: a
confident teacher pulls the student toward mode-seeking reverse KL, a shaky
one falls back to mass-covering forward KL. The combined objective is

    total = distill_weight * distill + ce_weight * cross_entropy

with the teacher detached throughout, so no gradient ever reaches it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor

__all__ = [
    "DistillConfig",
    "cross_entropy",
    "distill_loss",
    "estimate_gamma",
    "kl_divergence",
    "total_loss",
]


@dataclass(frozen=True)
class DistillConfig:
    """Loss weighting and gamma-estimation settings.

    ``gamma = None`` means estimate it from the teacher; a float pins it.
    """

    gamma: float | None = None
    distill_weight: float = 1.0
    ce_weight: float = 1.0
    smoothing_eps: float = 1e-8
    gamma_estimation_steps: int = 100

    def __post_init__(self):
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.smoothing_eps <= 0:
            raise ValueError("smoothing_eps must be positive")
        if self.gamma_estimation_steps < 1:
            raise ValueError("gamma_estimation_steps must be >= 1")


def _check_distribution(name: str, p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ValueError(f"{name} must be 2-d (batch, classes), got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    sums = p.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        i = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"{name} row {i} sums to {sums[i]:.6f}, expected 1")


def _smooth(p: Tensor, eps: float) -> Tensor:
    """Floor probabilities at eps and renormalize each row."""
    floored = autodiff.clamp_min(p, eps)
    return autodiff.div(floored, autodiff.tensor_sum(floored, axis=1, keepdims=True))


def kl_divergence(p, q, eps: float = 1e-8) -> Tensor:
    """Mean KL(p || q) over the batch, with eps smoothing of both inputs.

    Rows must already be probability distributions; smoothing only guards the
    logs, so zero entries stay harmless and the result stays finite.
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shapes differ, {p.shape} vs {q.shape}")
    _check_distribution("p", p.data)
    _check_distribution("q", q.data)
    ps = _smooth(p, eps)
    qs = _smooth(q, eps)
    gap = autodiff.sub(autodiff.log(ps), autodiff.log(qs))
    total = autodiff.tensor_sum(autodiff.mul(ps, gap))
    return autodiff.mul(total, 1.0 / p.shape[0])


def distill_loss(student_logits: Tensor, teacher_logits: Tensor, gamma: float,
                 eps: float = 1e-8) -> Tensor:
    """Confidence-weighted sum of reverse and forward KL between softmaxes.

    The teacher side is detached; the result is exactly linear in ``gamma``
    for fixed logits.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"distill_loss: logit shapes differ, {student_logits.shape} vs "
            f"{teacher_logits.shape}")
    p_student = autodiff.softmax(student_logits)
    p_teacher = autodiff.softmax(teacher_logits.detach())
    reverse = kl_divergence(p_student, p_teacher, eps)
    forward = kl_divergence(p_teacher, p_student, eps)
    return autodiff.add(autodiff.mul(reverse, gamma), autodiff.mul(forward, 1.0 - gamma))


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    batch, n_classes = logits.shape
    if targets.shape != (batch,):
        raise ValueError(f"cross_entropy: expected {batch} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"cross_entropy: target out of range [0, {n_classes})")
    onehot = np.zeros((batch, n_classes), dtype=np.float32)
    onehot[np.arange(batch), targets] = 1.0
    picked = autodiff.tensor_sum(autodiff.mul(autodiff.log_softmax(logits), Tensor(onehot)))
    return autodiff.mul(picked, -1.0 / batch)


def estimate_gamma(teacher_logits_fn: Callable[..., Tensor],
                   batches: Iterable[tuple], eps: float = 1e-8) -> float:
    """Mean teacher probability on the correct class over the given batches.

    Each batch is (inputs, targets) where ``inputs`` is passed to the logits
    function (a tuple is splatted). Runs without recording gradients; the
    result is clamped into [0, 1].
    """
    probs: list[np.ndarray] = []
    with autodiff.no_grad():
        for inputs, targets in batches:
            logits = teacher_logits_fn(*inputs) if isinstance(inputs, tuple) \
                else teacher_logits_fn(inputs)
            data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            targets = np.asarray(targets)
            if data.ndim != 2 or targets.shape != (data.shape[0],):
                raise ValueError(
                    f"estimate_gamma: logits {data.shape} do not match targets "
                    f"{targets.shape}")
            if targets.min() < 0 or targets.max() >= data.shape[1]:
                raise ValueError("estimate_gamma: target out of range")
            shifted = data - data.max(axis=1, keepdims=True)
            e = np.exp(shifted.astype(np.float64))
            p = e / e.sum(axis=1, keepdims=True)
            probs.append(p[np.arange(len(targets)), targets])
    if not probs:
        raise ValueError("estimate_gamma: no batches given")
    return float(np.clip(np.concatenate(probs).mean(), 0.0, 1.0))


def total_loss(distill: Tensor, ce: Tensor, cfg: DistillConfig) -> Tensor:
    """Weighted sum of the distillation and cross-entropy terms."""
    for name, t in (("distill", distill), ("ce", ce)):
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"total_loss: non-finite {name} term")
    return autodiff.add(autodiff.mul(distill, cfg.distill_weight),
                        autodiff.mul(ce, cfg.ce_weight))
