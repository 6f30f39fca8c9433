"""Stack-level soft Dice energy with a per-slice L2 regulariser.

For a stack ``pred``/``label`` of shape (k, l, w)::

    L_v = D(pred, label)                      # whole-stack soft Dice loss
    L_s = || (D(pred[m], label[m]))_m ||_2    # norm of the per-slice losses
    L_t = lambda_v * L_v + lambda_s * L_s     # averaged over the batch

where ``D(p, y) = 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)``.

The gradient is assembled analytically: slice ``p`` receives the stack term
restricted to that slice plus the slice term scaled by
``D_p / (||D||_2 + eps_norm)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import NonFiniteError, ShapeError

EPS_SMOOTH = 1.0
EPS_NORM = 1e-8
PRED_CLAMP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 0.5
    lambda_s: float = 0.5
    epsilon_smooth: float = EPS_SMOOTH
    epsilon_norm: float = EPS_NORM

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_s < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.lambda_v + self.lambda_s <= 0:
            raise ValueError("lambda_v + lambda_s must be positive")
        if self.epsilon_smooth <= 0 or self.epsilon_norm <= 0:
            raise ValueError("smoothing constants must be positive")


@dataclass
class StackLossValue:
    total: float
    l_v: float
    l_s: float
    per_slice_losses: list = field(default_factory=list)


def _check_pair(pred, label):
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {label.shape}")
    return pred, label


def soft_dice_loss(pred, label, eps=EPS_SMOOTH):
    pred, label = _check_pair(pred, label)
    inter = np.sum(pred * label)
    denom = np.sum(pred) + np.sum(label)
    return float(1.0 - (2.0 * inter + eps) / (denom + eps))


def soft_dice_grad(pred, label, eps=EPS_SMOOTH):
    """d soft_dice_loss / d pred, same shape as ``pred``."""
    pred, label = _check_pair(pred, label)
    inter = np.sum(pred * label)
    denom = np.sum(pred) + np.sum(label) + eps
    return ((2.0 * inter + eps) - 2.0 * label * denom) / denom**2


def _slice_terms(pred, label, eps):
    axes = tuple(range(1, pred.ndim))
    inter = np.sum(pred * label, axis=axes)
    denom = np.sum(pred, axis=axes) + np.sum(label, axis=axes) + eps
    return inter, denom


def per_slice_dice_losses(pred_stack, label_stack, eps=EPS_SMOOTH):
    pred, label = _check_pair(pred_stack, label_stack)
    inter, denom = _slice_terms(pred, label, eps)
    return 1.0 - (2.0 * inter + eps) / denom


def slice_regularizer(pred_stack, label_stack, eps=EPS_SMOOTH):
    """Return ``(l_s, per_slice_losses)`` for a (k, ...) stack."""
    pred, label = _check_pair(pred_stack, label_stack)
    if pred.ndim < 1 or pred.shape[0] < 1:
        raise ShapeError("stack needs at least one slice")
    losses = per_slice_dice_losses(pred, label, eps)
    return float(np.sqrt(np.sum(losses**2))), losses


def stack_loss(pred_stack, label_stack, weights=LossWeights()):
    """Energy of a single stack (no batch averaging)."""
    l_v = soft_dice_loss(pred_stack, label_stack, weights.epsilon_smooth)
    l_s, losses = slice_regularizer(pred_stack, label_stack, weights.epsilon_smooth)
    total = weights.lambda_v * l_v + weights.lambda_s * l_s
    return StackLossValue(total, l_v, l_s, [float(x) for x in losses])


def total_loss(batch, weights=LossWeights()):
    """Batch-averaged energy over an iterable of ``(pred_stack, label_stack)``."""
    values = [stack_loss(p, y, weights) for p, y in batch]
    if not values:
        raise ValueError("total_loss needs a non-empty batch")
    n = len(values)
    per_slice = np.mean([v.per_slice_losses for v in values], axis=0) if \
        len({len(v.per_slice_losses) for v in values}) == 1 else []
    return StackLossValue(
        total=sum(v.total for v in values) / n,
        l_v=sum(v.l_v for v in values) / n,
        l_s=sum(v.l_s for v in values) / n,
        per_slice_losses=[float(x) for x in per_slice],
    )


def loss_gradient(pred_stack, label_stack, weights=LossWeights(), batch_size=1):
    """Analytic d L_t / d pred for one stack of a batch of ``batch_size``."""
    pred, label = _check_pair(pred_stack, label_stack)
    eps = weights.epsilon_smooth
    grad = np.zeros_like(pred)
    if weights.lambda_v:
        grad += weights.lambda_v * soft_dice_grad(pred, label, eps)
    if weights.lambda_s:
        inter, denom = _slice_terms(pred, label, eps)
        losses = 1.0 - (2.0 * inter + eps) / denom
        norm = np.sqrt(np.sum(losses**2))
        scale = losses / (norm + weights.epsilon_norm)
        shape = (-1,) + (1,) * (pred.ndim - 1)
        d_slice = ((2.0 * inter + eps).reshape(shape) - 2.0 * label * denom.reshape(shape)) \
            / (denom**2).reshape(shape)
        grad += weights.lambda_s * scale.reshape(shape) * d_slice
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite value in the loss gradient")
    return grad / batch_size


def clamp_prediction(pred, lo=PRED_CLAMP):
    """Clip sigmoid outputs into [lo, 1 - lo]; returns ``(clipped, pass_mask)``."""
    clipped = np.clip(pred, lo, 1.0 - lo)
    return clipped, clipped == pred
