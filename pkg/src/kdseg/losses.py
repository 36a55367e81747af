"""Loss terms for distilling a multi-modal segmentation teacher into a
mono-modal student.

The student objective combines three terms:

* a distillation term against the teacher's temperature-softened predictions
  (soft Dice + binary cross-entropy against the binarized soft target),
* a Kullback-Leibler term aligning the student's encoder bottleneck
  distribution with the teacher's,
* a ground-truth term (soft Dice + binary cross-entropy against the
  reference regions).

All functions are pure, differentiable through the student-side arguments
only, and reduce over the batch with a mean so the weighting parameters keep
their meaning regardless of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ContractError

# Smoothing added to numerator and denominator of the soft Dice ratio. Small
# enough that binary-mask Dice matches exact set counting to well below 1e-6,
# while still giving empty-vs-empty a score of 1.
DICE_EPS = 1e-8

# Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before logs so the
# cross-entropy stays finite under saturated predictions.
BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Weighting of the student objective and the per-term enable flags.

    ``lam`` balances distillation against ground truth, ``alpha`` scales the
    bottleneck KL term, ``temperature`` softens the teacher targets. The
    enable flags implement the ablation rows: with ``enable_kd`` off the
    ground-truth term regains full weight (coefficient 1, not ``1 - lam``).
    """

    lam: float = 0.75
    alpha: float = 10.0
    temperature: float = 5.0
    enable_kd: bool = True
    enable_kl: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must be in [0, 1], got {self.lam}")
        if self.alpha < 0.0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.temperature <= 0.0:
            raise ContractError(
                f"temperature must be > 0, got {self.temperature}"
            )


@dataclass
class LossReport:
    """Scalar values of the individual terms and their weighted total."""

    kd: float
    kl: float
    gt: float
    total: float

    @classmethod
    def from_terms(
        cls, kd: float, gt: float, kl: float, weights: LossWeights
    ) -> "LossReport":
        return cls(
            kd=kd, kl=kl, gt=gt, total=total_loss(kd, gt, kl, weights)
        )


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ContractError(f"{name} contains non-finite values")


def _flat_per_channel(t: Tensor) -> Tensor:
    """View as (batch, channels, voxels); 0-d/1-d inputs become one channel."""
    if t.dim() >= 2:
        return t.reshape(t.shape[0], t.shape[1], -1)
    return t.reshape(1, 1, -1)


def temperature_soften(logits: Tensor, temperature: float) -> Tensor:
    """Per-channel logistic activation of ``logits / temperature``.

    Higher temperatures push every probability towards 0.5; ``temperature=1``
    reproduces the plain activation.
    """
    if temperature <= 0.0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    _check_finite(logits, "logits")
    return torch.sigmoid(logits / temperature)


def soft_dice(pred: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice score, averaged over batch and region channels.

    Per sample and channel: ``(2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)``
    with the sums taken over the spatial volume. Two empty masks score 1.
    """
    if pred.shape != target.shape:
        raise ContractError(
            f"shape mismatch: pred {tuple(pred.shape)} vs "
            f"target {tuple(target.shape)}"
        )
    p = _flat_per_channel(pred)
    t = _flat_per_channel(target)
    inter = (p * t).sum(dim=-1)
    dice = (2.0 * inter + eps) / (p.sum(dim=-1) + t.sum(dim=-1) + eps)
    return dice.mean()


def binary_cross_entropy(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against a binary
    target, with predictions clamped away from 0 and 1."""
    if pred.shape != target.shape:
        raise ContractError(
            f"shape mismatch: pred {tuple(pred.shape)} vs "
            f"target {tuple(target.shape)}"
        )
    if not torch.logical_or(target == 0, target == 1).all():
        raise ContractError("target must be binary (all values in {0, 1})")
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def binarize(probs: Tensor, threshold: float = 0.5) -> Tensor:
    """Elementwise indicator ``probs >= threshold`` (boundary inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    return (probs >= threshold).to(probs.dtype)


def kd_loss(
    student_logits: Tensor, teacher_logits: Tensor, temperature: float
) -> Tensor:
    """Distillation term: soft Dice loss against the teacher's softened
    prediction plus BCE against its binarization.

    The teacher side is detached; no gradient reaches the teacher. The
    student activation is taken at temperature 1.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ContractError(
            f"shape mismatch: student {tuple(student_logits.shape)} vs "
            f"teacher {tuple(teacher_logits.shape)}"
        )
    soft = temperature_soften(teacher_logits.detach(), temperature)
    hard = binarize(soft, 0.5)
    student_probs = torch.sigmoid(student_logits)
    return (1.0 - soft_dice(student_probs, soft)) + binary_cross_entropy(
        student_probs, hard
    )


def flatten_normalize(bottleneck: Tensor) -> Tensor:
    """Flatten an activation map to a vector and normalize it to a
    probability distribution via softmax.

    Softmax is used because raw activations may be negative; the output is
    invariant to adding a constant to every activation.
    """
    _check_finite(bottleneck, "bottleneck")
    return torch.softmax(bottleneck.reshape(-1), dim=0)


def kl_bottleneck_loss(student_bn: Tensor, teacher_bn: Tensor) -> Tensor:
    """KL divergence from the student's normalized bottleneck to the
    teacher's, ``KL(q || p)`` with q the teacher distribution.

    Inputs with a leading batch dimension are normalized per sample and the
    per-sample divergences are averaged. Asymmetric by construction: the
    student distribution is pulled towards the teacher's. Teacher side is
    detached.
    """
    if student_bn.numel() != teacher_bn.numel():
        raise ContractError(
            f"bottleneck element counts differ: {student_bn.numel()} vs "
            f"{teacher_bn.numel()}"
        )
    _check_finite(student_bn, "student bottleneck")
    _check_finite(teacher_bn, "teacher bottleneck")
    s = student_bn if student_bn.dim() > 1 else student_bn.reshape(1, -1)
    t = teacher_bn if teacher_bn.dim() > 1 else teacher_bn.reshape(1, -1)
    s = s.reshape(s.shape[0], -1)
    t = t.detach().reshape(t.shape[0], -1)
    if s.shape != t.shape:
        raise ContractError(
            f"bottleneck batch layouts differ: {tuple(student_bn.shape)} vs "
            f"{tuple(teacher_bn.shape)}"
        )
    log_p = torch.log_softmax(s, dim=1)
    log_q = torch.log_softmax(t, dim=1)
    kl = (log_q.exp() * (log_q - log_p)).sum(dim=1)
    return kl.mean()


def gt_loss(student_logits: Tensor, reference: Tensor) -> Tensor:
    """Ground-truth term: soft Dice loss plus BCE against the reference
    region masks."""
    if student_logits.shape != reference.shape:
        raise ContractError(
            f"shape mismatch: logits {tuple(student_logits.shape)} vs "
            f"reference {tuple(reference.shape)}"
        )
    if not torch.logical_or(reference == 0, reference == 1).all():
        raise ContractError("reference must be binary (all values in {0, 1})")
    probs = torch.sigmoid(student_logits)
    ref = reference.to(probs.dtype)
    return (1.0 - soft_dice(probs, ref)) + binary_cross_entropy(probs, ref)


def total_loss(kd, gt, kl, weights: LossWeights):
    """Weighted combination of the three terms under the ablation flags.

    With ``enable_kd``: ``lam * kd + (1 - lam) * gt``; without it the
    ground-truth term keeps full weight. ``enable_kl`` toggles ``alpha * kl``.
    Accepts floats or tensors.
    """
    if weights.enable_kd:
        out = weights.lam * kd + (1.0 - weights.lam) * gt
    else:
        out = gt
    if weights.enable_kl:
        out = out + weights.alpha * kl
    return out
