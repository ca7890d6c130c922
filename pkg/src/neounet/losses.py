"""Hybrid segmentation/classification loss with unknown-label masking.

Every function takes probabilities (post-sigmoid), not logits. Soft counts are
pooled over every dimension except the class channel.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .exceptions import ConfigError

BCE_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 4 / 3
    w_c: float = 0.75
    w_s: float = 0.25
    smooth: float = 1.0

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ConfigError(f"alpha and beta must lie in (0, 1), got {self.alpha}, {self.beta}")
        if abs(self.alpha + self.beta - 1) > 1e-9:
            raise ConfigError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.w_c < 0 or self.w_s < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.smooth <= 0:
            raise ConfigError(f"smooth must be > 0, got {self.smooth}")

    def to_dict(self):
        return asdict(self)


@dataclass
class SupervisionTarget:
    """Dense targets derived from a label map with values in {0, 1, 2, 3}.

    ``class_targets`` is ``(N, 2, H, W)``; ``known_mask`` and ``seg_target`` are
    ``(N, 1, H, W)``.
    """

    class_targets: torch.Tensor
    known_mask: torch.Tensor
    seg_target: torch.Tensor

    @classmethod
    def from_labels(cls, labels: torch.Tensor, dtype=torch.float32) -> "SupervisionTarget":
        if labels.dim() == 2:
            labels = labels.unsqueeze(0)
        labels = labels.long()
        if labels.numel() and (labels.min() < 0 or labels.max() > 3):
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        class_targets = torch.stack([labels == 1, labels == 2], dim=1).to(dtype)
        known = (labels != 3).unsqueeze(1).to(dtype)
        seg = (labels > 0).unsqueeze(1).to(dtype)
        return cls(class_targets, known, seg)

    @property
    def spatial_size(self):
        return tuple(self.seg_target.shape[-2:])


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("predictions must lie in [0, 1]")


def _soft_counts(pred, target, mask=None, dims=None):
    if mask is not None:
        pred = pred * mask
        target = target * mask
    dims = tuple(range(pred.dim())) if dims is None else dims
    tp = (pred * target).sum(dims)
    fp = (pred * (1 - target)).sum(dims)
    fn = ((1 - pred) * target).sum(dims)
    return tp, fp, fn


def _tversky_index(tp, fp, fn, alpha, beta, smooth):
    return (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)


def _focal(loss, gamma):
    # (1 - TI) ** (1 / gamma) has an infinite slope at 0; route the exact-zero
    # case around the power so fully masked inputs give zero gradient, not NaN
    safe = loss.clamp_min(torch.finfo(loss.dtype).tiny)
    return torch.where(loss > 0, safe ** (1.0 / gamma), torch.zeros_like(loss))


def tversky_loss(pred, target, alpha=0.3, beta=0.7, smooth=1.0, mask=None):
    """``1 - (TP + s) / (TP + alpha FP + beta FN + s)`` over all elements."""
    _check_pair(pred, target)
    tp, fp, fn = _soft_counts(pred, target, mask)
    return 1 - _tversky_index(tp, fp, fn, alpha, beta, smooth)


def focal_tversky_loss(pred, target, alpha=0.3, beta=0.7, gamma=4 / 3, smooth=1.0, mask=None):
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return _focal(tversky_loss(pred, target, alpha, beta, smooth, mask), gamma)


def soft_dice_loss(pred, target, smooth=1.0):
    """``1 - (2 TP + s) / (sum(p) + sum(t) + s)``; equals ``tversky_loss`` at
    alpha = beta = 0.5 when the Tversky smoothing is ``s / 2``."""
    _check_pair(pred, target)
    tp = (pred * target).sum()
    return 1 - (2 * tp + smooth) / (pred.sum() + target.sum() + smooth)


def _bce_terms(pred, target):
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


def masked_bce(pred, target, mask=None):
    """Mean binary cross entropy over elements where ``mask`` is 1.

    ``mask`` may broadcast against ``pred``. Returns 0 for an all-zero mask.
    """
    _check_pair(pred, target)
    terms = _bce_terms(pred, target)
    if mask is None:
        return terms.mean()
    mask = mask.to(terms.dtype).expand_as(terms)
    count = mask.sum()
    return (terms * mask).sum() / count.clamp_min(1.0)


def multi_class_loss(pred, target: SupervisionTarget, config: LossConfig = None):
    """Average of masked BCE and masked Focal Tversky; unknown pixels drop out.

    Tversky counts are taken per channel and the two channel losses averaged.
    """
    config = config or LossConfig()
    _check_pair(pred, target.class_targets)
    mask = target.known_mask.to(pred.dtype).expand_as(pred)
    bce = masked_bce(pred, target.class_targets, mask)
    dims = (0, *range(2, pred.dim()))
    tp, fp, fn = _soft_counts(pred, target.class_targets, mask, dims)
    per_channel = 1 - _tversky_index(tp, fp, fn, config.alpha, config.beta, config.smooth)
    ft = _focal(per_channel, config.gamma).mean()
    return (bce + ft) / 2


def soft_or(pred):
    """Probabilistic OR over the channels, shape ``(N, 1, H, W)``. A single
    channel (binary pretraining heads) passes through unchanged."""
    if pred.shape[1] == 1:
        return pred
    return 1 - (1 - pred[:, 0:1]) * (1 - pred[:, 1:2])


def segmentation_loss(pred, target: SupervisionTarget, config: LossConfig = None):
    config = config or LossConfig()
    seg_pred = soft_or(pred)
    _check_pair(seg_pred, target.seg_target)
    bce = masked_bce(seg_pred, target.seg_target)
    tv = tversky_loss(seg_pred, target.seg_target, config.alpha, config.beta, config.smooth)
    return (bce + tv) / 2


def head_loss(pred, target: SupervisionTarget, config: LossConfig = None):
    config = config or LossConfig()
    if pred.shape[1] == 1:
        # binary head: there is no class term to weigh against
        return segmentation_loss(pred, target, config)
    total = pred.new_zeros(())
    if config.w_c:
        total = total + config.w_c * multi_class_loss(pred, target, config)
    if config.w_s:
        total = total + config.w_s * segmentation_loss(pred, target, config)
    return total


def total_loss(heads, target: SupervisionTarget, config: LossConfig = None):
    """Sum over heads of ``w_c L_c + w_s L_s``, each head upsampled to the
    target resolution first."""
    config = config or LossConfig()
    size = target.spatial_size
    total = 0
    for head in heads:
        if tuple(head.shape[-2:]) != size:
            head = F.interpolate(head, size=size, mode="bilinear", align_corners=False)
            head = head.clamp(0.0, 1.0)  # guard against rounding just past 1
        total = total + head_loss(head, target, config)
    return total
