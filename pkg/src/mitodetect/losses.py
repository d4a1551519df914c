"""Segmentation and classification losses on probabilities.

All functions take probabilities (post-sigmoid), not logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ComboLossWeights:
    w_jaccard: float = 1.0
    w_dice: float = 1.0
    w_focal: float = 1.0

    def __post_init__(self):
        ws = (self.w_jaccard, self.w_dice, self.w_focal)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"combo weights must be >= 0 and not all zero, got {ws}")


def _check(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    return targets.to(probs.dtype)


def focal_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    params: FocalParams = FocalParams(),
    reduction: str = "mean",
) -> torch.Tensor:
    """Binary focal loss ``-alpha_t * (1 - p_t)**gamma * log(p_t)``.

    ``alpha_t`` is ``alpha`` for positives and ``1 - alpha`` for negatives;
    with ``alpha=1`` negatives get weight 1 as well so that ``gamma=0``
    reduces exactly to binary cross-entropy.
    """
    t = _check(probs, targets)
    p = probs.clamp(EPS, 1 - EPS)
    p_t = t * p + (1 - t) * (1 - p)
    neg_w = 1.0 if params.alpha == 1 else 1 - params.alpha
    alpha_t = t * params.alpha + (1 - t) * neg_w
    loss = -alpha_t * (1 - p_t) ** params.gamma * torch.log(p_t)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    t = _check(probs, targets)
    inter = (probs * t).sum()
    return 1 - (2 * inter + smooth) / (probs.sum() + t.sum() + smooth)


def jaccard_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    t = _check(probs, targets)
    inter = (probs * t).sum()
    union = probs.sum() + t.sum() - inter
    return 1 - (inter + smooth) / (union + smooth)


def combo_seg_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    weights: ComboLossWeights = ComboLossWeights(),
    focal: FocalParams = FocalParams(),
    smooth: float = 1.0,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted Jaccard + Dice + focal loss.

    Returns the total and a dict of the (unweighted) components for logging.
    """
    j = jaccard_loss(probs, targets, smooth)
    d = dice_loss(probs, targets, smooth)
    f = focal_loss(probs, targets, focal, reduction="mean")
    total = weights.w_jaccard * j + weights.w_dice * d + weights.w_focal * f
    return total, {"jaccard": j.item(), "dice": d.item(), "focal": f.item()}


def dice_coefficient(pred_mask: torch.Tensor, target: torch.Tensor) -> float:
    """Hard Dice overlap of two binary masks; 1.0 when both are empty."""
    p = pred_mask.bool()
    t = target.bool()
    denom = p.sum().item() + t.sum().item()
    if denom == 0:
        return 1.0
    return 2.0 * (p & t).sum().item() / denom
