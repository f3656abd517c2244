"""Dice + cross-entropy objective with worst-prompt gradient selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

MODES = ("cotrain_max", "single")


def _target(target, like: Tensor) -> Tensor:
    t = torch.as_tensor(np.asarray(target) if not isinstance(target, Tensor) else target)
    t = t.to(dtype=like.dtype)
    if t.shape != like.shape:
        raise ValueError(f"shape mismatch: logits {tuple(like.shape)} vs target {tuple(t.shape)}")
    return t


def soft_dice_from_probs(probs: Tensor, target, epsilon: float = 1.0) -> Tensor:
    """Smoothed Dice loss on probabilities; reduces over the last two axes."""
    t = _target(target, probs)
    inter = (probs * t).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return 1 - (2 * inter + epsilon) / (denom + epsilon)


def soft_dice_loss(logits: Tensor, target, epsilon: float = 1.0) -> Tensor:
    return soft_dice_from_probs(torch.sigmoid(logits), target, epsilon)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Pixel-mean binary cross-entropy in the stable logit form."""
    t = _target(target, logits)
    per_pixel = F.binary_cross_entropy_with_logits(logits, t, reduction="none")
    return per_pixel.mean(dim=(-2, -1))


def prompt_totals(logits: Tensor, targets: Sequence) -> tuple[Tensor, Tensor, Tensor]:
    """Per-prompt ``(dice, ce, dice + ce)`` for ``(N, H, W)`` logits."""
    if logits.ndim != 3:
        raise ValueError(f"logits must be (N, H, W), got {tuple(logits.shape)}")
    if len(targets) != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit channels but {len(targets)} targets")
    t = torch.stack([_target(m, logits[i]) for i, m in enumerate(targets)])
    dice = soft_dice_loss(logits, t)
    ce = bce_loss(logits, t)
    return dice, ce, dice + ce


@dataclass(frozen=True)
class PromptLoss:
    dice_loss: float
    ce_loss: float
    total: float


@dataclass(frozen=True)
class LossBreakdown:
    per_prompt: tuple[PromptLoss, ...]
    selected_index: int
    selected_total: float


def combined_prompt_loss(logits: Tensor, targets: Sequence) -> LossBreakdown:
    with torch.no_grad():
        dice, ce, total = prompt_totals(logits, targets)
    per = tuple(PromptLoss(float(d), float(c), float(s)) for d, c, s in zip(dice, ce, total))
    return select_max([p.total for p in per], per)


def select_max(totals: Sequence[float], per: tuple[PromptLoss, ...] = ()) -> LossBreakdown:
    # first index wins ties
    idx = max(range(len(totals)), key=lambda i: (totals[i], -i))
    return LossBreakdown(per, idx, float(totals[idx]))


def training_loss(logits: Tensor, targets: Sequence, mode: str = "cotrain_max") -> Tensor:
    """Differentiable scalar: the worst prompt's Dice + CE, or the lone prompt's in ``single`` mode.

    Only the selected channel enters the graph, so every other channel gets an
    exactly-zero gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if mode == "single" and len(targets) != 1:
        raise ValueError(f"single mode needs exactly one target, got {len(targets)}")
    _, _, total = prompt_totals(logits, targets)
    if mode == "single":
        return total[0]
    # torch.argmax returns the first maximal index
    return total[int(torch.argmax(total.detach()))]


def batch_training_loss(logits: Sequence[Tensor], targets: Sequence[Sequence], mode: str) -> Tensor:
    """Mean over images of each image's :func:`training_loss`."""
    if not logits:
        raise ValueError("empty batch")
    return torch.stack([training_loss(lg, tg, mode) for lg, tg in zip(logits, targets, strict=True)]).mean()
