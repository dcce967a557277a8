"""Reconstruction, perceptual and Belief Predictor objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .codebook import TokenSelection, cosine_similarity
from .core import ShapeError
from .model import PerceptualBackbone, perceptual_features


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    mse: float
    perceptual: float
    belief_ce: float
    total: float
    phase: str = "main"

    def as_row(self, step: int) -> dict:
        return {"step": step, **asdict(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.mse, self.perceptual, self.belief_ce, self.total))


def mse_loss(predicted: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel of the image (not only masked patches)."""
    if predicted.shape != original.shape:
        raise ShapeError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(original.shape)}")
    return ((predicted - original) ** 2).mean()


def normalize_patches(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True)
    return (patches - mean) / (var + eps) ** 0.5


def perceptual_loss(backbone: PerceptualBackbone, predicted: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Negative sum over backbone layers of the cosine between flattened feature maps.

    Batched inputs ``[B, H, W, C]`` give the batch mean of the per-image loss.
    """
    if predicted.shape != original.shape:
        raise ShapeError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(original.shape)}")
    feats_pred = perceptual_features(backbone, predicted)
    feats_true = perceptual_features(backbone, original)
    lead = predicted.dim() - 3
    total = 0
    for fp, ft in zip(feats_pred, feats_true):
        total = total - cosine_similarity(fp.flatten(lead), ft.flatten(lead))
    return total.mean() if lead else total


def belief_ce_loss(selection: Union[TokenSelection, torch.Tensor], labels: torch.Tensor,
                   reduction: str = "mean") -> torch.Tensor:
    """Negative log-probability of each labelled token.

    ``selection`` is either a :class:`TokenSelection` (only masked positions count) or raw
    logits ``[m, n]`` with ``labels [m]``.
    """
    if isinstance(selection, TokenSelection):
        logits = selection.logits[selection.mask]
        labels = labels[selection.mask]
    else:
        logits = selection
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise LossError(f"labels must lie in [0, {n})")
    if labels.numel() == 0:
        return logits.sum() * 0
    nll = -F.log_softmax(logits, dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


def total_loss(mse: torch.Tensor, perceptual: torch.Tensor, belief_ce=None, *,
               weight_perceptual: float = 1.0, phase: str = "main",
               include_ce: Union[bool, None] = None) -> tuple[torch.Tensor, LossReport]:
    """Combine the objectives. The CE term enters during incubation (or when forced)."""
    if include_ce is None:
        include_ce = phase == "incubation"
    total = mse + weight_perceptual * perceptual
    ce_value = 0.0
    if belief_ce is not None:
        ce_value = float(belief_ce.detach())
        if include_ce:
            total = total + belief_ce
    report = LossReport(float(mse.detach()), float(perceptual.detach()), ce_value, float(total.detach()), phase)
    return total, report


def average_reports(reports: Sequence[LossReport]) -> LossReport:
    n = len(reports)
    return LossReport(
        sum(r.mse for r in reports) / n,
        sum(r.perceptual for r in reports) / n,
        sum(r.belief_ce for r in reports) / n,
        sum(r.total for r in reports) / n,
        reports[-1].phase,
    )
