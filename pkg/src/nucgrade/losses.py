"""Loss terms and their weighted sum.

Every term is a per-pixel mean so the weights do not depend on resolution.
Prediction maps are N x C x H x W tensors, targets likewise (one-hot for the
categorical terms).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

EPS = 1e-7
TERMS = ("bc", "dist", "mc1", "mc2", "mcf")


@dataclass
class LossWeights:
    lambda_bc: float = 1.0
    lambda_dist: float = 2.0
    lambda_mc1: float = 1.0
    lambda_mc2: float = 1.0
    lambda_mcf: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def binary_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    p = pred.clamp(EPS, 1 - EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def l1_distance(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return (pred - target.to(pred.dtype)).abs().mean()


def categorical_ce(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None,
                   channel_dim: int = 1) -> torch.Tensor:
    """Mean over pixels of -sum_c t_c log p_c; ``mask`` restricts the mean to selected pixels."""
    _same_shape(pred, target)
    per_pixel = -(target.to(pred.dtype) * torch.log(pred.clamp(EPS, 1 - EPS))).sum(dim=channel_dim)
    if mask is None:
        return per_pixel.mean()
    mask = mask.to(per_pixel.dtype)
    return (per_pixel * mask).sum() / mask.sum().clamp_min(1.0)


def weighted_sum(components: dict[str, torch.Tensor | float], w: LossWeights):
    total = 0.0
    for term, value in components.items():
        total = total + w.weight(term) * value
    return total


def loss_components(outputs: dict, targets: dict, foreground_only: bool = False) -> dict:
    """Evaluate every term whose prediction head exists.

    ``targets`` holds tensors keyed ``binary``, ``distance`` (N x 1 x H x W) and
    one-hot ``task1``/``task2``/``final`` (N x C x H x W).
    """
    comps = {}
    if outputs.get("binary") is not None:
        comps["bc"] = binary_ce(outputs["binary"], targets["binary"])
    if outputs.get("distance") is not None:
        comps["dist"] = l1_distance(outputs["distance"], targets["distance"])
    mask = targets["binary"][:, 0] if foreground_only else None
    if outputs.get("task1") is not None:
        comps["mc1"] = categorical_ce(outputs["task1"], targets["task1"], mask)
    if outputs.get("task2") is not None:
        comps["mc2"] = categorical_ce(outputs["task2"], targets["task2"], mask)
    comps["mcf"] = categorical_ce(outputs["final"], targets["final"], mask)
    return comps


def total_loss(outputs: dict, targets: dict, w: LossWeights = LossWeights(),
               foreground_only: bool = False) -> torch.Tensor:
    return weighted_sum(loss_components(outputs, targets, foreground_only), w)
