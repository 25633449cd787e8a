"""Patch-level knowledge selection: weighted per-patch token distillation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .backbone import TokenSet
from .errors import RejectedInputError

DEFAULT_EPSILON = 1e-8


class WeightMode(str, Enum):
    INVERSE_DISTANCE = "inverse_distance"
    UNIFORM = "uniform"
    DISTANCE = "distance"


@dataclass
class PatchWeights:
    raw: torch.Tensor         # (..., N)
    normalized: torch.Tensor  # (..., N), max 1 along the patch axis
    mode: WeightMode


def cls_patch_distances(tokens: TokenSet) -> torch.Tensor:
    return torch.linalg.vector_norm(
        tokens.cls_token.unsqueeze(-2) - tokens.patch_tokens, dim=-1)


def compute_patch_weights(tokens: TokenSet, mode: WeightMode | str = WeightMode.INVERSE_DISTANCE,
                          epsilon: float = DEFAULT_EPSILON) -> PatchWeights:
    """Per-patch distillation weights from [CLS]-to-patch L2 distances.

    Patches close to the [CLS] embedding get large weights in
    ``inverse_distance`` mode. Weights are computed without gradient.
    """
    mode = WeightMode(mode)
    if not epsilon > 0:
        raise RejectedInputError(f"epsilon must be > 0, got {epsilon}")
    with torch.no_grad():
        dist = cls_patch_distances(tokens)
        if mode is WeightMode.UNIFORM:
            raw = torch.ones_like(dist)
        elif mode is WeightMode.INVERSE_DISTANCE:
            raw = 1.0 / (dist + epsilon)
        else:
            # epsilon keeps raw weights strictly positive when every patch sits on [CLS]
            raw = dist + epsilon
        normalized = raw / raw.amax(dim=-1, keepdim=True)
    return PatchWeights(raw, normalized, mode)


def pks_loss(tokens_current: TokenSet, tokens_old: TokenSet, weights: PatchWeights | torch.Tensor,
             reduction: str = "mean") -> torch.Tensor:
    """``sum_i w_i |P_i - P'_i| + |P_cls - P'_cls|`` per image, unsquared L2 norms.

    ``weights`` are treated as constants. For batched tokens the per-image
    values are reduced with ``reduction`` ("mean", "sum" or "none").
    """
    w = weights.normalized if isinstance(weights, PatchWeights) else weights
    p_cur, p_old = tokens_current.patch_tokens, tokens_old.patch_tokens
    c_cur, c_old = tokens_current.cls_token, tokens_old.cls_token
    if p_cur.shape != p_old.shape or c_cur.shape != c_old.shape:
        raise RejectedInputError(
            f"token shapes differ: {tuple(p_cur.shape)} vs {tuple(p_old.shape)}")
    if w.shape != p_cur.shape[:-1]:
        raise RejectedInputError(
            f"weights shape {tuple(w.shape)} does not match patches {tuple(p_cur.shape[:-1])}")
    w = w.detach().to(p_cur.dtype)
    patch_term = (w * _safe_norm(p_cur - p_old.detach())).sum(dim=-1)
    per_image = patch_term + _safe_norm(c_cur - c_old.detach())
    if reduction == "none" or per_image.dim() == 0:
        return per_image
    if reduction == "mean":
        return per_image.mean()
    if reduction == "sum":
        return per_image.sum()
    raise RejectedInputError(f"unknown reduction {reduction!r}")


def _safe_norm(delta: torch.Tensor) -> torch.Tensor:
    # zero subgradient at delta == 0, which happens on every first step after a snapshot
    sq = (delta * delta).sum(dim=-1)
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, safe.sqrt(), torch.zeros_like(sq))
