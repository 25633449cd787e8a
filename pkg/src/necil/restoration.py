"""Prototype restoration.

Offsets of samples from their class centers are supervised to agree between
the current and the frozen previous model; the current offsets are then added
to stored old-class centers to synthesize old-class embeddings, which join
the real embeddings in the classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ClassifierHead
from .errors import RejectedInputError
from .prototypes import PrototypeStore


def split_batch(batch_indices, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint halves of size ``bs // 2``; with odd ``bs`` one index is left out."""
    idx = np.arange(batch_indices) if np.isscalar(batch_indices) else np.asarray(batch_indices)
    bs = len(idx)
    if bs < 2:
        raise RejectedInputError(f"batch size must be >= 2 to split, got {bs}")
    half = bs // 2
    perm = idx[rng.permutation(bs)]
    return perm[:half], perm[half:2 * half]


@dataclass
class OffsetPairs:
    current: torch.Tensor  # (sz, d) offsets under the live model, S1 side
    old: torch.Tensor      # (sz, d) offsets under the frozen model, S2 side
    i: np.ndarray
    j: np.ndarray


def offset_pairs(cls_current: torch.Tensor, cls_old: torch.Tensor, centers: torch.Tensor,
                 rng: np.random.Generator) -> OffsetPairs:
    """Pair current-model offsets from S1 with old-model offsets from S2.

    ``centers[b]`` is the current-task center of sample ``b``'s class, used for
    both models. Pairs are formed positionally after shuffling S2.
    """
    if not (cls_current.shape == cls_old.shape == centers.shape):
        raise RejectedInputError(
            f"shape mismatch: {tuple(cls_current.shape)}, {tuple(cls_old.shape)}, "
            f"{tuple(centers.shape)}")
    s1, s2 = split_batch(cls_current.shape[0], rng)
    s2 = s2[rng.permutation(len(s2))]
    centers = centers.detach()
    o_cur = cls_current[torch.as_tensor(s1)] - centers[torch.as_tensor(s1)]
    o_old = (cls_old[torch.as_tensor(s2)] - centers[torch.as_tensor(s2)]).detach()
    return OffsetPairs(o_cur, o_old, s1, s2)


def pr_loss(cls_current: torch.Tensor, cls_old: torch.Tensor | None, centers: torch.Tensor,
            rng: np.random.Generator) -> torch.Tensor:
    """Mean over pairs of the per-pair MSE between current and old offsets.

    Returns zero when there is no previous model (first task).
    """
    if cls_old is None:
        return cls_current.new_zeros(())
    pairs = offset_pairs(cls_current, cls_old, centers, rng)
    per_pair = ((pairs.current - pairs.old) ** 2).mean(dim=-1)
    return per_pair.mean()


@dataclass
class RestoredPrototypes:
    embeddings: torch.Tensor  # (count, d)
    labels: torch.Tensor      # (count,) global class ids of the old classes
    old_tasks: torch.Tensor   # (count,)
    donors: torch.Tensor      # (count,) batch index of the donor sample

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def empty(cls, embed_dim: int, dtype: torch.dtype) -> "RestoredPrototypes":
        z = torch.zeros(0, dtype=torch.int64)
        return cls(torch.zeros(0, embed_dim, dtype=dtype), z, z.clone(), z.clone())


def restore_prototypes(cls_current: torch.Tensor, centers: torch.Tensor, store: PrototypeStore,
                       count: int, rng: np.random.Generator) -> RestoredPrototypes:
    """Old-class embeddings ``mu_old + (F(x) - mu_y)`` from random batch donors.

    Gradient flows through ``F(x)``; centers are constants.
    """
    if count < 1:
        raise RejectedInputError(f"count must be >= 1, got {count}")
    if cls_current.shape != centers.shape:
        raise RejectedInputError("cls_current and centers must have the same shape")
    if not store.old_classes:
        return RestoredPrototypes.empty(cls_current.shape[-1], cls_current.dtype)
    donors = rng.integers(0, cls_current.shape[0], size=count)
    picks = store.sample_old_classes(rng, count)
    old_tasks = [t for t, _ in picks]
    old_classes = [c for _, c in picks]
    mu_old = store.centers(old_classes, dtype=cls_current.dtype)
    donors_t = torch.as_tensor(donors)
    offsets = cls_current[donors_t] - centers.detach()[donors_t]
    return RestoredPrototypes(
        embeddings=mu_old + offsets,
        labels=torch.tensor(old_classes, dtype=torch.int64),
        old_tasks=torch.tensor(old_tasks, dtype=torch.int64),
        donors=donors_t.to(torch.int64),
    )


def cil_loss(cls_current: torch.Tensor, targets: torch.Tensor, head: ClassifierHead,
             restored_embeddings: torch.Tensor | None = None,
             restored_targets: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy averaged over real embeddings and restored prototypes.

    ``targets`` and ``restored_targets`` are classifier row indices.
    """
    z, y = cls_current, targets
    if restored_embeddings is not None and len(restored_embeddings):
        z = torch.cat([z, restored_embeddings])
        y = torch.cat([y, restored_targets.to(y.dtype)])
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= head.num_classes):
        raise RejectedInputError(
            f"label outside classifier range [0, {head.num_classes}): {y.tolist()}")
    return F.cross_entropy(head(z), y)

