"""Per-class prototype centers: the only per-class state kept from old tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (EmptyStoreError, ImmutablePrototypeError, IncompleteTaskError,
                     ProtocolViolationError, RejectedInputError)


@dataclass
class ClassPrototype:
    class_id: int
    task_id: int
    total: torch.Tensor  # float64 running sum of contributed embeddings
    sample_count: int = 0
    finalized: bool = False

    @property
    def center(self) -> torch.Tensor:
        if self.sample_count == 0:
            raise IncompleteTaskError(f"class {self.class_id} has no contributions")
        return self.total / self.sample_count


class PrototypeStore:
    """Running class means during a task, frozen once the task is finalized."""

    def __init__(self, embed_dim: int):
        self.embed_dim = embed_dim
        self._protos: dict[int, ClassPrototype] = {}
        self._task_classes: dict[int, list[int]] = {}
        self.current_task: int | None = None

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._protos

    def __getitem__(self, class_id: int) -> ClassPrototype:
        return self._protos[class_id]

    @property
    def finalized_tasks(self) -> list[int]:
        return [t for t, cs in self._task_classes.items() if all(self._protos[c].finalized for c in cs)]

    @property
    def old_classes(self) -> list[tuple[int, int]]:
        """(task_id, class_id) of every finalized class, in registration order."""
        return [(p.task_id, p.class_id) for p in self._protos.values() if p.finalized]

    def begin_task(self, task_id: int, class_ids) -> None:
        if self.current_task is not None:
            raise ProtocolViolationError(f"task {self.current_task} has not been finalized")
        class_ids = [int(c) for c in class_ids]
        clash = sorted(set(class_ids) & set(self._protos))
        if clash:
            raise ProtocolViolationError(f"classes {clash} already belong to an earlier task")
        if task_id in self._task_classes:
            raise ProtocolViolationError(f"task {task_id} already registered")
        self._task_classes[task_id] = class_ids
        for c in class_ids:
            self._protos[c] = ClassPrototype(c, task_id, torch.zeros(self.embed_dim, dtype=torch.float64))
        self.current_task = task_id

    def restart_running(self) -> None:
        """Forget accumulated contributions of the current task's classes."""
        for c in self._task_classes.get(self.current_task, []):
            p = self._protos[c]
            p.total = torch.zeros_like(p.total)
            p.sample_count = 0

    def update_center(self, class_id: int, cls_embeddings: torch.Tensor) -> torch.Tensor:
        """Add a batch of embeddings ``(n, d)`` to ``class_id``'s running mean."""
        class_id = int(class_id)
        if class_id not in self._protos:
            raise RejectedInputError(f"class {class_id} is not registered")
        p = self._protos[class_id]
        if p.finalized:
            raise ImmutablePrototypeError(f"class {class_id} belongs to finalized task {p.task_id}")
        emb = cls_embeddings.detach().to(torch.float64).reshape(-1, self.embed_dim)
        if not torch.isfinite(emb).all():
            raise RejectedInputError(f"non-finite embedding for class {class_id}")
        p.total = p.total + emb.sum(dim=0)
        p.sample_count += emb.shape[0]
        return p.center

    def update_from_batch(self, cls_embeddings: torch.Tensor, labels: torch.Tensor) -> None:
        for c in torch.unique(labels).tolist():
            self.update_center(c, cls_embeddings[labels == c])

    def finalize_task(self, task_id: int) -> None:
        if task_id not in self._task_classes:
            raise RejectedInputError(f"unknown task {task_id}")
        missing = [c for c in self._task_classes[task_id] if self._protos[c].sample_count == 0]
        if missing:
            raise IncompleteTaskError(f"task {task_id}: classes {missing} never updated")
        for c in self._task_classes[task_id]:
            self._protos[c].finalized = True
        if self.current_task == task_id:
            self.current_task = None

    def centers(self, class_ids, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Stacked centers for a sequence/tensor of class ids."""
        if isinstance(class_ids, torch.Tensor):
            class_ids = class_ids.tolist()
        if not class_ids:
            return torch.zeros(0, self.embed_dim, dtype=dtype)
        try:
            rows = [self._protos[int(c)].center for c in class_ids]
        except KeyError as e:
            raise RejectedInputError(f"no prototype for class {e.args[0]}") from None
        return torch.stack(rows).to(dtype)

    def sample_old_classes(self, rng: np.random.Generator, size: int) -> list[tuple[int, int]]:
        old = self.old_classes
        if not old:
            raise EmptyStoreError("no finalized old classes")
        idx = rng.integers(0, len(old), size=size)
        return [old[i] for i in idx]

    def sample_old_class(self, rng: np.random.Generator) -> tuple[int, int]:
        return self.sample_old_classes(rng, 1)[0]

    # checkpoint (de)serialization

    def state_tensors(self) -> dict[str, torch.Tensor]:
        protos = list(self._protos.values())
        return {
            "class_ids": torch.tensor([p.class_id for p in protos], dtype=torch.int64),
            "task_ids": torch.tensor([p.task_id for p in protos], dtype=torch.int64),
            "counts": torch.tensor([p.sample_count for p in protos], dtype=torch.int64),
            "finalized": torch.tensor([p.finalized for p in protos], dtype=torch.bool),
            "sums": (torch.stack([p.total for p in protos]) if protos
                     else torch.zeros(0, self.embed_dim, dtype=torch.float64)),
        }

    @classmethod
    def from_state_tensors(cls, tensors: dict[str, torch.Tensor], embed_dim: int) -> "PrototypeStore":
        store = cls(embed_dim)
        rows = zip(tensors["class_ids"].tolist(), tensors["task_ids"].tolist(),
                   tensors["counts"].tolist(), tensors["finalized"].tolist(), tensors["sums"])
        for c, t, n, fin, total in rows:
            store._protos[c] = ClassPrototype(c, t, total.clone(), n, fin)
            store._task_classes.setdefault(t, []).append(c)
        open_tasks = [t for t, cs in store._task_classes.items()
                      if not all(store._protos[c].finalized for c in cs)]
        store.current_task = open_tasks[-1] if open_tasks else None
        return store
