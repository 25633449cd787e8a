"""Incremental-learning metrics: accuracy matrix, average/last accuracy, forgetting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import RejectedInputError


class AccuracyMatrix:
    """Lower-triangular ``a[m, n]``: accuracy on task n after learning task m.

    Tasks are 1-based in the public API and in CSV files.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise RejectedInputError("need at least one task")
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_array(cls, values) -> "AccuracyMatrix":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise RejectedInputError(f"expected a square matrix, got shape {values.shape}")
        m = cls(values.shape[0])
        for i in range(values.shape[0]):
            for j in range(i + 1):
                m.set(i + 1, j + 1, values[i, j])
        return m

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set(self, row_task: int, col_task: int, accuracy: float) -> None:
        if not 1 <= col_task <= row_task <= self.num_tasks:
            raise RejectedInputError(f"entry ({row_task}, {col_task}) outside lower triangle")
        if not 0.0 <= accuracy <= 1.0:
            raise RejectedInputError(f"accuracy {accuracy} outside [0, 1]")
        self.values[row_task - 1, col_task - 1] = accuracy

    def get(self, row_task: int, col_task: int) -> float:
        return float(self.values[row_task - 1, col_task - 1])

    def rows_filled(self) -> int:
        n = 0
        for i in range(self.num_tasks):
            if np.isnan(self.values[i, : i + 1]).any():
                break
            n += 1
        return n

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_task", "col_task", "accuracy"])
        for i in range(self.num_tasks):
            for j in range(i + 1):
                if not np.isnan(self.values[i, j]):
                    w.writerow([i + 1, j + 1, repr(float(self.values[i, j]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="\n")
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "AccuracyMatrix":
        with open(path, newline="", encoding="utf-8") as f:
            rows = [(int(r["row_task"]), int(r["col_task"]), float(r["accuracy"]))
                    for r in csv.DictReader(f)]
        if not rows:
            raise RejectedInputError(f"{path}: empty accuracy matrix")
        m = cls(max(r for r, _, _ in rows))
        for r, c, a in rows:
            m.set(r, c, a)
        return m


def avg_accuracy(accuracies) -> float:
    accs = [float(a) for a in accuracies]
    if not accs:
        raise RejectedInputError("average accuracy of an empty sequence")
    return sum(accs) / len(accs)


def forgetting(matrix: AccuracyMatrix, k: int) -> tuple[list[float], float]:
    """Per-task forgetting ``f_k^i`` for i < k and their mean ``F_k``.

    ``f_k^i = max_t (a[t, i] - a[k, i])`` over the rows t < k where task i had
    been learned. Negative values are kept.
    """
    if k < 2:
        raise RejectedInputError(f"forgetting needs k >= 2, got {k}")
    if k > matrix.num_tasks or matrix.rows_filled() < k:
        raise RejectedInputError(f"accuracy matrix rows 1..{k} are not filled")
    a = matrix.values
    per_task = [float(np.max(a[i:k - 1, i]) - a[k - 1, i]) for i in range(k - 1)]
    return per_task, sum(per_task) / len(per_task)


@dataclass
class TaskEval:
    accuracy: float             # over all test samples of learned classes
    per_task: list[float]       # restricted to each learned task's classes
    correct: list[int]
    total: list[int]


@torch.no_grad()
def task_accuracy(model, class_order, images: torch.Tensor, labels: torch.Tensor,
                  task_classes, batch_size: int = 256) -> TaskEval:
    """Top-1 accuracy of ``model`` over every learned class (task-agnostic).

    ``class_order[r]`` is the global class id of classifier row ``r``;
    ``task_classes`` lists the global class ids of each learned task.
    """
    learned = {c for cs in task_classes for c in cs}
    if not learned.issubset(set(class_order)) or model.num_classes < len(class_order):
        raise RejectedInputError(
            f"model covers {model.num_classes} classes; eval set needs {sorted(learned)}")
    row_to_class = torch.as_tensor(list(class_order), dtype=torch.int64)
    keep = torch.as_tensor([int(y) in learned for y in labels.tolist()], dtype=torch.bool)
    images, labels = images[keep], labels[keep]
    if len(labels) == 0:
        raise RejectedInputError("eval set has no samples of the learned classes")
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(labels), batch_size):
        logits = model.logits(images[start:start + batch_size])
        preds.append(row_to_class[logits[:, : len(class_order)].argmax(dim=-1)])
    model.train(was_training)
    hit = torch.cat(preds) == labels
    correct, total = [], []
    for cs in task_classes:
        mask = torch.isin(labels, torch.as_tensor(list(cs), dtype=labels.dtype))
        correct.append(int(hit[mask].sum()))
        total.append(int(mask.sum()))
    per_task = [c / t if t else float("nan") for c, t in zip(correct, total)]
    return TaskEval(int(hit.sum()) / len(hit), per_task, correct, total)


def summarize(matrix: AccuracyMatrix, overall: list[float]) -> dict[str, float | None]:
    """Avg/Last accuracy and final average forgetting for a complete run."""
    t = len(overall)
    return {
        "avg_acc": avg_accuracy(overall),
        "last_acc": float(overall[-1]),
        "avg_forgetting": forgetting(matrix, t)[1] if t >= 2 else None,
    }
