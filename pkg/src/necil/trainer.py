"""Per-task training: snapshot, classifier growth, composite objective, prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .backbone import ModelConfig, VisionTransformer, build_model, snapshot_model
from .config import Config
from .data import augment, iterate_batches
from .errors import NumericalFailureError, ProtocolViolationError, RejectedInputError
from .pks import WeightMode, compute_patch_weights, pks_loss
from .prototypes import PrototypeStore
from .restoration import cil_loss, pr_loss, restore_prototypes


@dataclass(frozen=True)
class LossWeights:
    lambda_pks: float = 10.0
    lambda_pr: float = 10.0

    def __post_init__(self):
        if self.lambda_pks < 0 or self.lambda_pr < 0:
            raise RejectedInputError("loss weights must be >= 0")


@dataclass(frozen=True)
class Objective:
    weights: LossWeights = LossWeights()
    pks_enabled: bool = True
    pks_mode: WeightMode = WeightMode.INVERSE_DISTANCE
    pks_epsilon: float = 1e-8
    pr_enabled: bool = True
    restore_count_per_sample: int = 1

    @classmethod
    def from_config(cls, cfg: Config) -> "Objective":
        return cls(LossWeights(cfg["loss.lambda_pks"], cfg["loss.lambda_pr"]),
                   cfg["pks.enabled"], WeightMode(cfg["pks.mode"]), cfg["pks.epsilon"],
                   cfg["pr.enabled"], cfg["pr.restore_count_per_sample"])


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "cosine"
    augment: bool = True
    crop_padding: int = 2
    objective: Objective = Objective()

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainSettings":
        return cls(cfg["trainer.epochs"], cfg["trainer.batch_size"], cfg["trainer.optimizer"],
                   cfg["trainer.lr"], cfg["trainer.weight_decay"], cfg["trainer.schedule"],
                   cfg["data.augment"], cfg["data.crop_padding"], Objective.from_config(cfg))


@dataclass
class TrainState:
    model: VisionTransformer
    store: PrototypeStore
    rng: np.random.Generator           # batch splits, pairings, donors, old-class draws
    generator: torch.Generator         # shuffling and augmentation
    task_index: int = 0                # 1-based once a task has begun
    snapshot: VisionTransformer | None = None
    class_order: list[int] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    scheduler: object = None
    epoch: int = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def rows(self, labels: torch.Tensor) -> torch.Tensor:
        """Global class ids -> classifier row indices (-1 if unseen)."""
        lut = {c: r for r, c in enumerate(self.class_order)}
        return torch.tensor([lut.get(int(c), -1) for c in labels.tolist()], dtype=torch.int64)


def init_state(model_config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> TrainState:
    model = build_model(model_config, seed=seed, dtype=dtype)
    return TrainState(model=model, store=PrototypeStore(model_config.embed_dim),
                      rng=np.random.default_rng(seed),
                      generator=torch.Generator().manual_seed(seed))


def snapshot_old_model(state: TrainState) -> VisionTransformer:
    return snapshot_model(state.model)


def _make_optimizer(params, settings: TrainSettings) -> torch.optim.Optimizer:
    if settings.optimizer == "adam":
        return torch.optim.Adam(params, lr=settings.lr, weight_decay=settings.weight_decay)
    if settings.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    return torch.optim.SGD(params, lr=settings.lr, momentum=0.9, weight_decay=settings.weight_decay)


def begin_task(state: TrainState, task_classes, settings: TrainSettings, steps_per_epoch: int) -> None:
    """Snapshot the previous model, grow the classifier, register prototypes."""
    task_classes = [int(c) for c in task_classes]
    overlap = sorted(set(task_classes) & set(state.class_order))
    if overlap:
        raise ProtocolViolationError(f"classes {overlap} were learned in an earlier task")
    if len(set(task_classes)) != len(task_classes) or not task_classes:
        raise RejectedInputError(f"task classes must be non-empty and unique: {task_classes}")
    state.task_index += 1
    if state.task_index == 1:
        state.snapshot = None
        missing = len(task_classes) - state.model.num_classes
        if missing > 0:
            state.model.grow_classifier(missing)
        elif missing < 0:
            raise RejectedInputError(
                f"model has {state.model.num_classes} classifier rows, first task has {len(task_classes)}")
    else:
        state.snapshot = snapshot_old_model(state)
        state.model.grow_classifier(len(task_classes))
    state.class_order.extend(task_classes)
    state.store.begin_task(state.task_index, task_classes)
    state.optimizer = _make_optimizer(state.model.parameters(), settings)
    total_steps = max(1, settings.epochs * steps_per_epoch)
    state.scheduler = (torch.optim.lr_scheduler.CosineAnnealingLR(state.optimizer, T_max=total_steps)
                       if settings.schedule == "cosine" else None)
    state.epoch = 0


def total_loss(batch: tuple[torch.Tensor, torch.Tensor], state: TrainState, objective: Objective,
               rng: np.random.Generator | None = None, update_prototypes: bool = False
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """``L_cil + lambda_pks * L_pks + lambda_pr * L_pr`` and its per-term breakdown.

    With ``update_prototypes`` the batch's [CLS] embeddings are folded into the
    running class centers before the centers are read.
    """
    images, labels = batch
    rng = state.rng if rng is None else rng
    model, store = state.model, state.store
    cur = model(images)
    if update_prototypes:
        store.update_from_batch(cur.cls_token.detach(), labels)
    zero = cur.cls_token.new_zeros(())
    old = None
    use_pks = objective.pks_enabled and state.snapshot is not None
    use_pr = objective.pr_enabled and state.snapshot is not None
    if use_pks or use_pr:
        with torch.no_grad():
            old = state.snapshot(images)

    l_pks = zero
    if use_pks:
        weights = compute_patch_weights(cur, objective.pks_mode, objective.pks_epsilon)
        l_pks = pks_loss(cur, old, weights)

    l_pr, restored = zero, None
    if use_pr:
        centers = store.centers(labels, dtype=cur.cls_token.dtype)
        l_pr = pr_loss(cur.cls_token, old.cls_token, centers, rng)
        count = objective.restore_count_per_sample * len(labels)
        restored = restore_prototypes(cur.cls_token, centers, store, count, rng)

    if restored is not None and len(restored):
        l_cil = cil_loss(cur.cls_token, state.rows(labels), model.head,
                         restored.embeddings, state.rows(restored.labels))
    else:
        l_cil = cil_loss(cur.cls_token, state.rows(labels), model.head)

    w = objective.weights
    terms = {"cil": l_cil, "pks": l_pks, "pr": l_pr}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericalFailureError(f"loss_{name}")
    pks_part, pr_part = w.lambda_pks * l_pks, w.lambda_pr * l_pr
    total = l_cil + pks_part + pr_part
    breakdown = {
        "total": total.item(), "cil": l_cil.item(), "pks": l_pks.item(), "pr": l_pr.item(),
        "pks_weighted": pks_part.item(), "pr_weighted": pr_part.item(),
        "restored": 0 if restored is None else len(restored),
    }
    return total, breakdown


@dataclass
class EpochRecord:
    task: int
    epoch: int
    loss_total: float
    loss_cil: float
    loss_pks: float
    loss_pr: float
    eval_acc: float | None = None


def train_task(state: TrainState, images: torch.Tensor, labels: torch.Tensor, task_classes,
               settings: TrainSettings,
               evaluate: Callable[[TrainState], float] | None = None,
               on_step: Callable[[int, int, dict], None] | None = None) -> list[EpochRecord]:
    """Train one task to completion and finalize its class prototypes.

    Prototype centers are running means that restart every epoch, so the
    frozen center is the mean embedding over the final epoch.
    """
    task_set = {int(c) for c in task_classes}
    if not set(labels.unique().tolist()) <= task_set:
        raise ProtocolViolationError("task data contains labels outside the task's classes")
    images = images.to(state.dtype)
    steps_per_epoch = sum(1 for _ in range(0, len(labels), settings.batch_size))
    begin_task(state, task_classes, settings, steps_per_epoch)
    model = state.model
    model.train()
    records = []
    for epoch in range(1, settings.epochs + 1):
        state.epoch = epoch
        state.store.restart_running()
        sums = {"total": 0.0, "cil": 0.0, "pks": 0.0, "pr": 0.0}
        n_steps = 0
        for step, idx in enumerate(iterate_batches(len(labels), settings.batch_size, state.generator)):
            x, y = images[idx], labels[idx]
            if settings.augment:
                x = augment(x, state.generator, settings.crop_padding)
            state.optimizer.zero_grad(set_to_none=True)
            loss, parts = total_loss((x, y), state, settings.objective, update_prototypes=True)
            loss.backward()
            state.optimizer.step()
            if state.scheduler is not None:
                state.scheduler.step()
            for k in sums:
                sums[k] += parts[k]
            n_steps += 1
            if on_step is not None:
                on_step(epoch, step, parts)
        if n_steps == 0:
            raise RejectedInputError("task has fewer than two training samples")
        acc = evaluate(state) if evaluate is not None else None
        records.append(EpochRecord(state.task_index, epoch, *(sums[k] / n_steps for k in
                                                              ("total", "cil", "pks", "pr")), acc))
    state.store.finalize_task(state.task_index)
    model.eval()
    return records

