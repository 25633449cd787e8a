import numpy as np
import pytest
import torch

import necil.trainer as trainer_mod
from necil.backbone import ModelConfig
from necil.config import Config
from necil.pks import compute_patch_weights
from necil.trainer import Objective, TrainSettings, begin_task, init_state, total_loss

from oracles import central_difference_grad, relative_error

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def tiny_config():
    """d=8, 2 encoder blocks, 1 decoder block, 4 patches."""
    return ModelConfig(image_size=4, patch_size=2, in_channels=3, embed_dim=8, num_heads=2,
                       num_encoder_blocks=2, num_decoder_blocks=1, num_classes_initial=2)


def randomize_(module: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    """Overwrite every parameter with N(0, std) (LayerNorm gains around 1)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std
            p.copy_(noise + 1.0 if name.endswith("weight") and p.dim() == 1 else noise)


TINY = ModelConfig(image_size=4, patch_size=2, in_channels=3, embed_dim=8, num_heads=2,
                   num_encoder_blocks=1, num_decoder_blocks=1, num_classes_initial=2)


def make_batch(seed: int, n: int, classes, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 4, 4, 3, generator=gen, dtype=dtype)
    y = torch.tensor([classes[i % len(classes)] for i in range(n)])
    return x, y


def state_at_task2(seed: int = 0):
    """Model after a finalized first task on classes {0, 1}, second task {2, 3} begun."""
    state = init_state(TINY, seed, torch.float64)
    randomize_(state.model, seed=seed + 10, std=0.3)
    settings = TrainSettings(epochs=1, batch_size=8, augment=False)
    begin_task(state, [0, 1], settings, steps_per_epoch=1)
    x, y = make_batch(seed + 1, 8, [0, 1])
    with torch.no_grad():
        state.store.update_from_batch(state.model(x).cls_token, y)
    state.store.finalize_task(1)
    randomize_(state.model, seed=seed + 20, std=0.3)  # the snapshot is taken from this model
    begin_task(state, [2, 3], settings, steps_per_epoch=1)
    randomize_(state.model, seed=seed + 30, std=0.3)  # drift away from the snapshot
    x, y = make_batch(seed + 2, 6, [2, 3])
    with torch.no_grad():
        state.store.update_from_batch(state.model(x).cls_token, y)
    return state, (x, y)


def fd_relative_errors(objective: Objective, monkeypatch, seed: int = 3) -> dict[str, float]:
    """Autograd vs central differences of ``total_loss`` for every parameter of the current model.

    Patch weights are frozen at the unperturbed model and the pairing rng is
    re-seeded on every call, so the loss is a fixed smooth function.
    """
    state, batch = state_at_task2(seed=seed)
    frozen = compute_patch_weights(state.model(batch[0]), objective.pks_mode)
    monkeypatch.setattr(trainer_mod, "compute_patch_weights", lambda *a, **k: frozen)

    def loss():
        return total_loss(batch, state, objective, rng=np.random.default_rng(11))[0]

    state.model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            errors[name] = relative_error(p.grad, central_difference_grad(loss, p))
    return errors


def small_run_config(run_dir, **overrides) -> Config:
    """Fast synthetic config: 10 classes split 4 + 3x2, few epochs."""
    cfg = Config({
        "run.dir": str(run_dir),
        "data.train_per_class": 24,
        "data.test_per_class": 8,
        "model.image_size": 8,
        "model.patch_size": 4,
        "model.embed_dim": 16,
        "model.num_heads": 2,
        "model.num_encoder_blocks": 1,
        "trainer.epochs": 2,
        "trainer.batch_size": 16,
    })
    cfg.update(overrides)
    return cfg


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    class Recorder:
        def check(self, criterion: str, passed: bool, detail: str = "") -> None:
            _ACCEPTANCE.append((criterion, bool(passed), detail))
            assert passed, f"{criterion}: {detail}"

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
