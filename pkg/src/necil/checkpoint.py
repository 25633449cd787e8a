"""Checkpoint container: ``manifest.json`` plus named tensors in safetensors.

Tensor names are prefixed ``model.`` (backbone and classifier parameters) or
``prototypes.`` (class centers); nothing else is stored.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from .backbone import ModelConfig, VisionTransformer
from .errors import RejectedInputError
from .prototypes import PrototypeStore

MANIFEST = "manifest.json"
TENSORS = "tensors.safetensors"


@dataclass
class Checkpoint:
    model: VisionTransformer
    store: PrototypeStore
    manifest: dict

    @property
    def class_order(self) -> list[int]:
        return self.manifest["class_order"]


def write_json_atomic(path: Path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def save_checkpoint(directory: str | Path, model: VisionTransformer, store: PrototypeStore,
                    task_index: int, class_order: list[int], seed: int, extra: dict | None = None
                    ) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().contiguous() for k, v in model.state_dict().items()}
    tensors.update({f"prototypes.{k}": v.contiguous() for k, v in store.state_tensors().items()})
    manifest = {
        "config": model.config.to_dict(),
        "task_index": task_index,
        "num_classes": model.num_classes,
        "class_order": list(class_order),
        "seed": seed,
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        **(extra or {}),
    }
    save_file(tensors, str(directory / TENSORS))
    write_json_atomic(directory / MANIFEST, manifest)
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    if not (directory / MANIFEST).is_file() or not (directory / TENSORS).is_file():
        raise RejectedInputError(f"{directory}: not a checkpoint")
    manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    tensors = load_file(str(directory / TENSORS))
    config = ModelConfig(**manifest["config"])
    model = VisionTransformer(config).to(getattr(torch, manifest["dtype"]))
    grow = manifest["num_classes"] - model.num_classes
    if grow > 0:
        model.grow_classifier(grow)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    store = PrototypeStore.from_state_tensors(
        {k[len("prototypes."):]: v for k, v in tensors.items() if k.startswith("prototypes.")},
        config.embed_dim)
    return Checkpoint(model, store, manifest)


def read_tensors(directory: str | Path) -> dict[str, torch.Tensor]:
    return load_file(str(Path(directory) / TENSORS))
