"""Run orchestration behind the CLI: full runs, evaluation, weight dumps, ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import ModelConfig
from .checkpoint import MANIFEST, load_checkpoint, save_checkpoint, write_json_atomic
from .config import Config
from .data import Dataset, TaskSpec, build_split, load_dataset
from .errors import ConfigError, RejectedInputError
from .metrics import AccuracyMatrix, forgetting, summarize, task_accuracy
from .pks import WeightMode, compute_patch_weights
from .trainer import TrainSettings, init_state, train_task

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["task", "epoch", "loss_total", "loss_cil", "loss_pks", "loss_pr", "eval_acc"]
STEP_COLUMNS = ["task", "epoch", "step", "loss_total", "loss_cil", "loss_pks", "loss_pr"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def dataset_for(cfg: Config) -> Dataset:
    kw = {}
    if cfg["data.name"] == "synthetic":
        kw = dict(num_classes=cfg["data.num_classes"], train_per_class=cfg["data.train_per_class"],
                  test_per_class=cfg["data.test_per_class"], image_size=cfg["model.image_size"],
                  channels=cfg["model.in_channels"], seed=cfg["data.synthetic_seed"])
    ds = load_dataset(cfg["data.name"], **kw)
    want = (cfg["model.image_size"], cfg["model.image_size"], cfg["model.in_channels"])
    if ds.image_shape != want:
        raise ConfigError(f"model.image_size: dataset images are {ds.image_shape}, model expects {want}")
    return ds


def model_config_for(cfg: Config, first_task_classes: int) -> ModelConfig:
    return ModelConfig(image_size=cfg["model.image_size"], patch_size=cfg["model.patch_size"],
                       in_channels=cfg["model.in_channels"], embed_dim=cfg["model.embed_dim"],
                       num_heads=cfg["model.num_heads"],
                       num_encoder_blocks=cfg["model.num_encoder_blocks"],
                       num_decoder_blocks=cfg["model.num_decoder_blocks"],
                       num_classes_initial=first_task_classes, mlp_ratio=cfg["model.mlp_ratio"])


def split_for(cfg: Config, ds: Dataset) -> TaskSpec:
    return build_split(ds.y_train.numpy(), cfg["data.base_classes"], cfg["data.classes_per_task"],
                       cfg["data.incremental_tasks"], cfg.class_order_seed)


def train_run(cfg: Config, run_dir: str | Path | None = None) -> Path:
    """Train every task of the configured split; returns the run directory.

    Layout: ``manifest.json``, ``checkpoints/task_<t>/``, ``metrics.csv``
    (and ``steps.csv`` when ``trainer.log_steps`` is set).
    """
    if cfg["trainer.epochs"] < 1 or cfg["trainer.batch_size"] < 2:
        raise ConfigError("trainer.epochs must be >= 1 and trainer.batch_size >= 2")
    run_dir = Path(run_dir or cfg["run.dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = dataset_for(cfg)
    spec = split_for(cfg, ds)
    settings = TrainSettings.from_config(cfg)
    dtype = getattr(torch, cfg["trainer.dtype"])
    state = init_state(model_config_for(cfg, len(spec.tasks[0])), cfg["run.seed"], dtype)

    manifest = {
        "version": __version__,
        "seed": cfg["run.seed"],
        "config": dict(sorted(cfg.items())),
        "config_hash": cfg.digest(),
        "dataset": {"name": ds.name, "fingerprint": ds.fingerprint()},
        "task_spec": spec.to_dict(),
        "checkpoints": {},
        "metrics": {"epochs": "metrics.csv"},
        "tasks_completed": 0,
        "status": "running",
    }
    if cfg["trainer.log_steps"]:
        manifest["metrics"]["steps"] = "steps.csv"
    write_json_atomic(run_dir / MANIFEST, manifest)

    epoch_rows, step_rows = [], []
    x_test, y_test = ds.x_test.to(dtype), ds.y_test
    for t, classes in enumerate(spec.tasks, start=1):
        x, y, _ = ds.subset(classes, "train")
        seen = spec.tasks[:t]

        def evaluate(st, seen=seen):
            return task_accuracy(st.model, st.class_order, x_test, y_test, seen).accuracy

        def on_step(epoch, step, parts, t=t):
            step_rows.append([t, epoch, step, parts["total"], parts["cil"], parts["pks"], parts["pr"]])

        records = train_task(state, x, y, classes, settings,
                             evaluate=evaluate if cfg["trainer.eval_each_epoch"] else None,
                             on_step=on_step if cfg["trainer.log_steps"] else None)
        epoch_rows += [[r.task, r.epoch, r.loss_total, r.loss_cil, r.loss_pks, r.loss_pr, r.eval_acc]
                       for r in records]
        ckpt = Path("checkpoints") / f"task_{t}"
        save_checkpoint(run_dir / ckpt, state.model, state.store, t, state.class_order,
                        cfg["run.seed"], extra={"task_classes": [list(cs) for cs in seen]})
        _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, epoch_rows)
        if cfg["trainer.log_steps"]:
            _write_csv(run_dir / "steps.csv", STEP_COLUMNS, step_rows)
        manifest["checkpoints"][str(t)] = ckpt.as_posix()
        manifest["tasks_completed"] = t
        write_json_atomic(run_dir / MANIFEST, manifest)
        log.info("task %d/%d done: %s", t, spec.num_tasks, records[-1])
    manifest["status"] = "complete"
    write_json_atomic(run_dir / MANIFEST, manifest)
    return run_dir


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        raise RejectedInputError(f"{run_dir}: no run manifest")
    return json.loads(path.read_text(encoding="utf-8"))


def _checkpoint_dir(run_dir: Path, manifest: dict, task: int) -> Path:
    rel = manifest["checkpoints"].get(str(task))
    if rel is None or not (run_dir / rel / MANIFEST).is_file():
        raise RejectedInputError(f"missing checkpoint for task {task}")
    return run_dir / rel


def evaluate_run(run_dir: str | Path) -> dict:
    """Fill the accuracy matrix from every task checkpoint and write the report.

    Writes ``accuracy_matrix.csv`` and ``report.csv``; returns the summary.
    """
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    cfg = Config(manifest["config"])
    spec = TaskSpec.from_dict(manifest["task_spec"])
    ds = dataset_for(cfg)
    if ds.fingerprint() != manifest["dataset"]["fingerprint"]:
        raise RejectedInputError(f"{run_dir}: dataset fingerprint differs from the run's")
    matrix = AccuracyMatrix(spec.num_tasks)
    overall = []
    for m in range(1, spec.num_tasks + 1):
        ckpt = load_checkpoint(_checkpoint_dir(run_dir, manifest, m))
        x = ds.x_test.to(next(ckpt.model.parameters()).dtype)
        ev = task_accuracy(ckpt.model, ckpt.class_order, x, ds.y_test, spec.tasks[:m])
        for n, acc in enumerate(ev.per_task, start=1):
            matrix.set(m, n, acc)
        overall.append(ev.accuracy)
    matrix.to_csv(run_dir / "accuracy_matrix.csv")
    summary = summarize(matrix, overall)
    rows = [["avg_acc", summary["avg_acc"]], ["last_acc", summary["last_acc"]],
            ["avg_forgetting", summary["avg_forgetting"]]]
    rows += [[f"acc_task_{m}", a] for m, a in enumerate(overall, start=1)]
    rows += [[f"forgetting_task_{k}", forgetting(matrix, k)[1]] for k in range(2, spec.num_tasks + 1)]
    _write_csv(run_dir / "report.csv", ["metric", "value"], rows)
    return {**summary, "acc_per_task": overall, "matrix": matrix}


def format_report(report: dict) -> str:
    matrix: AccuracyMatrix = report["matrix"]
    lines = ["accuracy matrix (row: after task m, col: task n)"]
    for m in range(1, matrix.num_tasks + 1):
        cells = " ".join(f"{matrix.get(m, n) * 100:6.2f}" for n in range(1, m + 1))
        lines.append(f"  task {m:2d}: {cells}")
    f = report["avg_forgetting"]
    lines.append(f"Avg acc  {report['avg_acc'] * 100:6.2f}")
    lines.append(f"Last acc {report['last_acc'] * 100:6.2f}")
    lines.append(f"F_T      {'   n/a' if f is None else f'{f * 100:6.2f}'}")
    return "\n".join(lines)


def dump_patch_weights(run_dir: str | Path, task: int, image_id: int, mode: str | None = None,
                       out: str | Path | None = None) -> tuple[Path, np.ndarray]:
    """Normalized patch weights of one test image as a (grid x grid) CSV.

    Rows are written in patchify order (row-major): ``row,col,patch,weight``.
    """
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    cfg = Config(manifest["config"])
    ckpt = load_checkpoint(_checkpoint_dir(run_dir, manifest, task))
    ds = dataset_for(cfg)
    if not 0 <= image_id < len(ds.y_test):
        raise RejectedInputError(f"unknown image id {image_id} (test set has {len(ds.y_test)})")
    image = ds.x_test[image_id].to(next(ckpt.model.parameters()).dtype)
    with torch.no_grad():
        tokens = ckpt.model(image)
    pw = compute_patch_weights(tokens, WeightMode(mode or cfg["pks.mode"]), cfg["pks.epsilon"])
    g = ckpt.model.config.grid_size
    grid = pw.normalized.double().numpy().reshape(g, g)
    path = Path(out) if out else run_dir / f"patch_weights_task{task}_image{image_id}.csv"
    _write_csv(path, ["row", "col", "patch", "weight"],
               ([i // g, i % g, i, float(w)] for i, w in enumerate(grid.ravel())))
    return path, grid


ABLATION_AXES: dict[str, list[tuple[str, dict]]] = {
    "pks_on_off": [("baseline", {"pks.enabled": False}), ("pks", {"pks.enabled": True})],
    "pr_on_off": [("baseline", {"pr.enabled": False}), ("pr", {"pr.enabled": True})],
    "weight_mode": [(m.value, {"pks.enabled": True, "pks.mode": m.value})
                    for m in (WeightMode.UNIFORM, WeightMode.DISTANCE, WeightMode.INVERSE_DISTANCE)],
    "components": [
        ("baseline", {"pks.enabled": False, "pr.enabled": False}),
        ("pks", {"pks.enabled": True, "pr.enabled": False}),
        ("pr", {"pks.enabled": False, "pr.enabled": True}),
        ("pks+pr", {"pks.enabled": True, "pr.enabled": True}),
    ],
}

ABLATION_COLUMNS = ["variant", "pks", "pr", "pks_mode", "seeds", "avg_acc_mean", "last_acc_mean",
                    "last_acc_std", "forgetting_mean"]


def ablate(cfg: Config, axis: str, seeds=None, out_dir: str | Path | None = None) -> list[dict]:
    """Train and evaluate every variant on ``axis`` for each seed.

    Writes ``ablation_<axis>.csv`` under ``out_dir`` (default ``run.dir``)
    with one row per variant, in a fixed order.
    """
    if axis not in ABLATION_AXES:
        raise RejectedInputError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    seeds = list(seeds) if seeds else [cfg["run.seed"]]
    root = Path(out_dir or cfg["run.dir"])
    rows = []
    for name, overrides in ABLATION_AXES[axis]:
        results = []
        for seed in seeds:
            run_cfg = cfg.with_overrides({**overrides, "run.seed": seed})
            run_dir = root / f"ablate_{axis}" / name / f"seed_{seed}"
            run_cfg["run.dir"] = run_dir.as_posix()
            train_run(run_cfg, run_dir)
            results.append(evaluate_run(run_dir))
        last = np.array([r["last_acc"] for r in results])
        forg = [r["avg_forgetting"] for r in results if r["avg_forgetting"] is not None]
        rows.append({
            "variant": name,
            "pks": run_cfg["pks.enabled"],
            "pr": run_cfg["pr.enabled"],
            "pks_mode": run_cfg["pks.mode"],
            "seeds": " ".join(str(s) for s in seeds),
            "avg_acc_mean": float(np.mean([r["avg_acc"] for r in results])),
            "last_acc_mean": float(last.mean()),
            "last_acc_std": float(last.std()),
            "forgetting_mean": float(np.mean(forg)) if forg else None,
        })
    root.mkdir(parents=True, exist_ok=True)
    _write_csv(root / f"ablation_{axis}.csv", ABLATION_COLUMNS,
               ([r[c] for c in ABLATION_COLUMNS] for r in rows))
    return rows


def format_ablation(rows: list[dict]) -> str:
    lines = [f"{'variant':<18}{'PKS':>5}{'PR':>5}  {'Avg':>7}{'Last':>8}{'+-':>7}{'F':>8}"]
    for r in rows:
        f = r["forgetting_mean"]
        lines.append(
            f"{r['variant']:<18}{'x' if r['pks'] else '':>5}{'x' if r['pr'] else '':>5}  "
            f"{r['avg_acc_mean'] * 100:7.2f}{r['last_acc_mean'] * 100:8.2f}"
            f"{r['last_acc_std'] * 100:7.2f}{'' if f is None else f'{f * 100:8.2f}'}")
    return "\n".join(lines)

