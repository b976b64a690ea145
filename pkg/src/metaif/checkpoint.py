"""MetaState checkpoints.

A checkpoint is a directory::

    manifest.json        config, model, task ids, convergence norms, seed
    lambda.bin           lam* (param_vector container)
    theta_<id>.bin       one param_vector container per task
    tasks.bin            every task's arrays (X, y, curvature) in one container

Everything needed by the influence estimators is restored, so a CLI run can
train once and attribute many times.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bilevel import BilevelConfig, MetaState, TaskData
from .model import MLP, Architecture, Examples, QuadraticModel
from .storage import ContainerError, read_container, write_container

FORMAT = "metaif-checkpoint/1"


def model_to_dict(model) -> dict:
    if isinstance(model, MLP):
        return {"type": "mlp", "arch": model.arch.to_dict(), "loss": model.loss_name}
    if isinstance(model, QuadraticModel):
        return {"type": "quadratic", "dim": model.dim}
    raise TypeError(f"cannot serialize model of type {type(model).__name__}")


def model_from_dict(d: dict):
    if d["type"] == "mlp":
        return MLP(Architecture.from_dict(d["arch"]), d.get("loss", "cross_entropy"))
    if d["type"] == "quadratic":
        return QuadraticModel(d["dim"])
    raise ContainerError(f"unknown model type {d['type']!r}")


def _write_vector(path: Path, values: np.ndarray, model_dict: dict) -> None:
    arch = model_dict.get("arch")
    write_container(path, {"kind": "param_vector", "arch": arch}, {"values": values})


def _read_vector(path: Path) -> np.ndarray:
    meta, arrays = read_container(path)
    if meta.get("kind") != "param_vector":
        raise ContainerError(f"{path}: expected a param_vector container")
    return arrays["values"]


def save_state(state: MetaState, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mdict = model_to_dict(state.model)
    _write_vector(d / "lambda.bin", state.lambda_star, mdict)
    for tid, theta in state.thetas.items():
        _write_vector(d / f"theta_{tid}.bin", theta, mdict)
    arrays, entries = {}, []
    for t in state.tasks:
        entry = {"task_id": int(t.task_id), "corrupted": bool(t.corrupted), "label_dtype": t.train.y.dtype.str}
        for split in ("train", "val"):
            ex = getattr(t, split)
            arrays[f"{t.task_id}/{split}/X"] = ex.X
            arrays[f"{t.task_id}/{split}/y"] = ex.y.astype(np.float64)
            if ex.curvature is not None:
                arrays[f"{t.task_id}/{split}/curvature"] = ex.curvature
        entries.append(entry)
    write_container(d / "tasks.bin", {"kind": "task_bundle", "tasks": entries}, arrays)
    manifest = {
        "format": FORMAT,
        "config": state.config.to_dict(),
        "model": mdict,
        "n_params": int(state.lambda_star.shape[0]),
        "task_ids": [int(t) for t in state.task_ids],
        "seed": int(state.seed),
        "converged": bool(state.converged),
        "outer_grad_norm": float(state.outer_grad_norm),
        "inner_grad_norms": {str(k): float(v) for k, v in state.inner_grad_norms.items()},
        "outer_iters": int(state.outer_iters),
        "runtime_seconds": float(state.runtime),
        "warm_start": bool(state.warm_start),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_state(directory) -> MetaState:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise ContainerError(f"{d}: no manifest.json, not a checkpoint") from None
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{d}: unsupported checkpoint format {manifest.get('format')!r}")
    model = model_from_dict(manifest["model"])
    meta, arrays = read_container(d / "tasks.bin")
    tasks = []
    for e in meta["tasks"]:
        tid = e["task_id"]
        splits = []
        for split in ("train", "val"):
            y = arrays[f"{tid}/{split}/y"].astype(np.dtype(e["label_dtype"]))
            splits.append(Examples(arrays[f"{tid}/{split}/X"], y, arrays.get(f"{tid}/{split}/curvature")))
        tasks.append(TaskData(tid, splits[0], splits[1], e["corrupted"]))
    lam = _read_vector(d / "lambda.bin")
    if lam.shape[0] != manifest["n_params"]:
        raise ContainerError(f"{d}: lambda has {lam.shape[0]} entries, manifest says {manifest['n_params']}")
    thetas = {tid: _read_vector(d / f"theta_{tid}.bin") for tid in manifest["task_ids"]}
    return MetaState(
        lambda_star=lam,
        thetas=thetas,
        config=BilevelConfig.from_dict(manifest["config"]),
        model=model,
        tasks=tasks,
        seed=manifest["seed"],
        converged=manifest["converged"],
        outer_grad_norm=manifest["outer_grad_norm"],
        inner_grad_norms={int(k): v for k, v in manifest["inner_grad_norms"].items()},
        outer_iters=manifest["outer_iters"],
        runtime=manifest["runtime_seconds"],
        warm_start=manifest["warm_start"],
    )
