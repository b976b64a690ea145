"""Ground truth by retraining after a removal."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bilevel import BilevelConfig, MetaState, TaskData, train_meta

REMOVAL_KINDS = ("task", "train_instance", "val_instance")


@dataclass(frozen=True)
class RemovalSpec:
    kind: str
    task_id: int
    example_index: int | None = None

    def __post_init__(self):
        if self.kind not in REMOVAL_KINDS:
            raise ValueError(f"unknown removal kind {self.kind!r}; choose from {REMOVAL_KINDS}")
        if (self.kind == "task") != (self.example_index is None):
            raise ValueError(f"removal kind {self.kind!r} inconsistent with example_index={self.example_index}")

    def label(self) -> str:
        if self.kind == "task":
            return f"task:{self.task_id}"
        return f"{self.kind}:{self.task_id}:{self.example_index}"


def apply_removal(tasks: list, removal: RemovalSpec) -> list:
    """The task list with the removal applied; input tasks are not modified."""
    ids = [t.task_id for t in tasks]
    if removal.task_id not in ids:
        raise KeyError(f"unknown task id {removal.task_id!r}")
    out = []
    for t in tasks:
        if t.task_id != removal.task_id:
            out.append(t)
        elif removal.kind == "train_instance":
            _check_index(t.train, removal)
            out.append(TaskData(t.task_id, t.train.without(removal.example_index), t.val, t.corrupted))
        elif removal.kind == "val_instance":
            _check_index(t.val, removal)
            out.append(TaskData(t.task_id, t.train, t.val.without(removal.example_index), t.corrupted))
    if not out:
        raise ValueError("removal leaves no tasks")
    return out


def _check_index(ex, removal: RemovalSpec) -> None:
    if not 0 <= removal.example_index < len(ex):
        raise IndexError(f"example index {removal.example_index} out of range for task {removal.task_id}")
    if len(ex) == 1:
        raise ValueError(f"removing example {removal.example_index} empties a split of task {removal.task_id}")


def retrain_without(tasks: list, removal: RemovalSpec, cfg: BilevelConfig, arch, seed: int = 0,
                    warm_start=None) -> MetaState:
    """Full bilevel retraining on the reduced data.

    Cold start from the seeded initialization by default; ``warm_start``
    (e.g. the original lam*) is recorded on the returned state. ``runtime`` on
    the state covers the training call only.
    """
    reduced = apply_removal(tasks, removal)
    start = time.perf_counter()
    state = train_meta(reduced, cfg, arch, seed=seed, init=warm_start)
    state.runtime = time.perf_counter() - start
    return state


def retrain_inner_without(state: MetaState, task_id, example_index: int) -> np.ndarray:
    """Re-solve only task k's inner problem at lam* without one training example."""
    task = state.task(task_id)
    reduced = apply_removal([task], RemovalSpec("train_instance", task_id, example_index))[0]
    problem = state.problem()
    lam = np.asarray(state.lambda_star, dtype=np.float64)
    return problem.solve_inner(lam, reduced, theta0=state.thetas[task_id])

