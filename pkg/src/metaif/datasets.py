"""Few-shot task construction: synthetic Gaussian-cluster tasks, CSV corpora,
N-way K-shot episodes and label corruption."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bilevel import TaskData
from .errors import ConfigError, MetaIFError
from .model import Examples


class DataError(MetaIFError, ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    k_query: int = 15
    num_tasks: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "k_query", "num_tasks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"episodes.{name}", "must be a positive count")


@dataclass(frozen=True)
class CorruptionSpec:
    task_fraction: float = 0.0
    sample_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("task_fraction", "sample_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"corruption.{name}", f"must lie in [0, 1], got {v}")


def _class_means(clusters: int, dim: int, separation: float, world_seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(world_seed), 0])
    return separation * rng.normal(size=(clusters, dim))


def gen_synthetic_tasks(spec: EpisodeSpec, clusters: int, dim: int, noise=1.0,
                        separation: float = 1.0, task_shift: float = 0.0,
                        world_seed: int | None = None, first_task_id: int = 0) -> list[TaskData]:
    """Gaussian-cluster classification tasks.

    Cluster means depend only on ``world_seed`` (defaults to ``spec.seed``), so
    tasks drawn with different ``spec.seed`` but the same world share classes.
    Each task picks ``n_way`` clusters; label j is the j-th smallest chosen
    cluster index. ``noise`` is a scalar or a ``(low, high)`` range sampled per
    task; ``task_shift`` adds a per-task Gaussian offset to every mean.
    """
    if clusters < spec.n_way:
        raise DataError(f"{clusters} clusters cannot supply {spec.n_way}-way tasks")
    world_seed = spec.seed if world_seed is None else world_seed
    means = _class_means(clusters, dim, separation, world_seed)
    tasks = []
    for t in range(spec.num_tasks):
        rng = np.random.default_rng([int(world_seed), 1, int(spec.seed), t])
        chosen = np.sort(rng.choice(clusters, size=spec.n_way, replace=False))
        sigma = float(rng.uniform(*noise)) if np.ndim(noise) else float(noise)
        shift = task_shift * rng.normal(size=dim)
        n_per = spec.k_shot + spec.k_query
        X = np.empty((spec.n_way, n_per, dim))
        for j, c in enumerate(chosen):
            X[j] = means[c] + shift + sigma * rng.normal(size=(n_per, dim))
        labels = np.repeat(np.arange(spec.n_way), spec.k_shot)
        vlabels = np.repeat(np.arange(spec.n_way), spec.k_query)
        train = Examples(X[:, : spec.k_shot].reshape(-1, dim), labels)
        val = Examples(X[:, spec.k_shot :].reshape(-1, dim), vlabels)
        tasks.append(TaskData(first_task_id + t, train, val))
    return tasks


def load_csv_corpus(path, label_column: str = "label") -> dict[int, np.ndarray]:
    """Read a headered numeric CSV into ``{label: features}``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: missing label column {label_column!r}")
        li = header.index(label_column)
        rows: dict[int, list] = {}
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{line_no}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[li])
            except ValueError:
                raise DataError(f"{path}:{line_no}: label {row[li]!r} is not an integer") from None
            try:
                feats = [float(v) for i, v in enumerate(row) if i != li]
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric feature ({exc})") from None
            rows.setdefault(label, []).append(feats)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return {k: np.asarray(v, dtype=np.float64) for k, v in sorted(rows.items())}


def write_csv_corpus(pool: dict[int, np.ndarray], path, label_column: str = "label") -> None:
    dim = next(iter(pool.values())).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dim)] + [label_column])
        for label, X in sorted(pool.items()):
            for row in X:
                w.writerow([repr(float(v)) for v in row] + [label])


def make_episodes(pool: dict[int, np.ndarray], spec: EpisodeSpec) -> list[TaskData]:
    classes = sorted(pool)
    if len(classes) < spec.n_way:
        raise DataError(f"pool has {len(classes)} classes, need {spec.n_way}")
    need = spec.k_shot + spec.k_query
    for c in classes:
        if len(pool[c]) < need:
            raise DataError(f"class {c} has {len(pool[c])} examples, episodes need {need}")
    rng = np.random.default_rng(spec.seed)
    tasks = []
    for t in range(spec.num_tasks):
        chosen = rng.choice(classes, size=spec.n_way, replace=False)
        tr_x, tr_y, va_x, va_y = [], [], [], []
        for j, c in enumerate(chosen):
            idx = rng.choice(len(pool[c]), size=need, replace=False)
            tr_x.append(pool[c][idx[: spec.k_shot]])
            va_x.append(pool[c][idx[spec.k_shot :]])
            tr_y += [j] * spec.k_shot
            va_y += [j] * spec.k_query
        tasks.append(TaskData(t, Examples(np.vstack(tr_x), np.array(tr_y)),
                              Examples(np.vstack(va_x), np.array(va_y))))
    return tasks


def corrupt(tasks: list[TaskData], spec: CorruptionSpec) -> list[TaskData]:
    """Flip a fraction of TRAIN labels in a fraction of tasks.

    Each flipped label moves to a uniformly chosen different class. Validation
    labels are never touched.
    """
    rng = np.random.default_rng(spec.seed)
    n_bad = int(round(spec.task_fraction * len(tasks)))
    bad = set(rng.choice(len(tasks), size=n_bad, replace=False).tolist()) if n_bad else set()
    out = []
    for i, task in enumerate(tasks):
        if i not in bad:
            out.append(task)
            continue
        n_way = int(max(task.train.y.max(), task.val.y.max())) + 1
        if n_way < 2:
            raise DataError("label corruption needs at least two classes")
        y = task.train.y.copy()
        m = int(round(spec.sample_fraction * len(y)))
        flip = rng.choice(len(y), size=m, replace=False)
        for j in flip:
            y[j] = (y[j] + rng.integers(1, n_way)) % n_way
        train = Examples(task.train.X, y, task.train.curvature)
        out.append(TaskData(task.task_id, train, task.val, corrupted=True))
    return out


def save_tasks(tasks: list[TaskData], directory, meta: dict | None = None) -> None:
    """Write a task bundle: one CSV per split plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in tasks:
        for split in ("train", "val"):
            ex = getattr(t, split)
            with open(d / f"task_{t.task_id}_{split}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"x{i}" for i in range(ex.X.shape[1])] + ["label"])
                for row, lab in zip(ex.X, ex.y):
                    w.writerow([repr(float(v)) for v in row] + [int(lab)])
        entries.append({"task_id": int(t.task_id), "corrupted": bool(t.corrupted)})
    manifest = {"format": "metaif-tasks/1", "tasks": entries, **(meta or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_tasks(directory) -> tuple[list[TaskData], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    tasks = []
    for e in manifest["tasks"]:
        splits = []
        for split in ("train", "val"):
            with open(d / f"task_{e['task_id']}_{split}.csv", newline="") as fh:
                rows = list(csv.reader(fh))[1:]
            X = np.array([[float(v) for v in r[:-1]] for r in rows])
            y = np.array([int(r[-1]) for r in rows])
            splits.append(Examples(X, y))
        tasks.append(TaskData(e["task_id"], splits[0], splits[1], bool(e["corrupted"])))
    return tasks, manifest


def spec_to_dict(spec) -> dict:
    return asdict(spec)
