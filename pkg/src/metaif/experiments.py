"""Experiment configuration and the batch protocols behind the CLI.

A run is described by one JSON config (see :class:`ExperimentConfig`). Every
protocol is a pure function of the config and the seed list; results come back
as lists of row dicts whose keys match the CSV schemas in :mod:`metaif.schemas`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bilevel import BilevelConfig, MetaState, TaskData, evaluate_accuracy, train_meta
from .datasets import (
    CorruptionSpec,
    EpisodeSpec,
    corrupt,
    gen_synthetic_tasks,
    load_csv_corpus,
    make_episodes,
)
from .errors import ConfigError, MetaIFError
from .ihvp import NeumannConfig
from .influence import BACKENDS, HESSIAN_MODES, InfluenceEngine, TotalHessianSpec, influence_score, new_task_gradient
from .model import ACTIVATIONS, LOSSES, MLP, Architecture
from .oracle import RemovalSpec, apply_removal, retrain_without

log = logging.getLogger(__name__)

# seed offsets that keep held-out and probe episodes disjoint from training episodes
HELDOUT_OFFSET = 10_000
PROBE_OFFSET = 20_000
METHODS = ("retrain", "task_if", "direct_if", "instance_train", "instance_val")
METHOD_FOR_REMOVAL = {
    "task": ("task_if", "direct_if"),
    "train_instance": ("instance_train",),
    "val_instance": ("instance_val",),
}


@dataclass
class ModelConfig:
    layer_sizes: list = field(default_factory=lambda: [20, 12, 5])
    activations: list = field(default_factory=lambda: ["tanh"])
    loss: str = "cross_entropy"

    def build(self) -> MLP:
        return MLP(Architecture(tuple(self.layer_sizes), tuple(self.activations)), self.loss)


@dataclass
class DataConfig:
    """``synthetic``: Gaussian clusters; ``csv``: episodes drawn from a labeled CSV."""

    source: str = "synthetic"
    clusters: int = 5
    dim: int = 20
    noise: list = field(default_factory=lambda: [0.15, 0.45])
    separation: float = 0.15
    task_shift: float = 0.5
    path: str | None = None
    label_column: str = "label"


@dataclass
class InfluenceConfig:
    backend: str = "exact"
    hessian_mode: str = "full"
    cross_term: bool = True
    third_order: bool = True
    numerical_damping: float = 0.0
    task_fraction: float = 1.0
    ekfac_damping: float | None = None
    neumann: dict = field(default_factory=dict)

    def engine(self, state: MetaState, seed: int = 0) -> InfluenceEngine:
        spec = TotalHessianSpec(self.hessian_mode, self.cross_term, self.third_order)
        return InfluenceEngine(state, spec, self.backend, NeumannConfig(**self.neumann),
                               self.numerical_damping, self.task_fraction, seed, self.ekfac_damping)


def _desk_bilevel() -> BilevelConfig:
    return BilevelConfig(delta=50.0)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bilevel: BilevelConfig = field(default_factory=_desk_bilevel)
    episodes: dict = field(default_factory=lambda: {"n_way": 5, "k_shot": 5, "k_query": 15, "num_tasks": 20})
    data: DataConfig = field(default_factory=DataConfig)
    corruption: dict = field(default_factory=lambda: {"task_fraction": 0.0, "sample_fraction": 0.0})
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    heldout_episodes: int = 50
    probe_tasks: int = 10
    oracle_start: str = "warm"

    # ----- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        _reject_unknown(d, cls, "")
        cfg = cls()
        if "model" in d:
            cfg.model = _section(ModelConfig, d["model"], "model")
        if "bilevel" in d:
            merged = {**_desk_bilevel().to_dict(), **_require_dict(d["bilevel"], "bilevel")}
            try:
                cfg.bilevel = BilevelConfig.from_dict(merged)
            except TypeError as exc:
                raise ConfigError("bilevel", str(exc)) from None
        if "episodes" in d:
            cfg.episodes = {**cfg.episodes, **_require_dict(d["episodes"], "episodes")}
        if "data" in d:
            cfg.data = _section(DataConfig, d["data"], "data")
        if "corruption" in d:
            cfg.corruption = {**cfg.corruption, **_require_dict(d["corruption"], "corruption")}
        if "influence" in d:
            cfg.influence = _section(InfluenceConfig, d["influence"], "influence")
        for name in ("seed", "seeds", "heldout_episodes", "probe_tasks", "oracle_start"):
            if name in d:
                setattr(cfg, name, d[name])
        return cfg.validate()

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "bilevel": self.bilevel.to_dict(),
            "episodes": dict(self.episodes),
            "data": asdict(self.data),
            "corruption": dict(self.corruption),
            "influence": asdict(self.influence),
            "seed": self.seed,
            "seeds": list(self.seeds),
            "heldout_episodes": self.heldout_episodes,
            "probe_tasks": self.probe_tasks,
            "oracle_start": self.oracle_start,
        }

    def validate(self) -> "ExperimentConfig":
        m = self.model
        if not isinstance(m.layer_sizes, list) or len(m.layer_sizes) < 2 \
                or not all(isinstance(v, int) and v > 0 for v in m.layer_sizes):
            raise ConfigError("model.layer_sizes", "need at least two positive integer sizes")
        if len(m.activations) != len(m.layer_sizes) - 2:
            raise ConfigError("model.activations", f"need {len(m.layer_sizes) - 2} entries (one per hidden layer)")
        for i, a in enumerate(m.activations):
            if a not in ACTIVATIONS:
                raise ConfigError(f"model.activations[{i}]", f"must be one of {ACTIVATIONS}")
        if m.loss not in LOSSES:
            raise ConfigError("model.loss", f"must be one of {LOSSES}")
        self.bilevel.validate()
        _check_fields(EpisodeSpec, self.episodes, "episodes", exclude=("seed",))
        for k, v in self.episodes.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"episodes.{k}", "must be a positive integer")
        _check_fields(CorruptionSpec, self.corruption, "corruption")
        for k in ("task_fraction", "sample_fraction"):
            v = self.corruption.get(k, 0.0)
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"corruption.{k}", f"must lie in [0, 1], got {v!r}")
        dc = self.data
        if dc.source not in ("synthetic", "csv"):
            raise ConfigError("data.source", "must be 'synthetic' or 'csv'")
        if dc.source == "csv" and not dc.path:
            raise ConfigError("data.path", "required when data.source is 'csv'")
        if dc.source == "synthetic":
            if dc.clusters < self.episodes["n_way"]:
                raise ConfigError("data.clusters", f"must be >= episodes.n_way ({self.episodes['n_way']})")
            if dc.dim != m.layer_sizes[0]:
                raise ConfigError("data.dim", f"must equal model.layer_sizes[0] ({m.layer_sizes[0]})")
            if m.loss == "cross_entropy" and m.layer_sizes[-1] != self.episodes["n_way"]:
                raise ConfigError("model.layer_sizes", "output size must equal episodes.n_way")
        ic = self.influence
        if ic.backend not in BACKENDS:
            raise ConfigError("influence.backend", f"must be one of {BACKENDS}")
        if ic.hessian_mode not in HESSIAN_MODES:
            raise ConfigError("influence.hessian_mode", f"must be one of {HESSIAN_MODES}")
        if ic.numerical_damping < 0:
            raise ConfigError("influence.numerical_damping", "must be >= 0")
        if not 0.0 < ic.task_fraction <= 1.0:
            raise ConfigError("influence.task_fraction", "must lie in (0, 1]")
        _check_fields(NeumannConfig, ic.neumann, "influence.neumann")
        try:
            NeumannConfig(**ic.neumann)
        except MetaIFError as exc:
            raise ConfigError("influence.neumann", str(exc)) from None
        if not isinstance(self.seeds, list) or not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of integers")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer")
        for name in ("heldout_episodes", "probe_tasks"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.oracle_start not in ("warm", "cold"):
            raise ConfigError("oracle_start", "must be 'warm' or 'cold'")
        return self

    # ----- derived objects ------------------------------------------------
    def episode_spec(self, seed: int, num_tasks: int | None = None) -> EpisodeSpec:
        e = dict(self.episodes)
        if num_tasks is not None:
            e["num_tasks"] = num_tasks
        return EpisodeSpec(seed=seed, **e)

    def corruption_spec(self, seed: int) -> CorruptionSpec:
        c = {"seed": seed, **self.corruption}
        return CorruptionSpec(**c)


def _require_dict(v, path: str) -> dict:
    if not isinstance(v, dict):
        raise ConfigError(path, "must be a JSON object")
    return v


def _reject_unknown(d: dict, cls, path: str) -> None:
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{path}{k}", "unknown field")


def _check_fields(cls, d: dict, path: str, exclude=()) -> None:
    known = {f.name for f in fields(cls)} - set(exclude)
    for k in d:
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown field")


def _section(cls, d, path: str):
    d = _require_dict(d, path)
    _reject_unknown(d, cls, path + ".")
    obj = cls(**d)
    for f in fields(cls):
        default = getattr(cls(), f.name)
        val = getattr(obj, f.name)
        if default is not None and val is not None and isinstance(default, (int, float)) \
                and not isinstance(default, bool) and not isinstance(val, (int, float)):
            raise ConfigError(f"{path}.{f.name}", f"must be a number, got {val!r}")
    return obj


# ----- data ---------------------------------------------------------------


@dataclass
class World:
    """Training tasks plus the held-out evaluation and probe episodes for one seed."""

    tasks: list
    heldout: list
    probe: list
    seed: int

    @property
    def corrupted_ids(self) -> list:
        return [t.task_id for t in self.tasks if t.corrupted]


def build_world(cfg: ExperimentConfig, seed: int) -> World:
    n_held, n_probe = cfg.heldout_episodes, cfg.probe_tasks
    dc = cfg.data
    if dc.source == "synthetic":
        noise = tuple(dc.noise) if isinstance(dc.noise, list) else dc.noise
        kw = dict(clusters=dc.clusters, dim=dc.dim, noise=noise, separation=dc.separation,
                  task_shift=dc.task_shift, world_seed=seed)
        tasks = gen_synthetic_tasks(cfg.episode_spec(seed), **kw)
        heldout = gen_synthetic_tasks(cfg.episode_spec(seed + HELDOUT_OFFSET, n_held), **kw)
        probe = gen_synthetic_tasks(cfg.episode_spec(seed + PROBE_OFFSET, n_probe), **kw)
    else:
        pool = load_csv_corpus(dc.path, dc.label_column)
        tasks = make_episodes(pool, cfg.episode_spec(seed))
        heldout = make_episodes(pool, cfg.episode_spec(seed + HELDOUT_OFFSET, n_held))
        probe = make_episodes(pool, cfg.episode_spec(seed + PROBE_OFFSET, n_probe))
    if cfg.corruption.get("task_fraction", 0.0) > 0:
        tasks = corrupt(tasks, cfg.corruption_spec(seed))
    return World(tasks, heldout, probe, seed)


def train_world(cfg: ExperimentConfig, world: World) -> MetaState:
    return train_meta(world.tasks, cfg.bilevel, cfg.model.build(), seed=world.seed)


def heldout_accuracy(state: MetaState, lam, world: World) -> float:
    return evaluate_accuracy(state.model, lam, world.heldout, state.config)


def retrain(cfg: ExperimentConfig, state: MetaState, tasks: list) -> MetaState:
    """Retrain on ``tasks`` following the configured oracle start (warm = from lam*)."""
    init = state.lambda_star if cfg.oracle_start == "warm" else None
    start = time.perf_counter()
    out = train_meta(tasks, cfg.bilevel, state.model, seed=state.seed, init=init)
    out.runtime = time.perf_counter() - start
    return out


# ----- oracle comparison ---------------------------------------------------


def parse_removal(text: str) -> RemovalSpec:
    """``task:K``, ``train_instance:K:I`` or ``val_instance:K:I``."""
    parts = text.split(":")
    try:
        if parts[0] == "task" and len(parts) == 2:
            return RemovalSpec("task", int(parts[1]))
        if parts[0] in ("train_instance", "val_instance") and len(parts) == 3:
            return RemovalSpec(parts[0], int(parts[1]), int(parts[2]))
    except ValueError:
        pass
    raise ConfigError("removals", f"cannot parse removal {text!r}; use task:K or train_instance:K:I")


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _method_estimate(engine: InfluenceEngine, method: str, removal: RemovalSpec):
    if method in ("task_if", "direct_if"):
        return engine.compute(method, removal.task_id)
    return engine.compute(method, removal.task_id, removal.example_index)


def compare_oracle(cfg: ExperimentConfig, state: MetaState, world: World, removals: list,
                   methods=METHODS, engine: InfluenceEngine | None = None,
                   evaluate: bool = True) -> list[dict]:
    """Edited lam vs the retrained oracle for every (removal, applicable method)."""
    engine = engine or cfg.influence.engine(state, state.seed)
    lam = np.asarray(state.lambda_star)
    rows = []
    for removal in removals:
        base = {"seed": state.seed, "removal": removal.label()}
        try:
            oracle = retrain(cfg, state, apply_removal(state.tasks, removal))
        except MetaIFError as exc:
            for m in methods:
                rows.append({**base, "method": m, "status": "error", "error": f"oracle: {exc}"})
            continue
        od = oracle.lambda_star - lam
        for method in methods:
            if method != "retrain" and method not in METHOD_FOR_REMOVAL[removal.kind]:
                continue
            row = {**base, "method": method}
            try:
                if method == "retrain":
                    est, seconds = oracle.lambda_star, oracle.runtime
                else:
                    start = time.perf_counter()
                    inf = _method_estimate(engine, method, removal)
                    seconds = time.perf_counter() - start
                    est = inf.edited(lam)
                row.update(
                    runtime_seconds=seconds,
                    l2_to_oracle=float(np.linalg.norm(est - oracle.lambda_star)),
                    cosine_to_oracle=_cosine(est - lam, od) if method != "retrain" else 1.0,
                    l2_base_to_oracle=float(np.linalg.norm(od)),
                    accuracy=heldout_accuracy(state, est, world) if evaluate else None,
                    status="ok",
                )
            except (MetaIFError, ValueError, ArithmeticError) as exc:
                row.update(status="error", error=str(exc))
            rows.append(row)
    return rows


# ----- influence scores ------------------------------------------------------


def probe_gradient(state: MetaState, world: World) -> np.ndarray:
    """Summed gradient of the probe tasks' adapted validation loss with respect to lam."""
    return sum(new_task_gradient(state, t, through_inner=True) for t in world.probe)


def task_scores(engine: InfluenceEngine, state: MetaState, g: np.ndarray) -> dict:
    """IS per task; positive means removing the task is predicted to lower the probe loss."""
    return {tid: influence_score(state, engine.task_if(tid), probe_gradient=g) for tid in state.task_ids}


def instance_scores(engine: InfluenceEngine, state: MetaState, g: np.ndarray) -> dict:
    out = {}
    for t in state.tasks:
        for i in range(len(t.train)):
            out[(t.task_id, i)] = influence_score(state, engine.instance_if_train(t.task_id, i), probe_gradient=g)
    return out


def rank_desc(scores: dict) -> list:
    """Keys by descending score; ties broken by key for determinism."""
    return sorted(scores, key=lambda k: (-scores[k], k))


def _count(fraction: float, n: int) -> int:
    return int(round(fraction * n))


def remove_tasks(tasks: list, ids) -> list:
    drop = set(ids)
    return [t for t in tasks if t.task_id not in drop]


def remove_instances(tasks: list, keys) -> list:
    """Drop (task_id, train_index) pairs; a task left without training data is dropped."""
    by_task: dict = {}
    for tid, i in keys:
        by_task.setdefault(tid, set()).add(i)
    out = []
    for t in tasks:
        gone = by_task.get(t.task_id)
        if not gone:
            out.append(t)
            continue
        keep = [i for i in range(len(t.train)) if i not in gone]
        if keep:
            out.append(TaskData(t.task_id, t.train.subset(keep), t.val, t.corrupted))
    return out


def _accuracy_after(cfg, state, world, remaining, n_removed: int, retrain_points: bool):
    if n_removed == 0:
        return heldout_accuracy(state, state.lambda_star, world), 0.0
    if not remaining or not retrain_points:
        return None, 0.0
    new = retrain(cfg, state, remaining)
    return heldout_accuracy(new, new.lambda_star, world), new.runtime


def harmful_scan(cfg: ExperimentConfig, fractions, seeds=None, retrain_points: bool = True) -> list[dict]:
    """Detection curves: rank tasks by IS magnitude and by a random order.

    A flipped-label task moves lam* far more than a clean one, in whichever
    direction, so the magnitude of its score is the detection signal.

    For each fraction f the top round(f*N) tasks are "checked"; the row records
    the share of corrupted tasks among them and, with ``retrain_points``, the
    held-out accuracy after retraining without them.
    """
    rows = []
    for seed in seeds if seeds is not None else cfg.seeds:
        world = build_world(cfg, seed)
        if not world.corrupted_ids:
            raise ConfigError("corruption.task_fraction", "harmful-scan needs corrupted tasks")
        state = train_world(cfg, world)
        engine = cfg.influence.engine(state, seed)
        start = time.perf_counter()
        scores = task_scores(engine, state, probe_gradient(state, world))
        score_seconds = time.perf_counter() - start
        orders = {"influence": rank_desc({t: abs(v) for t, v in scores.items()}),
                  "random": list(np.random.default_rng([seed, 7]).permutation(state.task_ids))}
        bad = set(world.corrupted_ids)
        n = len(state.task_ids)
        for ranking, order in orders.items():
            for f in fractions:
                k = _count(f, n)
                checked = [int(t) for t in order[:k]]
                acc, rt = _accuracy_after(cfg, state, world, remove_tasks(state.tasks, checked), k,
                                          retrain_points)
                rows.append({
                    "seed": seed, "ranking": ranking, "fraction_checked": f, "n_checked": k,
                    "n_corrupted": len(bad), "fraction_found": len(bad & set(checked)) / len(bad),
                    "test_accuracy": acc,
                    "runtime_seconds": score_seconds if ranking == "influence" else 0.0,
                    "retrain_seconds": rt,
                })
    return rows


def effectiveness(cfg: ExperimentConfig, level: str, fractions, seeds=None, random_repeats: int = 1) -> list[dict]:
    """Accuracy after removing the most helpful data (lowest IS) vs random data.

    The influence arm removes data in ascending IS order, i.e. the data whose
    removal is predicted to raise the probe loss the most.
    """
    if level not in ("task", "instance"):
        raise ConfigError("level", "must be 'task' or 'instance'")
    rows = []
    for seed in seeds if seeds is not None else cfg.seeds:
        world = build_world(cfg, seed)
        state = train_world(cfg, world)
        engine = cfg.influence.engine(state, seed)
        g = probe_gradient(state, world)
        scores = task_scores(engine, state, g) if level == "task" else instance_scores(engine, state, g)
        helpful_first = rank_desc({k: -v for k, v in scores.items()})
        keys = sorted(scores)
        arms = [("influence", 0, helpful_first)]
        for r in range(random_repeats):
            perm = np.random.default_rng([seed, 11, r]).permutation(len(keys))
            arms.append(("random", r, [keys[i] for i in perm]))
        for ranking, repeat, order in arms:
            for f in fractions:
                k = _count(f, len(keys))
                picked = order[:k]
                remaining = remove_tasks(state.tasks, picked) if level == "task" \
                    else remove_instances(state.tasks, picked)
                acc, rt = _accuracy_after(cfg, state, world, remaining, k, True)
                rows.append({
                    "seed": seed, "level": level, "ranking": ranking, "repeat": repeat,
                    "fraction_removed": f, "n_removed": k, "test_accuracy": acc, "retrain_seconds": rt,
                })
    return rows
