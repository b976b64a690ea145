"""Batch command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_state, model_to_dict, save_state
from .datasets import DataError
from .errors import ConfigError, ConvergenceError, GuardError, MetaIFError, PrecheckError
from .experiments import (
    METHODS,
    ExperimentConfig,
    World,
    build_world,
    compare_oracle,
    effectiveness,
    harmful_scan,
    parse_removal,
    train_world,
)
from .influence import InfluenceVector, edit_model
from .model import ParamVector
from .oracle import RemovalSpec, retrain_without
from .schemas import SchemaError, check_csv, write_csv
from .storage import ContainerError, param_vector_json, write_container

log = logging.getLogger("metaif")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CONVERGENCE = 0, 2, 3, 4
ATTRIBUTE_METHODS = ("task_if", "direct_if", "instance_train", "instance_val")


# ----- helpers -----------------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON ({exc})") from None
    cfg = ExperimentConfig.from_dict(raw)
    return apply_overrides(cfg, args)


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "backend", None):
        cfg.influence.backend = args.backend
    if getattr(args, "hessian_mode", None):
        cfg.influence.hessian_mode = args.hessian_mode
    if getattr(args, "delta", None) is not None:
        cfg.bilevel.delta = args.delta
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "seeds", None):
        cfg.seeds = list(args.seeds)
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_config(ckpt: Path, args) -> ExperimentConfig:
    """The experiment config saved next to a checkpoint, with CLI overrides."""
    if getattr(args, "config", None):
        return load_config(args)
    path = ckpt / "config.json"
    if not path.exists():
        raise ConfigError("--config", f"{ckpt} has no config.json; pass --config")
    cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
    return apply_overrides(cfg, args)


def _world_for_state(cfg: ExperimentConfig, state) -> World:
    world = build_world(cfg, state.seed)
    return World(state.tasks, world.heldout, world.probe, state.seed)


# ----- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    world = build_world(cfg, cfg.seed)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    try:
        state = train_world(cfg, world)
        code = EXIT_OK
    except ConvergenceError as exc:
        if exc.state is None:
            raise
        state, code = exc.state, EXIT_CONVERGENCE
        print(f"warning: {exc}", file=sys.stderr)
    save_state(state, out)
    inner = max(state.inner_grad_norms.values()) if state.inner_grad_norms else 0.0
    print(f"tasks={len(state.tasks)} params={state.lambda_star.shape[0]} converged={str(state.converged).lower()} "
          f"outer_grad_norm={state.outer_grad_norm:.3e} max_inner_grad_norm={inner:.3e} "
          f"outer_iters={state.outer_iters} runtime={state.runtime:.2f}s")
    print(f"checkpoint written to {out}")
    return code


def _parse_targets(targets: list[str], method: str, state) -> list[tuple[int, int | None]]:
    instance = method in ("instance_train", "instance_val")
    split = "train" if method == "instance_train" else "val"
    if targets == ["all"] or not targets:
        if not instance:
            return [(tid, None) for tid in state.task_ids]
        return [(t.task_id, i) for t in state.tasks for i in range(len(getattr(t, split)))]
    out = []
    for text in targets:
        parts = text.split(":")
        try:
            if instance and len(parts) == 2:
                out.append((int(parts[0]), int(parts[1])))
            elif not instance and len(parts) == 1:
                out.append((int(parts[0]), None))
            else:
                raise ValueError
        except ValueError:
            form = "TASK:INDEX" if instance else "TASK"
            raise ConfigError("--targets", f"cannot parse {text!r} for {method}; expected {form}") from None
    return out


def cmd_attribute(args) -> int:
    ckpt = Path(args.checkpoint)
    state = load_state(ckpt)
    cfg = _checkpoint_config(ckpt, args)
    out = _out_dir(args)
    inf_dir = out / "influence"
    inf_dir.mkdir(exist_ok=True)
    engine = cfg.influence.engine(state, state.seed)
    targets = _parse_targets(args.targets, args.method, state)
    rows = []
    for tid, idx in targets:
        label = f"{tid}" if idx is None else f"{tid}:{idx}"
        row = {"target": label, "method": args.method, "backend": cfg.influence.backend,
               "task_id": tid, "example_index": idx}
        try:
            if tid not in state.task_ids:
                raise KeyError(f"unknown task id {tid}")
            start = time.perf_counter()
            inf = engine.compute(args.method, tid, idx)
            seconds = time.perf_counter() - start
            stem = inf_dir / (f"{args.method}_task{tid}" + ("" if idx is None else f"_ex{idx}"))
            inf.save(stem)
            row.update(norm=inf.norm, runtime_seconds=seconds,
                       relative_residual=inf.diagnostics.get("relative_residual"),
                       influence_file=str(stem.relative_to(out)), status="ok")
            if args.oracle_timing:
                kind = {"task_if": "task", "direct_if": "task", "instance_train": "train_instance",
                        "instance_val": "val_instance"}[args.method]
                removal = RemovalSpec(kind, tid, idx)
                init = state.lambda_star if cfg.oracle_start == "warm" else None
                oracle = retrain_without(state.tasks, removal, state.config, state.model, state.seed, init)
                row.update(retrain_seconds=oracle.runtime, speedup=oracle.runtime / max(seconds, 1e-12))
        except (MetaIFError, KeyError, IndexError, ValueError, ArithmeticError) as exc:
            row.update(status="error", error=str(exc).strip("'\""))
        rows.append(row)
    path = write_csv(out / "attribute.csv", "attribute/1", rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} targets, {failed} failed; summary in {path}")
    return EXIT_OK


def cmd_edit(args) -> int:
    state = load_state(Path(args.checkpoint))
    out = _out_dir(args)
    influences = [InfluenceVector.load(Path(s).with_suffix("")) for s in args.influence]
    lam = edit_model(state, influences)
    arch = model_to_dict(state.model).get("arch")
    write_container(out / "edited_lambda.bin", {"kind": "param_vector", "arch": arch}, {"values": lam})
    summary = {
        "applied": [inf.manifest() for inf in influences],
        "base_norm": float(np.linalg.norm(state.lambda_star)),
        "change_norm": float(np.linalg.norm(lam - state.lambda_star)),
    }
    if arch is not None:
        summary["edited"] = param_vector_json(ParamVector(state.model.arch, lam))
    (out / "edited_lambda.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    print(f"applied {len(influences)} influence(s); |change|={summary['change_norm']:.4e}; wrote {out}")
    return EXIT_OK


def cmd_compare_oracle(args) -> int:
    out = _out_dir(args)
    removals = [parse_removal(r) for r in args.removals]
    methods = tuple(args.methods or METHODS)
    rows = []
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        state = load_state(ckpt)
        cfg = _checkpoint_config(ckpt, args)
        rows += compare_oracle(cfg, state, _world_for_state(cfg, state), removals, methods,
                               evaluate=not args.no_accuracy)
    else:
        cfg = load_config(args)
        for seed in cfg.seeds:
            world = build_world(cfg, seed)
            state = train_world(cfg, world)
            rows += compare_oracle(cfg, state, world, removals, methods, evaluate=not args.no_accuracy)
    path = write_csv(out / "compare_oracle.csv", "compare_oracle/1", rows)
    print(f"{len(rows)} rows written to {path}")
    return EXIT_OK


def cmd_harmful_scan(args) -> int:
    cfg = load_config(args)
    if args.task_fraction is not None:
        cfg.corruption["task_fraction"] = args.task_fraction
    if args.sample_fraction is not None:
        cfg.corruption["sample_fraction"] = args.sample_fraction
    cfg.validate()
    out = _out_dir(args)
    rows = harmful_scan(cfg, args.fractions, retrain_points=not args.no_retrain)
    path = write_csv(out / "detection.csv", "detection/1", rows)
    for ranking in ("influence", "random"):
        for f in args.fractions:
            found = [r["fraction_found"] for r in rows if r["ranking"] == ranking and r["fraction_checked"] == f]
            print(f"{ranking:>9} checked={f:.2f} found={np.mean(found):.3f}")
    print(f"detection curve written to {path}")
    return EXIT_OK


def cmd_effectiveness(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    rows = effectiveness(cfg, args.level, args.fractions, random_repeats=args.random_repeats)
    path = write_csv(out / f"effectiveness_{args.level}.csv", "effectiveness/1", rows)
    for ranking in ("influence", "random"):
        for f in args.fractions:
            acc = [r["test_accuracy"] for r in rows if r["ranking"] == ranking and r["fraction_removed"] == f
                   and r["test_accuracy"] is not None]
            if acc:
                print(f"{ranking:>9} removed={f:.2f} accuracy={np.mean(acc):.4f}")
    print(f"curves written to {path}")
    return EXIT_OK


def cmd_schema_check(args) -> int:
    bad = 0
    for f in args.files:
        try:
            name, n = check_csv(f)
            print(f"{f}: ok ({name}, {n} rows)")
        except (SchemaError, OSError) as exc:
            print(f"{f}: INVALID: {exc}")
            bad += 1
    return EXIT_CONFIG if bad else EXIT_OK


# ----- parser ------------------------------------------------------------------


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaif", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON experiment config (defaults: desk-scale synthetic setup)")
            sp.add_argument("--backend", choices=("exact", "neumann", "ekfac"))
            sp.add_argument("--hessian-mode", choices=("full", "full_small", "gamma_approx"))
            sp.add_argument("--delta", type=float, help="proximal strength, overrides bilevel.delta")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="train the bilevel model and write a checkpoint")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attribute", help="influence vectors for targets of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--method", choices=ATTRIBUTE_METHODS, default="task_if")
    sp.add_argument("--targets", nargs="*", default=["all"],
                    help="'all', task ids, or TASK:INDEX for instance methods")
    sp.add_argument("--oracle-timing", action="store_true", help="also time a retrain per target")
    sp.set_defaults(func=cmd_attribute)

    sp = sub.add_parser("edit", help="apply saved influence vectors to lam*")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--influence", nargs="+", required=True, help="influence file stems (.json/.bin)")
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("compare-oracle", help="edited models vs retrained oracles")
    common(sp)
    sp.add_argument("--checkpoint", help="compare on this checkpoint instead of training per seed")
    sp.add_argument("--removals", nargs="+", required=True, help="task:K, train_instance:K:I, val_instance:K:I")
    sp.add_argument("--methods", nargs="+", choices=METHODS)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--no-accuracy", action="store_true", help="skip held-out accuracy evaluation")
    sp.set_defaults(func=cmd_compare_oracle)

    sp = sub.add_parser("harmful-scan", help="detection curve of corrupted tasks ranked by influence")
    common(sp)
    sp.add_argument("--fractions", nargs="+", type=_fraction, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--task-fraction", type=_fraction, help="share of corrupted tasks")
    sp.add_argument("--sample-fraction", type=_fraction, help="share of flipped train labels per corrupted task")
    sp.add_argument("--no-retrain", action="store_true", help="record detection only, no accuracy")
    sp.set_defaults(func=cmd_harmful_scan)

    sp = sub.add_parser("effectiveness", help="accuracy after influence-ranked vs random removal")
    common(sp)
    sp.add_argument("--level", choices=("task", "instance"), default="task")
    sp.add_argument("--fractions", nargs="+", type=_fraction, default=[0.0, 0.1, 0.2])
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--random-repeats", type=int, default=3)
    sp.set_defaults(func=cmd_effectiveness)

    sp = sub.add_parser("schema-check", help="validate emitted CSV files")
    sp.add_argument("files", nargs="+")
    sp.set_defaults(func=cmd_schema_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, SchemaError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (PrecheckError, GuardError, ArithmeticError, MetaIFError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
