"""Influence-function estimators for the proximal meta-learning objective.

Notation: lam* is the converged meta parameter, theta_k the task-specific
solution, H_k the inner Hessian (training-loss Hessian + delta*I), and
J_k = dtheta_k/dlam = delta * H_k^{-1} (symmetric). The outer Hessian
delta*I + H_total, with H_total = sum_i d^2 L_O^i / dlam^2, is inverted by the
configured backend.

Every estimator returns an :class:`InfluenceVector` whose ``edited(base)``
applies the estimate with the sign convention of its kind:

============== ===================================== ===========
kind           delta                                 edited
============== ===================================== ===========
task           -(dI + H_total)^{-1} D_lam L_O^k       lam* - delta
direct_baseline-(dI + sum L_ll)^{-1} d_lam L_O^k      lam* - delta
instance_val   -(dI + H_total)^{-1} D_lam l(z)        lam* - delta
instance_train -(dI + H_total)^{-1} D_lam P(z)        lam* + delta
inner          -H_k^{-1} grad_theta l(z)              theta_k - delta
============== ===================================== ===========
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bilevel import MetaState
from .errors import DimensionError, GuardError
from .ihvp import (
    DENSE_GUARD,
    CurvatureOperator,
    EkfacState,
    NeumannConfig,
    ekfac_fit,
    ihvp_neumann,
)
from .linalg import CholeskySolver
from .storage import ContainerError, read_container, write_container

log = logging.getLogger(__name__)

KINDS = ("task", "instance_train", "instance_val", "inner", "direct_baseline")
BACKENDS = ("exact", "neumann", "ekfac")
HESSIAN_MODES = ("full", "full_small", "gamma_approx")
EDIT_SIGNS = {"task": -1.0, "direct_baseline": -1.0, "instance_val": -1.0, "inner": -1.0,
              "instance_train": 1.0}


@dataclass
class InfluenceVector:
    delta: np.ndarray
    kind: str
    task_id: int
    example_index: int | None = None
    backend: str = "exact"
    diagnostics: dict = field(default_factory=dict)
    edit_sign: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown influence kind {self.kind!r}")
        if (self.example_index is None) != (self.kind in ("task", "direct_baseline")):
            raise ValueError(f"kind {self.kind!r} inconsistent with example_index={self.example_index}")
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("influence delta has non-finite entries")
        if self.edit_sign is None:
            self.edit_sign = EDIT_SIGNS[self.kind]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))

    def edited(self, base) -> np.ndarray:
        base = np.asarray(base, dtype=np.float64)
        if base.shape != self.delta.shape:
            raise DimensionError(f"base has shape {base.shape}, influence has {self.delta.shape}")
        return base + self.edit_sign * self.delta

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "task_id": self.task_id,
            "example_index": self.example_index,
            "backend": self.backend,
            "edit_sign": self.edit_sign,
            "norm": self.norm,
            "dim": int(self.delta.shape[0]),
            "diagnostics": self.diagnostics,
        }

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (delta container)."""
        stem = Path(stem)
        meta = {"kind": "influence_vector", "influence": _jsonable(self.manifest())}
        bin_path = stem.with_suffix(".bin")
        json_path = stem.with_suffix(".json")
        write_container(bin_path, meta, {"delta": self.delta})
        json_path.write_text(json.dumps(_jsonable(self.manifest()), indent=2, sort_keys=True))
        return json_path, bin_path

    @classmethod
    def load(cls, stem) -> "InfluenceVector":
        meta, arrays = read_container(Path(stem).with_suffix(".bin"))
        if meta.get("kind") != "influence_vector":
            raise ContainerError(f"{stem}: not an influence vector container")
        m = meta["influence"]
        return cls(arrays["delta"], m["kind"], m["task_id"], m["example_index"], m["backend"],
                   m.get("diagnostics", {}), m["edit_sign"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class TotalHessianSpec:
    """How H_total is formed.

    ``full``: analytic, including the third-order inner term (dense).
    ``full_small``: central differences of summed total gradients with inner
    re-solves (slow oracle). ``gamma_approx``: the curvature-heavy terms are
    replaced by sum_i ||dL_O^i/dtheta||_1 * I.
    """

    mode: str = "full"
    cross_term: bool = True
    third_order: bool = True
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.mode not in HESSIAN_MODES:
            raise ValueError(f"unknown total Hessian mode {self.mode!r}; choose from {HESSIAN_MODES}")


def sample_tasks(task_ids, fraction: float = 1.0, seed: int = 0) -> list:
    """Uniform random subset without replacement, in the original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"task fraction must lie in (0, 1], got {fraction}")
    ids = list(task_ids)
    m = max(1, int(round(fraction * len(ids))))
    if m == len(ids):
        return ids
    pick = set(np.random.default_rng(seed).choice(len(ids), size=m, replace=False).tolist())
    return [t for i, t in enumerate(ids) if i in pick]


class InfluenceEngine:
    """Influence estimators over one converged :class:`MetaState`.

    Per-task inner factorizations and the outer solver are built lazily and
    cached, so many targets can share the expensive work.
    """

    def __init__(self, state: MetaState, spec: TotalHessianSpec = TotalHessianSpec(),
                 backend: str = "exact", neumann: NeumannConfig = NeumannConfig(),
                 numerical_damping: float = 0.0, task_fraction: float = 1.0,
                 sample_seed: int = 0, ekfac_damping: float | None = None):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
        if numerical_damping < 0:
            raise ValueError("numerical_damping must be >= 0")
        state.require_converged()
        self.state = state
        self.problem = state.problem()
        self.delta = float(state.config.delta)
        self.lam = np.asarray(state.lambda_star, dtype=np.float64)
        self.dim = self.lam.shape[0]
        self.spec = spec
        self.backend = backend
        self.neumann = neumann
        self.numerical_damping = float(numerical_damping)
        self.ekfac_damping = ekfac_damping
        self.hessian_tasks = sample_tasks(state.task_ids, task_fraction, sample_seed)
        self._ekfac: dict = {}
        self._exact_inner: dict = {}
        self._outer_op: CurvatureOperator | None = None
        self._outer_solver: CholeskySolver | None = None
        self.build_seconds = 0.0

    # ----- inner level --------------------------------------------------
    def _task(self, task_id):
        return self.state.task(task_id)

    def _theta(self, task_id) -> np.ndarray:
        return np.asarray(self.state.thetas[task_id], dtype=np.float64)

    def _exact_inner_solver(self, task_id) -> CholeskySolver:
        if task_id not in self._exact_inner:
            H = self.problem.inner_hessian(self._theta(task_id), self._task(task_id))
            self._exact_inner[task_id] = CholeskySolver(H)
        return self._exact_inner[task_id]

    def ekfac_state(self, task_id) -> EkfacState:
        if task_id not in self._ekfac:
            task = self._task(task_id)
            n = len(task.train)
            damping = self.delta / n if self.ekfac_damping is None else self.ekfac_damping
            self._ekfac[task_id] = ekfac_fit(self.problem.model, self._theta(task_id), task.train, damping)
        return self._ekfac[task_id]

    def inner_solve(self, task_id, v) -> np.ndarray:
        """H_k^{-1} v with the backend's inner approximation."""
        v = np.asarray(v, dtype=np.float64)
        if self.backend == "ekfac":
            # H_k ~= n * F_k + delta*I = n * (F_k + (delta/n) I)
            n = len(self._task(task_id).train)
            return self.ekfac_state(task_id).inverse_apply(v) / n
        return self._exact_inner_solver(task_id).solve(v)

    def dtheta_dlambda_apply(self, task_id, v) -> np.ndarray:
        """(dtheta_k/dlam) v = -H_k^{-1} (d_lam d_theta L_I) v."""
        return -self.inner_solve(task_id, self.problem.inner_mixed_apply(v))

    # ----- outer level --------------------------------------------------
    def outer_partials(self, task_id):
        return self.problem.outer_partials(self.lam, self._theta(task_id), self._task(task_id))

    def total_gradient_task(self, task_id) -> np.ndarray:
        _, a, w = self.outer_partials(task_id)
        return a + self.dtheta_dlambda_apply(task_id, w)

    def gamma(self) -> float:
        """Gamma = sum over the Hessian task sample of ||dL_O^i/dtheta||_1, rescaled to all tasks."""
        scale = len(self.state.task_ids) / len(self.hessian_tasks)
        return scale * sum(float(np.abs(self.outer_partials(t)[2]).sum()) for t in self.hessian_tasks)

    def total_hessian_operator(self) -> CurvatureOperator:
        if self._outer_op is None:
            start = time.perf_counter()
            mode = self.spec.mode
            if mode == "gamma_approx":
                self._outer_op = self._gamma_operator()
            elif mode == "full":
                self._outer_op = CurvatureOperator.from_matrix(self._full_matrix(), "total Hessian (analytic)")
            else:
                self._outer_op = self._finite_difference_operator()
            self.build_seconds += time.perf_counter() - start
        return self._outer_op

    def _gamma_operator(self) -> CurvatureOperator:
        d = self.delta
        gamma = self.gamma()
        scale = len(self.state.task_ids) / len(self.hessian_tasks)
        appendix = self.problem.appendix
        cross = self.spec.cross_term
        tasks = list(self.hessian_tasks)

        def apply(v):
            out = gamma * v
            if appendix:
                # L_ll v = delta v ; 2 J (L_tl v) = -2 delta J v
                for t in tasks:
                    part = d * v
                    if cross:
                        part = part - 2.0 * d * self.dtheta_dlambda_apply(t, v)
                    out = out + scale * part
            return out

        return CurvatureOperator(apply, self.dim, f"gamma-approximated total Hessian (Gamma={gamma:.6g})")

    def _full_matrix(self) -> np.ndarray:
        if self.dim > DENSE_GUARD:
            raise GuardError(f"full total Hessian needs P <= {DENSE_GUARD}, got {self.dim}")
        scale = len(self.state.task_ids) / len(self.hessian_tasks)
        out = np.zeros((self.dim, self.dim))
        for t in self.hessian_tasks:
            out += self.problem.task_total_hessian(
                self.lam, self._theta(t), self._task(t), self.spec.third_order, self._exact_inner_solver(t)
            )
        out *= scale
        if not self.spec.cross_term and self.problem.appendix:
            # drop the 2*J*L_tl cross term (-2 delta J per task)
            for t in self.hessian_tasks:
                J = self._exact_inner_solver(t).solve(np.eye(self.dim))
                J = self.delta * 0.5 * (J + J.T)
                out += scale * 2.0 * J
        return 0.5 * (out + out.T)

    def _finite_difference_operator(self) -> CurvatureOperator:
        if self.dim > DENSE_GUARD:
            raise GuardError(f"full_small total Hessian needs P <= {DENSE_GUARD}, got {self.dim}")
        problem = self.problem
        lam = self.lam
        thetas = {t: self._theta(t) for t in self.state.task_ids}
        d = self.delta

        def summed_total_gradient(x):
            starts = {t: th + (x - lam) for t, th in thetas.items()}
            ev = problem.value_and_grad(x, starts)
            return ev.grad - d * x

        def apply(v):
            vn = float(np.linalg.norm(v))
            if vn == 0.0:
                return np.zeros_like(v)
            h = self.spec.fd_step * max(1.0, float(np.linalg.norm(lam))) / vn
            return (summed_total_gradient(lam + h * v) - summed_total_gradient(lam - h * v)) / (2 * h)

        return CurvatureOperator(apply, self.dim, "total Hessian (finite differences of total gradients)")

    def outer_solve(self, b) -> tuple[np.ndarray, dict]:
        """(delta*I + damping*I + H_total)^{-1} b with the configured backend."""
        b = np.asarray(b, dtype=np.float64)
        op = self.total_hessian_operator()
        shift = self.delta + self.numerical_damping
        diag = {"hessian_mode": self.spec.mode, "outer_shift": shift}
        if self.numerical_damping:
            diag["numerical_damping"] = self.numerical_damping
        if self.backend == "exact":
            if self._outer_solver is None:
                start = time.perf_counter()
                m = op.matrix()
                self._outer_solver = CholeskySolver(0.5 * (m + m.T), shift)
                self.build_seconds += time.perf_counter() - start
            x = self._outer_solver.solve(b)
            diag["relative_residual"] = _rel_residual(op, x, b, shift)
            return x, diag
        res = ihvp_neumann(op, b, shift, self.neumann)
        diag.update(neumann_iterations=res.iterations, neumann_final_change=res.final_change,
                    neumann_converged=res.converged, neumann_scale=res.scale,
                    neumann_status=res.status)
        return res.x, diag

    # ----- estimators ---------------------------------------------------
    def _make(self, delta, kind, task_id, example_index=None, **diag) -> InfluenceVector:
        diag = {"backend_inner": "ekfac" if self.backend == "ekfac" else "exact", **diag}
        return InfluenceVector(delta, kind, task_id, example_index, self.backend, diag)

    def task_if(self, task_id) -> InfluenceVector:
        start = time.perf_counter()
        g = self.total_gradient_task(task_id)
        x, diag = self.outer_solve(g)
        return self._make(-x, "task", task_id, total_gradient_norm=float(np.linalg.norm(g)),
                          seconds=time.perf_counter() - start, **diag)

    def direct_if(self, task_id) -> InfluenceVector:
        """Baseline that ignores theta(lam): -(delta*I + sum_i L_ll^i)^{-1} d_lam L_O^k."""
        _, a, _ = self.outer_partials(task_id)
        # L_ll^i is delta*I under the proximal outer loss and 0 otherwise
        l_ll = self.delta * len(self.state.task_ids) if self.problem.appendix else 0.0
        denom = self.delta + self.numerical_damping + l_ll
        return self._make(-a / denom, "direct_baseline", task_id, outer_shift=denom)

    def _example(self, task_id, split: str, index: int):
        ex = getattr(self._task(task_id), split)
        if not 0 <= index < len(ex):
            raise IndexError(f"task {task_id} {split} split has {len(ex)} examples, got index {index}")
        return ex.subset([index])

    def example_grad(self, task_id, split: str, index: int) -> np.ndarray:
        return self.problem.model.grad(self._theta(task_id), self._example(task_id, split, index))

    def inner_if(self, task_id, index: int) -> InfluenceVector:
        s = self.example_grad(task_id, "train", index)
        return self._make(-self.inner_solve(task_id, s), "inner", task_id, index)

    def p_term(self, task_id, index: int) -> tuple[float, np.ndarray]:
        """P = dL_O/dtheta . H_k^{-1} grad l(z) and its total lam-derivative.

        The derivative treats H_k^{-1} as constant (third-order terms dropped).
        """
        theta = self._theta(task_id)
        task = self._task(task_id)
        model = self.problem.model
        z = self._example(task_id, "train", index)
        s = model.grad(theta, z)
        u = self.inner_solve(task_id, s)
        _, _, w = self.outer_partials(task_id)
        r = self.inner_solve(task_id, w)
        p = float(w @ u)
        # d/dtheta of P: L_tt u + (Hessian of l(z)) r
        dtheta = model.hvp(theta, task.val, u) + model.hvp(theta, z, r)
        explicit = np.zeros_like(u)
        if self.problem.appendix:
            dtheta = dtheta + self.delta * u
            explicit = -self.delta * u
        return p, explicit + self.dtheta_dlambda_apply(task_id, dtheta)

    def instance_if_val(self, task_id, index: int) -> InfluenceVector:
        start = time.perf_counter()
        # l(z; theta_k(lam)) has no explicit lam dependence
        t = self.dtheta_dlambda_apply(task_id, self.example_grad(task_id, "val", index))
        x, diag = self.outer_solve(t)
        return self._make(-x, "instance_val", task_id, index, seconds=time.perf_counter() - start, **diag)

    def instance_if_train(self, task_id, index: int) -> InfluenceVector:
        start = time.perf_counter()
        p, dp = self.p_term(task_id, index)
        x, diag = self.outer_solve(dp)
        return self._make(-x, "instance_train", task_id, index, p_value=p,
                          seconds=time.perf_counter() - start,
                          approximation="D_lam P ignores the lam-dependence of H_k^{-1}", **diag)

    def compute(self, method: str, task_id, index: int | None = None) -> InfluenceVector:
        """Dispatch by method name: task_if, direct_if, instance_train, instance_val, inner_if."""
        if method == "task_if":
            return self.task_if(task_id)
        if method == "direct_if":
            return self.direct_if(task_id)
        if index is None:
            raise ValueError(f"method {method!r} needs an example index")
        if method == "instance_train":
            return self.instance_if_train(task_id, index)
        if method == "instance_val":
            return self.instance_if_val(task_id, index)
        if method == "inner_if":
            return self.inner_if(task_id, index)
        raise ValueError(f"unknown influence method {method!r}")


def _rel_residual(op: CurvatureOperator, x, b, shift: float) -> float:
    r = op.apply(x) + shift * x - b
    return float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))


# ----- scores and editing ----------------------------------------------


def new_task_gradient(state: MetaState, new_task, through_inner: bool = False) -> np.ndarray:
    """Validation-loss gradient of a new task at theta' = solve_inner(lam*, new_task).

    With ``through_inner`` the gradient is carried back to lam through
    dtheta'/dlam; otherwise that factor is neglected (treated as identity).
    """
    problem = state.problem()
    lam = np.asarray(state.lambda_star, dtype=np.float64)
    theta = problem.solve_inner(lam, new_task)
    g = problem.model.grad(theta, new_task.val)
    if through_inner:
        H = problem.inner_hessian(theta, new_task)
        g = problem.delta * CholeskySolver(H).solve(g)
    return g


def influence_score(state: MetaState, influence: InfluenceVector, new_task=None,
                    probe_gradient=None, through_inner: bool = False) -> float:
    """IS = g . (lam* - edited lam*), g the new-task validation gradient.

    For kinds edited as lam* - delta this is g . delta. A positive score means
    removing the data is predicted to lower the new task's loss (harmful data).
    """
    if influence.kind == "inner":
        raise ValueError("inner influences act on theta_k, not on lam; score them per task")
    g = probe_gradient
    if g is None:
        if new_task is None:
            raise ValueError("influence_score needs new_task or probe_gradient")
        g = new_task_gradient(state, new_task, through_inner)
    return float(-influence.edit_sign * (np.asarray(g) @ influence.delta))


def edit_model(state: MetaState, influences) -> np.ndarray:
    """lam* with every influence applied by its own sign; the state is untouched."""
    lam = np.array(state.lambda_star, dtype=np.float64)
    for inf in influences:
        if inf.kind == "inner":
            raise ValueError("inner influences edit theta_k; use InfluenceVector.edited(theta_k)")
        lam = inf.edited(lam)
    return lam
