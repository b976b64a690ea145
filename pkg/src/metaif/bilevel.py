"""Proximal meta-learning objective and its exact bilevel solver.

Inner problem for task i (train split)::

    L_I(lam, theta) = sum_train loss(theta) + delta/2 * ||theta - lam||^2

Outer objective (validation split)::

    F(lam) = sum_i L_O(lam, theta_i(lam)) + delta/2 * ||lam||^2

``L_O`` is the summed validation loss (``main_text``) or that plus the same
proximal term (``appendix_proximal``). The outer solver descends F with the
exact implicit gradient, re-solving every inner problem to tolerance at each
evaluation, so both levels satisfy their stationarity conditions at the end.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConfigError, ConvergenceError, DimensionError, FactorizationError
from .linalg import CholeskySolver
from .model import MLP, Architecture, Examples

log = logging.getLogger(__name__)

REG_FORMS = ("main_text", "appendix_proximal")
OUTER_METHODS = ("auto", "newton", "lbfgs", "gd")
# relative step for finite differences of Hessians along a direction
FD_STEP = 1e-4


@dataclass
class BilevelConfig:
    delta: float = 1.0
    inner_tol: float = 1e-9
    inner_max_iters: int = 200
    outer_tol: float = 1e-6
    outer_max_iters: int = 3000
    outer_step: float = 0.05
    outer_reg_form: str = "main_text"
    outer_method: str = "auto"
    newton_max_params: int = 600
    inner_newton_max_params: int = 2000

    def validate(self) -> "BilevelConfig":
        for name in ("delta", "inner_tol", "outer_tol", "outer_step"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ConfigError(f"bilevel.{name}", f"must be > 0, got {val}")
        for name in ("inner_max_iters", "outer_max_iters", "newton_max_params", "inner_newton_max_params"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"bilevel.{name}", "must be >= 1")
        if self.outer_reg_form not in REG_FORMS:
            raise ConfigError("bilevel.outer_reg_form", f"must be one of {REG_FORMS}")
        if self.outer_method not in OUTER_METHODS:
            raise ConfigError("bilevel.outer_method", f"must be one of {OUTER_METHODS}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BilevelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"bilevel.{sorted(extra)[0]}", "unknown field")
        return cls(**d).validate()


@dataclass(frozen=True)
class TaskData:
    task_id: int
    train: Examples
    val: Examples
    corrupted: bool = False

    def __post_init__(self):
        if len(self.train) == 0 or len(self.val) == 0:
            raise DimensionError(f"task {self.task_id}: train and val must be non-empty")
        if self.train.X.shape[1] != self.val.X.shape[1]:
            raise DimensionError(f"task {self.task_id}: train and val feature widths differ")


@dataclass
class MetaState:
    """Converged (or inspected) bilevel solution.

    ``lambda_star`` and every entry of ``thetas`` are flat float64 arrays; use
    :meth:`lambda_param` for the layout-carrying view when the model is an MLP.
    """

    lambda_star: np.ndarray
    thetas: dict
    config: BilevelConfig
    model: object
    tasks: list
    seed: int = 0
    converged: bool = True
    outer_grad_norm: float = 0.0
    inner_grad_norms: dict = field(default_factory=dict)
    outer_iters: int = 0
    runtime: float = 0.0
    warm_start: bool = False

    @property
    def task_ids(self) -> list:
        return [t.task_id for t in self.tasks]

    def task(self, task_id) -> TaskData:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"unknown task id {task_id!r}")

    def problem(self) -> "MetaProblem":
        return MetaProblem(self.model, self.tasks, self.config)

    def lambda_param(self):
        from .model import ParamVector

        return ParamVector(self.model.arch, self.lambda_star)

    def require_converged(self) -> "MetaState":
        if not self.converged:
            raise ConvergenceError("meta state is not converged", self.outer_grad_norm, self)
        return self


def _inner_mixed_apply(delta: float, v: np.ndarray) -> np.ndarray:
    """d/dlam d/dtheta L_I applied to v; the proximal term makes it -delta * I."""
    return -delta * v


class MetaProblem:
    """Losses and derivatives of the bilevel objective for a fixed model and task list."""

    def __init__(self, model, tasks: list, cfg: BilevelConfig):
        self.model = model
        self.tasks = list(tasks)
        self.cfg = cfg.validate()
        self.delta = float(cfg.delta)
        self.appendix = cfg.outer_reg_form == "appendix_proximal"

    # ----- losses -------------------------------------------------------
    def inner_loss(self, lam, theta, task: TaskData) -> float:
        r = np.asarray(theta) - np.asarray(lam)
        return self.model.loss(theta, task.train) + 0.5 * self.delta * float(r @ r)

    def inner_grad(self, lam, theta, task: TaskData):
        f, g = self.model.loss_and_grad(theta, task.train)
        r = theta - lam
        return f + 0.5 * self.delta * float(r @ r), g + self.delta * r

    def inner_hessian(self, theta, task: TaskData) -> np.ndarray:
        H = self.model.dense_hessian(theta, task.train)
        return H + self.delta * np.eye(H.shape[0])

    def inner_hvp(self, theta, task: TaskData, v) -> np.ndarray:
        return self.model.hvp(theta, task.train, v) + self.delta * np.asarray(v)

    def inner_mixed_apply(self, v) -> np.ndarray:
        return _inner_mixed_apply(self.delta, np.asarray(v, dtype=np.float64))

    def outer_loss(self, lam, theta, task: TaskData) -> float:
        val = self.model.loss(theta, task.val)
        if self.appendix:
            r = np.asarray(theta) - np.asarray(lam)
            val += 0.5 * self.delta * float(r @ r)
        return val

    def outer_partials(self, lam, theta, task: TaskData):
        """(L_O, dL_O/dlam, dL_O/dtheta) at fixed theta."""
        f, w = self.model.loss_and_grad(theta, task.val)
        a = np.zeros_like(lam, dtype=np.float64)
        if self.appendix:
            r = theta - lam
            f += 0.5 * self.delta * float(r @ r)
            w = w + self.delta * r
            a = -self.delta * r
        return f, a, w

    # ----- inner solver -------------------------------------------------
    def solve_inner(self, lam, task: TaskData, theta0=None, return_info: bool = False):
        """Minimize L_I(lam, .) for one task to ||grad|| <= inner_tol.

        Newton with backtracking when the parameter count allows a dense
        Hessian, gradient descent with backtracking otherwise.
        """
        cfg = self.cfg
        lam = np.asarray(lam, dtype=np.float64)
        theta = lam.copy() if theta0 is None else np.array(theta0, dtype=np.float64)
        newton = self.model.n_params <= cfg.inner_newton_max_params
        step = 1.0 / (self.delta + 1.0)
        f, g = self.inner_grad(lam, theta, task)
        gn = float(np.linalg.norm(g))
        for it in range(cfg.inner_max_iters):
            if gn <= cfg.inner_tol:
                return (theta, gn, it) if return_info else theta
            if newton:
                H = self.inner_hessian(theta, task)
                d = _newton_direction(H, g)
                t = 1.0
            else:
                d = -g
                t = step
            slope = float(g @ d)
            while True:
                cand = theta + t * d
                f_new, g_new = self.inner_grad(lam, cand, task)
                gn_new = float(np.linalg.norm(g_new))
                if f_new <= f + 1e-4 * t * slope:
                    break
                # objective differences below roundoff: accept if the gradient shrinks
                if abs(f_new - f) <= 1e-10 * max(1.0, abs(f)) and gn_new < gn:
                    break
                t *= 0.5
                if t < 1e-14:
                    raise ConvergenceError(f"inner line search failed on task {task.task_id}", gn)
            if not newton:
                step = min(2.0 * t, 1e3)
            theta, f, g, gn = cand, f_new, g_new, gn_new
        if gn <= cfg.inner_tol:
            return (theta, gn, cfg.inner_max_iters) if return_info else theta
        raise ConvergenceError(
            f"inner solver did not converge on task {task.task_id} in {cfg.inner_max_iters} iterations", gn
        )

    def solve_inner_minimum(self, lam, task: TaskData, theta0=None, escapes: int = 3):
        """Inner solve that insists on a strict local minimum.

        Returns ``(theta, grad_norm, solver)`` where ``solver`` holds the
        Cholesky factor of the inner Hessian at theta. A stationary point whose
        Hessian is not positive definite is left along its most negative
        curvature direction and re-solved.
        """
        theta, gn, _ = self.solve_inner(lam, task, theta0, return_info=True)
        for attempt in range(escapes + 1):
            H = self.inner_hessian(theta, task)
            try:
                return theta, gn, CholeskySolver(H)
            except FactorizationError:
                if attempt == escapes:
                    raise
            evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
            v = evecs[:, 0]
            step = 1e-2 * max(1.0, float(np.linalg.norm(theta)))
            cands = [theta + step * v, theta - step * v]
            best = min(cands, key=lambda c: self.inner_loss(lam, c, task))
            log.debug("task %s: inner stationary point has curvature %.3e, escaping", task.task_id, evals[0])
            theta, gn, _ = self.solve_inner(lam, task, best, return_info=True)

    # ----- outer objective ---------------------------------------------
    def task_total_gradient(self, lam, theta, task: TaskData, inner_solver=None):
        """(L_O, D_lam L_O) for one task with exact implicit differentiation."""
        f, a, w = self.outer_partials(lam, theta, task)
        if inner_solver is None:
            inner_solver = CholeskySolver(self.inner_hessian(theta, task))
        # (dtheta/dlam)^T w = -(d_lam d_theta L_I) H^{-1} w
        return f, a - self.inner_mixed_apply(inner_solver.solve(w))

    def task_total_hessian(self, lam, theta, task: TaskData, third_order: bool = True,
                           inner_solver=None) -> np.ndarray:
        """d^2/dlam^2 of L_O(lam, theta(lam)) for one task, dense.

        With J = dtheta/dlam = delta * H_in^{-1} and q = J^T dL_O/dtheta::

            L_ll + L_lt J + J L_tl + J (L_tt - D H_in[q] / delta) J

        ``D H_in[q]`` (the third-order term) is a central difference of dense
        training-loss Hessians along q.
        """
        P = lam.shape[0]
        d = self.delta
        if inner_solver is None:
            inner_solver = CholeskySolver(self.inner_hessian(theta, task))
        J = d * inner_solver.solve(np.eye(P))
        J = 0.5 * (J + J.T)
        _, _, w = self.outer_partials(lam, theta, task)
        M = self.model.dense_hessian(theta, task.val)
        if self.appendix:
            M = M + d * np.eye(P)
        if third_order:
            q = J @ w
            qn = float(np.linalg.norm(q))
            if qn > 0:
                h = FD_STEP * max(1.0, float(np.linalg.norm(theta)))
                u = q / qn
                dh = (self.model.dense_hessian(theta + h * u, task.train)
                      - self.model.dense_hessian(theta - h * u, task.train)) / (2 * h)
                M = M - (qn / d) * dh
        T = J @ M @ J
        if self.appendix:
            T = T + d * np.eye(P) - 2 * d * J
        return 0.5 * (T + T.T)

    def value_and_grad(self, lam, starts: dict | None = None) -> "OuterEval":
        """F(lam) and its total gradient.

        Inner problem i starts from ``starts[i]`` when given, else from lam.
        """
        lam = np.asarray(lam, dtype=np.float64)
        starts = starts or {}
        total = 0.5 * self.delta * float(lam @ lam)
        grad = self.delta * lam.copy()
        thetas, norms, solvers = {}, {}, {}
        for task in self.tasks:
            tid = task.task_id
            theta, gn, solver = self.solve_inner_minimum(lam, task, starts.get(tid))
            f, tg = self.task_total_gradient(lam, theta, task, solver)
            thetas[tid], norms[tid], solvers[tid] = theta, gn, solver
            total += f
            grad += tg
        return OuterEval(lam, total, grad, thetas, norms, solvers)

    def value(self, lam) -> float:
        return self.value_and_grad(lam).value

    def total_hessian(self, ev: "OuterEval", third_order: bool = True) -> np.ndarray:
        """Hessian of F at an evaluated point: delta*I plus every task's total Hessian."""
        out = self.delta * np.eye(ev.lam.shape[0])
        for task in self.tasks:
            tid = task.task_id
            out += self.task_total_hessian(ev.lam, ev.thetas[tid], task, third_order, ev.solvers[tid])
        return out

    def train(self, lam0, seed: int = 0) -> MetaState:
        """Minimize F from lam0.

        Inner solves are warm-started along the tracked branch theta_i(lam):
        the start for a trial point x is theta_i(best) + (x - best), where
        ``best`` is the lowest-objective point evaluated so far.
        """
        cfg = self.cfg
        start = time.perf_counter()
        lam = np.array(lam0, dtype=np.float64)
        method = cfg.outer_method
        if method == "auto":
            method = "newton" if lam.shape[0] <= cfg.newton_max_params else "lbfgs"
        tracker = _BranchTracker(self)
        run = {"newton": self._run_newton, "lbfgs": self._run_lbfgs, "gd": self._run_gd}[method]
        iters = run(lam, tracker)
        ev = tracker.best
        gnorm = float(np.linalg.norm(ev.grad))
        state = MetaState(
            lambda_star=ev.lam.copy(),
            thetas=ev.thetas,
            config=cfg,
            model=self.model,
            tasks=self.tasks,
            seed=seed,
            converged=gnorm <= cfg.outer_tol,
            outer_grad_norm=gnorm,
            inner_grad_norms=ev.inner_norms,
            outer_iters=iters,
            runtime=time.perf_counter() - start,
        )
        if not state.converged:
            msg = "outer solver did not reach outer_tol"
            curv = self._min_inner_curvature(ev)
            if curv is not None and curv < 1e-3 * self.delta:
                msg += (f"; an inner Hessian is nearly singular (smallest eigenvalue {curv:.2e}), so the"
                        " inner solution branch ends here: increase delta")
            raise ConvergenceError(msg, gnorm, state)
        return state

    def _min_inner_curvature(self, ev: "OuterEval") -> float | None:
        if self.model.n_params > self.cfg.inner_newton_max_params:
            return None
        return min(float(np.linalg.eigvalsh(self.inner_hessian(ev.thetas[t.task_id], t))[0]) for t in self.tasks)

    def _run_newton(self, lam, tracker: "_BranchTracker") -> int:
        """Trust-region Newton with the exact total Hessian."""
        cfg = self.cfg

        def fun(x):
            ev = tracker(x)
            return ev.value, ev.grad

        def hess(x):
            return self.total_hessian(tracker(x))

        res = scipy.optimize.minimize(
            fun, lam, jac=True, hess=hess, method="trust-exact",
            options={"maxiter": cfg.outer_max_iters, "gtol": cfg.outer_tol},
        )
        log.debug("trust-exact: nit=%d %s", res.nit, res.message)
        return int(res.nit)

    def _run_lbfgs(self, lam, tracker: "_BranchTracker") -> int:
        cfg = self.cfg
        P = lam.shape[0]

        def fun(x):
            ev = tracker(x)
            return ev.value, ev.grad

        total_iters = 0
        # restarts recover from precision-limited line-search exits
        for _ in range(4):
            res = scipy.optimize.minimize(
                fun,
                tracker.best.lam if tracker.best is not None else lam,
                jac=True,
                method="L-BFGS-B",
                options={
                    "maxiter": max(1, cfg.outer_max_iters - total_iters),
                    "gtol": 0.5 * cfg.outer_tol / np.sqrt(P),
                    "ftol": 0.0,
                    "maxcor": 30,
                },
            )
            total_iters += int(res.nit)
            gnorm = float(np.linalg.norm(tracker.best.grad))
            log.debug("lbfgs: nit=%d |g|=%.3e %s", res.nit, gnorm, res.message)
            if gnorm <= cfg.outer_tol or total_iters >= cfg.outer_max_iters:
                break
        return total_iters

    def _run_gd(self, lam, tracker: "_BranchTracker") -> int:
        cfg = self.cfg
        t = cfg.outer_step
        ev = tracker(lam)
        for it in range(cfg.outer_max_iters):
            g = ev.grad
            gn = float(np.linalg.norm(g))
            if gn <= cfg.outer_tol:
                return it
            while True:
                cand = tracker(ev.lam - t * g)
                if cand.value <= ev.value - 1e-4 * t * gn * gn:
                    break
                # objective differences below roundoff: accept if the gradient shrinks
                if abs(cand.value - ev.value) <= 1e-11 * max(1.0, abs(ev.value)) \
                        and np.linalg.norm(cand.grad) < gn:
                    break
                t *= 0.5
                if t < 1e-14:
                    return it
            ev = cand
            t = min(2.0 * t, 1e3)
        return cfg.outer_max_iters


@dataclass
class OuterEval:
    """One evaluation of the outer objective with everything needed to differentiate it again."""

    lam: np.ndarray
    value: float
    grad: np.ndarray
    thetas: dict
    inner_norms: dict
    solvers: dict  # task_id -> CholeskySolver of the inner Hessian at theta


class _BranchTracker:
    """Evaluates F with inner warm starts taken from the best point so far."""

    def __init__(self, problem: MetaProblem, keep: int = 4):
        self.problem = problem
        self.best: OuterEval | None = None
        self._recent: dict = {}
        self._keep = keep

    def __call__(self, x) -> OuterEval:
        x = np.asarray(x, dtype=np.float64)
        key = x.tobytes()
        if key in self._recent:
            return self._recent[key]
        starts = None
        if self.best is not None:
            shift = x - self.best.lam
            starts = {tid: th + shift for tid, th in self.best.thetas.items()}
        ev = self.problem.value_and_grad(x, starts)
        if self._improves(ev):
            self.best = ev
        self._recent[key] = ev
        while len(self._recent) > self._keep:
            self._recent.pop(next(iter(self._recent)))
        return ev

    def _improves(self, ev: OuterEval) -> bool:
        b = self.best
        if b is None or ev.value < b.value - 1e-12 * max(1.0, abs(b.value)):
            return True
        # ties at roundoff level go to the smaller gradient
        return ev.value <= b.value + 1e-12 * max(1.0, abs(b.value)) \
            and np.linalg.norm(ev.grad) < np.linalg.norm(b.grad)


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """-H^{-1} g, or the saddle-free step -|H|^{-1} g when H is indefinite."""
    H = 0.5 * (H + H.T)
    try:
        c = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        return -scipy.linalg.cho_solve(c, g, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    lam, q = np.linalg.eigh(H)
    mag = np.abs(lam)
    mag = np.maximum(mag, 1e-6 * max(float(mag.max()), 1e-12))
    return -q @ ((q.T @ g) / mag)


ModelLike = Union[Architecture, object]


def resolve_model(arch_or_model: ModelLike):
    if isinstance(arch_or_model, Architecture):
        return MLP(arch_or_model, "cross_entropy")
    return arch_or_model


def train_meta(tasks: list, cfg: BilevelConfig, arch: ModelLike, seed: int = 0,
               init=None) -> MetaState:
    """Solve the bilevel problem from the seeded initialization (or ``init``)."""
    if not tasks:
        raise ValueError("train_meta needs at least one task")
    model = resolve_model(arch)
    problem = MetaProblem(model, tasks, cfg)
    lam0 = model.init(seed) if init is None else np.asarray(init, dtype=np.float64)
    state = problem.train(lam0, seed=seed)
    state.warm_start = init is not None
    return state


def solve_inner(lam, task: TaskData, cfg: BilevelConfig, model) -> np.ndarray:
    return MetaProblem(resolve_model(model), [task], cfg).solve_inner(lam, task)


def inner_loss(lam, theta, task: TaskData, cfg: BilevelConfig, model) -> float:
    return MetaProblem(resolve_model(model), [task], cfg).inner_loss(lam, theta, task)


def outer_loss(lam, theta, task: TaskData, cfg: BilevelConfig, model) -> float:
    return MetaProblem(resolve_model(model), [task], cfg).outer_loss(lam, theta, task)


def evaluate_accuracy(model, lam, tasks: list, cfg: BilevelConfig) -> float:
    """Mean post-adaptation validation accuracy of ``lam`` on ``tasks``."""
    problem = MetaProblem(model, tasks, cfg)
    correct = total = 0
    for task in tasks:
        theta = problem.solve_inner(lam, task)
        pred = model.predict(theta, task.val.X)
        correct += int(np.sum(pred == task.val.y))
        total += len(task.val)
    return correct / total
