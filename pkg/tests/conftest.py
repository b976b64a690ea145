import numpy as np
import pytest

from metaif.bilevel import BilevelConfig, TaskData
from metaif.model import Examples, QuadraticModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, low=0.1, high=1.9):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * rng.uniform(low, high, size=n)) @ q.T


def quadratic_tasks(rng, n_tasks=4, dim=5, n_train=8, n_val=6, linear_tasks=(), linear_points=None):
    """Tasks for QuadraticModel.

    Tasks in ``linear_tasks`` get zero curvature on their validation points;
    ``linear_points`` maps task index -> (train indices, val indices) with zero
    curvature. Zero-curvature points are linear in theta, so removing them
    leaves every Hessian unchanged.
    """
    linear_points = linear_points or {}
    tasks = []
    for t in range(n_tasks):
        Xtr = rng.normal(size=(n_train, dim))
        Xva = rng.normal(size=(n_val, dim))
        ctr = rng.uniform(0.5, 1.5, size=n_train)
        cva = rng.uniform(0.5, 1.5, size=n_val)
        if t in linear_tasks:
            cva[:] = 0.0
        tr_idx, va_idx = linear_points.get(t, ((), ()))
        ctr[list(tr_idx)] = 0.0
        cva[list(va_idx)] = 0.0
        tasks.append(TaskData(
            t,
            Examples(Xtr, rng.normal(size=n_train), ctr),
            Examples(Xva, rng.normal(size=n_val), cva),
        ))
    return tasks


def quad_parts(task):
    """Closed-form pieces of a QuadraticModel split: loss = 0.5 t^T A t - b^T t."""
    ex = task
    c = np.ones(len(ex)) if ex.curvature is None else ex.curvature
    A = (ex.X * c[:, None]).T @ ex.X
    b = ex.X.T @ ex.y
    return A, b


def closed_form_lambda(tasks, delta):
    """Stationary point of the quadratic bilevel objective (main_text form)."""
    dim = tasks[0].train.X.shape[1]
    lhs = delta * np.eye(dim)
    rhs = np.zeros(dim)
    for t in tasks:
        A, b = quad_parts(t.train)
        B, d = quad_parts(t.val)
        M = np.linalg.inv(A + delta * np.eye(dim))
        lhs += delta**2 * M @ B @ M
        rhs += delta * M @ (d - B @ M @ b)
    return np.linalg.solve(lhs, rhs)


@pytest.fixture
def quad_model():
    return QuadraticModel(5)


@pytest.fixture
def quad_cfg():
    return BilevelConfig(delta=1.0, inner_tol=1e-11, outer_tol=1e-10)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
