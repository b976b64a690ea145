"""Inverse curvature-vector products: (A + damping*I)^{-1} v.

Three interchangeable backends:

* :func:`ihvp_exact` materializes A and solves with a Cholesky factorization.
* :func:`ihvp_neumann` runs the truncated Neumann (Richardson) iteration.
* :class:`EkfacState` approximates a per-layer Fisher/Hessian block by an
  eigenvalue-corrected Kronecker factorization and inverts it in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, GuardError, PrecheckError
from .linalg import EigenDecomposition, eig_sym, kron_apply, solve_spd
from .storage import ContainerError, read_container, write_container

log = logging.getLogger(__name__)

DENSE_GUARD = 4000


class CurvatureOperator:
    """Symmetric linear operator given by its matrix-vector product."""

    def __init__(self, apply: Callable[[np.ndarray], np.ndarray], dim: int,
                 description: str = "", matrix: np.ndarray | None = None):
        self._apply = apply
        self.dim = int(dim)
        self.description = description
        self._matrix = matrix

    @classmethod
    def from_matrix(cls, m, description: str = "dense matrix") -> "CurvatureOperator":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"curvature matrix must be square, got {m.shape}")
        return cls(lambda v: m @ v, m.shape[0], description, matrix=m)

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"vector has shape {v.shape}, expected ({self.dim},)")
        return self._apply(v)

    __call__ = apply

    def matrix(self) -> np.ndarray:
        """Dense matrix, built column by column through ``apply`` if needed."""
        if self._matrix is None:
            if self.dim > DENSE_GUARD:
                raise GuardError(f"operator dimension {self.dim} exceeds dense guard {DENSE_GUARD}")
            eye = np.eye(self.dim)
            self._matrix = np.column_stack([self._apply(eye[:, j]) for j in range(self.dim)])
        return self._matrix

    def shifted(self, shift: float) -> "CurvatureOperator":
        """A + shift*I."""
        m = None if self._matrix is None else self._matrix + shift * np.eye(self.dim)
        return CurvatureOperator(lambda v: self._apply(v) + shift * v, self.dim,
                                 f"{self.description} + {shift:g}*I", matrix=m)


def ihvp_exact(op: CurvatureOperator, v, damping: float = 0.0) -> np.ndarray:
    m = op.matrix()
    # column-built operators are symmetric only up to roundoff
    return solve_spd(0.5 * (m + m.T), v, damping)


@dataclass(frozen=True)
class NeumannConfig:
    """``scale`` is the step alpha (None: 0.9 / estimated largest eigenvalue)."""

    scale: float | None = None
    max_terms: int = 100_000
    stop_tol: float = 1e-10
    power_iters: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.scale is not None and not self.scale > 0:
            raise PrecheckError(f"neumann scale must be > 0, got {self.scale}")
        if self.max_terms < 1:
            raise PrecheckError("neumann max_terms must be >= 1")
        if not self.stop_tol > 0:
            raise PrecheckError("neumann stop_tol must be > 0")


@dataclass
class NeumannResult:
    x: np.ndarray
    iterations: int
    final_change: float
    converged: bool
    scale: float
    spectral_radius: float
    status: str = "ok"


def power_iteration(apply: Callable, dim: int, iters: int = 30, seed: int = 0) -> float:
    """Estimate of the largest-magnitude eigenvalue modulus of a symmetric operator."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = apply(x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        x = y / est
    return est


def ihvp_neumann(op: CurvatureOperator, v, damping: float = 0.0,
                 cfg: NeumannConfig = NeumannConfig()) -> NeumannResult:
    """Solve (A + damping*I) x = v by x <- x - alpha*((A + damping*I) x - v).

    Starts at x0 = alpha*v, which makes the iterates the partial sums
    alpha * sum_j (I - alpha*M)^j v. Stops when the L1 change of an update
    drops to ``stop_tol`` or after ``max_terms`` updates.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.dim,):
        raise DimensionError(f"vector has shape {v.shape}, expected ({op.dim},)")

    def m_apply(x):
        return op.apply(x) + damping * x

    alpha = cfg.scale
    if alpha is None:
        top = power_iteration(m_apply, op.dim, cfg.power_iters, cfg.seed)
        if top == 0.0:
            raise PrecheckError("operator is zero; the Neumann series has nothing to invert")
        alpha = 0.9 / top
    rho = power_iteration(lambda x: x - alpha * m_apply(x), op.dim, cfg.power_iters, cfg.seed)
    if rho >= 1.0:
        raise PrecheckError(
            f"spectral radius of I - alpha*(A + damping*I) is about {rho:.3f} >= 1 "
            f"with alpha={alpha:g}; use a smaller scale or more damping"
        )
    x = alpha * v
    change = float("inf")
    for j in range(1, cfg.max_terms + 1):
        step = alpha * (m_apply(x) - v)
        x = x - step
        change = float(np.abs(step).sum())
        if not np.isfinite(change):
            raise PrecheckError("Neumann iteration diverged despite the spectral precheck")
        if change <= cfg.stop_tol:
            return NeumannResult(x, j, change, True, alpha, rho)
    log.warning("Neumann iteration stopped at max_terms=%d with change %.3e", cfg.max_terms, change)
    return NeumannResult(x, cfg.max_terms, change, False, alpha, rho, status="max_terms_reached")


# ----- EK-FAC ----------------------------------------------------------


@dataclass
class EkfacLayer:
    omega: np.ndarray  # activation second moment, (d_in+1, d_in+1)
    gamma: np.ndarray  # pre-activation gradient second moment, (d_out, d_out)
    omega_eig: EigenDecomposition
    gamma_eig: EigenDecomposition
    corrected: np.ndarray  # Lambda*, shape (d_in+1, d_out), row-major like the weights
    damping: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.corrected.shape

    @property
    def kfac_eigenvalues(self) -> np.ndarray:
        """Plain Kronecker eigenvalues Lambda_Omega x Lambda_Gamma, same layout as ``corrected``."""
        return np.outer(self.omega_eig.eigenvalues, self.gamma_eig.eigenvalues)


@dataclass
class EkfacState:
    layers: list[EkfacLayer]
    n_examples: int
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return sum(l.corrected.size for l in self.layers)

    def _split(self, v) -> list[np.ndarray]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"vector has shape {v.shape}, expected ({self.dim},) for this EK-FAC layout")
        out, o = [], 0
        for layer in self.layers:
            out.append(v[o : o + layer.corrected.size])
            o += layer.corrected.size
        return out

    def _eigen_apply(self, v, diag_fn) -> np.ndarray:
        parts = []
        for layer, vl in zip(self.layers, self._split(v)):
            qo, qg = layer.omega_eig.eigenvectors, layer.gamma_eig.eigenvectors
            coords = kron_apply(qo.T, qg.T, vl)
            parts.append(kron_apply(qo, qg, coords * diag_fn(layer).reshape(-1)))
        return np.concatenate(parts)

    def inverse_apply(self, v) -> np.ndarray:
        return self._eigen_apply(v, lambda l: 1.0 / (l.corrected + l.damping))

    def apply(self, v) -> np.ndarray:
        """The damped block-diagonal approximation itself times v."""
        return self._eigen_apply(v, lambda l: l.corrected + l.damping)

    def block(self, l: int, corrected: bool = True) -> np.ndarray:
        """Dense undamped approximation of block l (for diagnostics on small layers)."""
        layer = self.layers[l]
        q = np.kron(layer.omega_eig.eigenvectors, layer.gamma_eig.eigenvectors)
        lam = layer.corrected if corrected else layer.kfac_eigenvalues
        return (q * lam.reshape(-1)) @ q.T

    def operator(self) -> CurvatureOperator:
        return CurvatureOperator(self.apply, self.dim, "ekfac block-diagonal curvature")

    def save(self, path) -> None:
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"l{i}.omega"] = layer.omega
            arrays[f"l{i}.gamma"] = layer.gamma
            arrays[f"l{i}.q_omega"] = layer.omega_eig.eigenvectors
            arrays[f"l{i}.lam_omega"] = layer.omega_eig.eigenvalues
            arrays[f"l{i}.q_gamma"] = layer.gamma_eig.eigenvectors
            arrays[f"l{i}.lam_gamma"] = layer.gamma_eig.eigenvalues
            arrays[f"l{i}.corrected"] = layer.corrected
        meta = {
            "kind": "ekfac_state",
            "n_examples": self.n_examples,
            "damping": [l.damping for l in self.layers],
            "extra": self.meta,
        }
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "EkfacState":
        meta, arrays = read_container(path)
        if meta.get("kind") != "ekfac_state":
            raise ContainerError(f"{path}: expected an ekfac_state container, got {meta.get('kind')}")
        layers = []
        for i, damping in enumerate(meta["damping"]):
            layers.append(EkfacLayer(
                arrays[f"l{i}.omega"],
                arrays[f"l{i}.gamma"],
                EigenDecomposition(arrays[f"l{i}.q_omega"], arrays[f"l{i}.lam_omega"]),
                EigenDecomposition(arrays[f"l{i}.q_gamma"], arrays[f"l{i}.lam_gamma"]),
                arrays[f"l{i}.corrected"],
                float(damping),
            ))
        return cls(layers, int(meta["n_examples"]), meta.get("extra", {}))


def ekfac_fit(model, theta, batch, damping=None, damping_factor: float = 0.1,
              min_damping: float = 1e-8) -> EkfacState:
    """Fit EK-FAC factors from per-example training gradients (empirical Fisher).

    ``damping`` is a scalar or per-layer list; by default each layer uses
    ``damping_factor * mean(Lambda*)`` floored at ``min_damping``.
    """
    if getattr(model, "loss_name", None) != "cross_entropy":
        raise ValueError("EK-FAC requires a cross-entropy MLP")
    if len(batch) == 0:
        raise DimensionError("EK-FAC needs at least one example")
    inputs, grads = model.per_example_factors(theta, batch)
    n = len(batch)
    layers = []
    for l, (h, g) in enumerate(zip(inputs, grads)):
        omega = h.T @ h / n
        gamma = g.T @ g / n
        eo, eg = eig_sym(omega), eig_sym(gamma)
        a = h @ eo.eigenvectors
        b = g @ eg.eigenvectors
        corrected = (a * a).T @ (b * b) / n
        if damping is None:
            lam_l = max(damping_factor * float(corrected.mean()), min_damping)
        elif np.ndim(damping):
            lam_l = float(damping[l])
        else:
            lam_l = float(damping)
        if not lam_l > 0:
            raise ValueError(f"EK-FAC damping must be > 0, got {lam_l} for layer {l}")
        layers.append(EkfacLayer(omega, gamma, eo, eg, corrected, lam_l))
    return EkfacState(layers, n)


def ekfac_inverse_apply(state: EkfacState, v) -> np.ndarray:
    return state.inverse_apply(v)


def empirical_fisher_blocks(model, theta, batch) -> list[np.ndarray]:
    """Exact per-layer blocks (1/n) sum_j g_j g_j^T of the empirical Fisher."""
    inputs, grads = model.per_example_factors(theta, batch)
    n = len(batch)
    blocks = []
    for h, g in zip(inputs, grads):
        per_ex = (h[:, :, None] * g[:, None, :]).reshape(n, -1)
        blocks.append(per_ex.T @ per_ex / n)
    return blocks
