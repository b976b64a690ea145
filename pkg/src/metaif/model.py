"""Small multilayer perceptron with hand-written reverse mode and
forward-over-reverse Hessian-vector products.

Conventions
-----------
* Losses are SUMS over examples, never means. Influence magnitudes scale with
  this choice.
* Each layer stores a weight matrix ``W`` of shape ``(d_in + 1, d_out)``; the
  last row is the bias (a constant-1 input is appended to every layer input).
  Flattening is row-major, so the gradient of one example for one layer is
  ``kron(h_with_bias, dloss_dpreact)``, the ordering EK-FAC factors assume.
* Cross-entropy takes integer labels; ``mse`` takes real targets of shape
  ``(n, d_out)`` and is ``0.5 * sum((logits - y)**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, GuardError, NumericalError

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("cross_entropy", "mse")
DENSE_HESSIAN_GUARD = 4000


@dataclass(frozen=True)
class Examples:
    """A labeled batch. ``curvature`` is only read by :class:`QuadraticModel`."""

    X: np.ndarray
    y: np.ndarray
    curvature: np.ndarray | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y)
        if y.shape[0] != X.shape[0]:
            raise DimensionError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.curvature is not None:
            c = np.asarray(self.curvature, dtype=np.float64)
            if c.shape != (X.shape[0],):
                raise DimensionError("curvature must have one entry per example")
            object.__setattr__(self, "curvature", c)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Examples":
        idx = np.asarray(idx)
        c = None if self.curvature is None else self.curvature[idx]
        return Examples(self.X[idx], self.y[idx], c)

    def without(self, index: int) -> "Examples":
        keep = np.delete(np.arange(len(self)), index)
        return self.subset(keep)


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        acts = tuple(self.activations)
        n_hidden = len(sizes) - 2
        if len(acts) == 1 and n_hidden > 1:
            acts = acts * n_hidden
        if len(acts) != n_hidden:
            raise ValueError(f"need {n_hidden} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i] + 1, s[i + 1]) for i in range(self.n_layers)]

    @property
    def offsets(self) -> list[int]:
        out = [0]
        for r, c in self.layer_shapes:
            out.append(out[-1] + r * c)
        return out

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["layer_sizes"]), tuple(d.get("activations", ())))


@dataclass(frozen=True)
class ParamVector:
    arch: Architecture
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape[0] != self.arch.n_params:
            raise DimensionError(f"{v.shape[0]} values for {self.arch.n_params} parameters")
        if not np.all(np.isfinite(v)):
            raise NumericalError("parameter vector contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def layer(self, l: int) -> np.ndarray:
        o = self.arch.offsets
        return self.values[o[l] : o[l + 1]].reshape(self.arch.layer_shapes[l])

    def replace(self, values) -> "ParamVector":
        return ParamVector(self.arch, values)


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Glorot-uniform weights from one RNG stream per layer; zero biases."""
    chunks = []
    for l, (rows, cols) in enumerate(arch.layer_shapes):
        rng = np.random.default_rng([int(seed), l])
        s = np.sqrt(6.0 / (rows - 1 + cols))
        w = np.zeros((rows, cols))
        w[:-1] = rng.uniform(-s, s, size=(rows - 1, cols))
        chunks.append(w.reshape(-1))
    return ParamVector(arch, np.concatenate(chunks))


def _act(name: str, o: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(o)
    if name == "relu":
        return np.maximum(o, 0.0)
    return o


def _act_d1(name: str, o: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (o > 0).astype(np.float64)
    return np.ones_like(o)


def _act_d2(name: str, o: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return -2.0 * h * (1.0 - h * h)
    # relu'' is zero almost everywhere
    return np.zeros_like(o)


def _with_bias(h: np.ndarray) -> np.ndarray:
    return np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)


def _softmax(o: np.ndarray) -> np.ndarray:
    z = o - o.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ForwardTrace(NamedTuple):
    inputs: list  # per layer: input with bias column, (n, d_in + 1)
    preacts: list  # per layer: pre-activation, (n, d_out)
    hidden: list  # per layer: activation output, (n, d_out)
    logits: np.ndarray


class MLP:
    """Loss, gradient and curvature of an MLP as functions of a flat parameter array."""

    def __init__(self, arch: Architecture, loss: str = "cross_entropy"):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.arch = arch
        self.loss_name = loss
        self._shapes = arch.layer_shapes
        self._offsets = arch.offsets

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    def init(self, seed: int) -> np.ndarray:
        return np.array(init_params(self.arch, seed).values)

    def _weights(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"parameter array has shape {theta.shape}, expected ({self.n_params},)")
        o = self._offsets
        return [theta[o[l] : o[l + 1]].reshape(s) for l, s in enumerate(self._shapes)]

    def _split_directions(self, V: np.ndarray) -> list[np.ndarray]:
        """Per-layer directions laid out as (d_in + 1, k, d_out)."""
        o = self._offsets
        k = V.shape[1]
        return [
            np.ascontiguousarray(V[o[l] : o[l + 1]].reshape(s[0], s[1], k).transpose(0, 2, 1))
            for l, s in enumerate(self._shapes)
        ]

    def _check_batch(self, batch: Examples) -> None:
        if len(batch) == 0:
            raise DimensionError("empty batch")
        if batch.X.shape[1] != self.arch.layer_sizes[0]:
            raise DimensionError(
                f"inputs have {batch.X.shape[1]} features, expected {self.arch.layer_sizes[0]}"
            )
        n_out = self.arch.layer_sizes[-1]
        if self.loss_name == "cross_entropy":
            y = batch.y
            if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
                raise DimensionError("cross-entropy needs a 1-D integer label array")
            if y.min() < 0 or y.max() >= n_out:
                raise DimensionError(f"label out of range [0, {n_out})")
        elif batch.y.shape != (len(batch), n_out):
            raise DimensionError(f"mse targets must have shape ({len(batch)}, {n_out})")

    def forward(self, theta, X) -> ForwardTrace:
        Ws = self._weights(theta)
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if h.shape[1] != self.arch.layer_sizes[0]:
            raise DimensionError(f"input has {h.shape[1]} features, expected {self.arch.layer_sizes[0]}")
        inputs, preacts, hidden = [], [], []
        for l, W in enumerate(Ws):
            hb = _with_bias(h)
            o = hb @ W
            h = o if l == len(Ws) - 1 else _act(self.arch.activations[l], o)
            inputs.append(hb)
            preacts.append(o)
            hidden.append(h)
        if not np.all(np.isfinite(h)):
            raise NumericalError("non-finite activations in forward pass")
        return ForwardTrace(inputs, preacts, hidden, h)

    def predict(self, theta, X) -> np.ndarray:
        logits = self.forward(theta, X).logits
        if self.loss_name == "cross_entropy":
            return logits.argmax(axis=1)
        return logits

    def _loss_terms(self, logits: np.ndarray, batch: Examples):
        """Per-example losses and dloss/dlogits."""
        if self.loss_name == "cross_entropy":
            z = logits - logits.max(axis=1, keepdims=True)
            logsumexp = np.log(np.exp(z).sum(axis=1))
            idx = np.arange(len(batch))
            losses = logsumexp - z[idx, batch.y]
            g = _softmax(logits)
            g[idx, batch.y] -= 1.0
            return losses, g
        r = logits - batch.y
        return 0.5 * np.sum(r * r, axis=1), r

    def loss(self, theta, batch: Examples) -> float:
        self._check_batch(batch)
        tr = self.forward(theta, batch.X)
        return float(self._loss_terms(tr.logits, batch)[0].sum())

    def _backward(self, Ws, tr: ForwardTrace, g_out: np.ndarray) -> list[np.ndarray]:
        """Per-layer dloss/dpreact for each example."""
        gs = [None] * len(Ws)
        g = g_out
        for l in range(len(Ws) - 1, -1, -1):
            gs[l] = g
            if l > 0:
                gh = g @ Ws[l][:-1].T
                name = self.arch.activations[l - 1]
                g = _act_d1(name, tr.preacts[l - 1], tr.hidden[l - 1]) * gh
        return gs

    def loss_and_grad(self, theta, batch: Examples) -> tuple[float, np.ndarray]:
        self._check_batch(batch)
        Ws = self._weights(theta)
        tr = self.forward(theta, batch.X)
        losses, g_out = self._loss_terms(tr.logits, batch)
        gs = self._backward(Ws, tr, g_out)
        grad = np.concatenate([(tr.inputs[l].T @ gs[l]).reshape(-1) for l in range(len(Ws))])
        return float(losses.sum()), grad

    def grad(self, theta, batch: Examples) -> np.ndarray:
        return self.loss_and_grad(theta, batch)[1]

    def per_example_factors(self, theta, batch: Examples):
        """Layer inputs (with bias) and dloss/dpreact for every example.

        The per-example gradient of layer ``l`` is ``kron(inputs[l][j], grads[l][j])``.
        """
        self._check_batch(batch)
        Ws = self._weights(theta)
        tr = self.forward(theta, batch.X)
        _, g_out = self._loss_terms(tr.logits, batch)
        return tr.inputs, self._backward(Ws, tr, g_out)

    def hvp(self, theta, batch: Examples, V) -> np.ndarray:
        """Hessian of the summed loss times ``V`` (shape (P,) or (P, k)).

        Forward-over-reverse (R-operator) pass. Every direction is propagated
        at once with per-example quantities stored as (n, k, width) so each
        step is a single matrix product.
        """
        self._check_batch(batch)
        V = np.asarray(V, dtype=np.float64)
        single = V.ndim == 1
        if single:
            V = V[:, None]
        if V.shape[0] != self.n_params:
            raise DimensionError(f"direction has {V.shape[0]} rows, expected {self.n_params}")
        Ws = self._weights(theta)
        Vs = self._split_directions(V)
        tr = self.forward(theta, batch.X)
        L = len(Ws)
        acts = self.arch.activations
        n, k = len(batch), V.shape[1]

        # forward R-pass: Ro[l] = R{o_l}, Rh[l] = R{h_l}, shaped (n, k, d_out)
        Ro = [None] * L
        Rh = [None] * L
        for l in range(L):
            d_in1, d_out = self._shapes[l]
            r = (tr.inputs[l] @ Vs[l].reshape(d_in1, k * d_out)).reshape(n, k, d_out)
            if l > 0:
                r += (Rh[l - 1].reshape(n * k, -1) @ Ws[l][:-1]).reshape(n, k, d_out)
            Ro[l] = r
            if l < L - 1:
                Rh[l] = _act_d1(acts[l], tr.preacts[l], tr.hidden[l])[:, None, :] * r

        _, g_out = self._loss_terms(tr.logits, batch)
        gs = self._backward(Ws, tr, g_out)
        if self.loss_name == "cross_entropy":
            p = _softmax(tr.logits)[:, None, :]
            Rg = p * Ro[-1] - p * np.sum(p * Ro[-1], axis=-1, keepdims=True)
        else:
            Rg = Ro[-1]

        # reverse R-pass
        out = [None] * L
        for l in range(L - 1, -1, -1):
            d_in1, d_out = self._shapes[l]
            rw = (tr.inputs[l].T @ Rg.reshape(n, k * d_out)).reshape(d_in1, k, d_out)
            if l > 0:
                d_h = d_in1 - 1
                cross = (Rh[l - 1].reshape(n, k * d_h).T @ gs[l]).reshape(k, d_h, d_out)
                rw[:-1] += cross.transpose(1, 0, 2)
            out[l] = rw.transpose(0, 2, 1).reshape(d_in1 * d_out, k)
            if l > 0:
                W = Ws[l][:-1]
                gh = gs[l] @ W.T
                vt = Vs[l][:-1].transpose(2, 1, 0).reshape(d_out, k * d_h)
                Rgh = (Rg.reshape(n * k, d_out) @ W.T).reshape(n, k, d_h)
                Rgh += (gs[l] @ vt).reshape(n, k, d_h)
                o_prev, h_prev = tr.preacts[l - 1], tr.hidden[l - 1]
                name = acts[l - 1]
                Rg = (_act_d2(name, o_prev, h_prev) * gh)[:, None, :] * Ro[l - 1] \
                    + _act_d1(name, o_prev, h_prev)[:, None, :] * Rgh
        res = np.concatenate(out, axis=0)
        return res[:, 0] if single else res

    def dense_hessian(self, theta, batch: Examples) -> np.ndarray:
        if self.n_params > DENSE_HESSIAN_GUARD:
            raise GuardError(f"{self.n_params} parameters exceeds dense Hessian guard {DENSE_HESSIAN_GUARD}")
        H = self.hvp(theta, batch, np.eye(self.n_params))
        return 0.5 * (H + H.T)


class QuadraticModel:
    """Per-example loss ``0.5 * c * (x @ theta)**2 - y * (x @ theta)``.

    ``c`` is ``Examples.curvature`` (default 1). Examples with ``c == 0`` are
    linear in ``theta``: removing them leaves every Hessian unchanged, which is
    what makes first-order influence estimates exact on this family.
    """

    loss_name = "quadratic"

    def __init__(self, dim: int):
        self.dim = int(dim)

    @property
    def n_params(self) -> int:
        return self.dim

    def init(self, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).normal(scale=0.1, size=self.dim)

    def _parts(self, batch: Examples):
        if len(batch) == 0:
            raise DimensionError("empty batch")
        if batch.X.shape[1] != self.dim:
            raise DimensionError(f"inputs have {batch.X.shape[1]} features, expected {self.dim}")
        c = np.ones(len(batch)) if batch.curvature is None else batch.curvature
        return batch.X, np.asarray(batch.y, dtype=np.float64), c

    def loss(self, theta, batch: Examples) -> float:
        X, y, c = self._parts(batch)
        s = X @ theta
        return float(np.sum(0.5 * c * s * s - y * s))

    def loss_and_grad(self, theta, batch: Examples):
        X, y, c = self._parts(batch)
        s = X @ theta
        return float(np.sum(0.5 * c * s * s - y * s)), X.T @ (c * s - y)

    def grad(self, theta, batch: Examples) -> np.ndarray:
        return self.loss_and_grad(theta, batch)[1]

    def hessian_matrix(self, batch: Examples) -> np.ndarray:
        X, _, c = self._parts(batch)
        return (X * c[:, None]).T @ X

    def hvp(self, theta, batch: Examples, V) -> np.ndarray:
        return self.hessian_matrix(batch) @ np.asarray(V, dtype=np.float64)

    def dense_hessian(self, theta, batch: Examples) -> np.ndarray:
        return self.hessian_matrix(batch)

    def predict(self, theta, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ theta


def make_model(arch: Architecture, loss: str = "cross_entropy") -> MLP:
    return MLP(arch, loss)


# Module-level wrappers taking ParamVector, for callers that carry the layout.

def forward(p: ParamVector, x) -> ForwardTrace:
    return MLP(p.arch).forward(p.values, x)


def loss_and_grad(p: ParamVector, batch: Examples, loss: str = "cross_entropy"):
    return MLP(p.arch, loss).loss_and_grad(p.values, batch)


def hvp(p: ParamVector, batch: Examples, loss: str, v) -> np.ndarray:
    return MLP(p.arch, loss).hvp(p.values, batch, v)


def dense_hessian(p: ParamVector, batch: Examples, loss: str = "cross_entropy") -> np.ndarray:
    return MLP(p.arch, loss).dense_hessian(p.values, batch)


def layer_slices(arch: Architecture) -> Sequence[slice]:
    o = arch.offsets
    return [slice(o[l], o[l + 1]) for l in range(arch.n_layers)]
