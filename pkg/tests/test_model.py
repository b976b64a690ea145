import numpy as np
import pytest

from metaif import model as mm
from metaif.errors import DimensionError, GuardError
from metaif.model import MLP, Architecture, Examples, ParamVector, QuadraticModel, init_params

ARCHS = [
    (Architecture((3, 2), ()), "cross_entropy"),
    (Architecture((4, 5, 3), ("tanh",)), "cross_entropy"),
    (Architecture((3, 4, 4, 2), ("tanh", "tanh")), "cross_entropy"),
    (Architecture((3, 4, 2), ("identity",)), "mse"),
    (Architecture((2, 3, 3, 2), ("tanh", "identity")), "mse"),
]


def make_batch(rng, arch, loss, n=7):
    X = rng.normal(size=(n, arch.layer_sizes[0]))
    if loss == "cross_entropy":
        y = rng.integers(0, arch.layer_sizes[-1], size=n)
    else:
        y = rng.normal(size=(n, arch.layer_sizes[-1]))
    return Examples(X, y)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def independent_forward(theta, arch, x):
    """Plain loop forward pass used as a second implementation."""
    h = np.asarray(x, dtype=float)
    o = 0
    for l, (d_in, d_out) in enumerate(zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])):
        W = theta[o : o + (d_in + 1) * d_out].reshape(d_in + 1, d_out)
        o += (d_in + 1) * d_out
        z = np.array([sum(h[i] * W[i, j] for i in range(d_in)) + W[d_in, j] for j in range(d_out)])
        if l < arch.n_layers - 1:
            z = np.tanh(z) if arch.activations[l] == "tanh" else z
        h = z
    return h


class TestArchitecture:
    def test_parameter_count(self):
        arch = Architecture((20, 12, 5), ("tanh",))
        assert arch.n_params == 21 * 12 + 13 * 5

    def test_rejects_bad_activation(self):
        with pytest.raises(ValueError):
            Architecture((3, 4, 2), ("sigmoid",))

    def test_activation_count(self):
        with pytest.raises(ValueError):
            Architecture((3, 4, 2), ())

    def test_roundtrip(self):
        arch = Architecture((3, 4, 2), ("relu",))
        assert Architecture.from_dict(arch.to_dict()) == arch


class TestParamVector:
    def test_length_checked(self):
        with pytest.raises(DimensionError):
            ParamVector(Architecture((2, 2), ()), np.zeros(5))

    def test_layer_view(self):
        arch = Architecture((2, 3, 1), ("tanh",))
        p = init_params(arch, 0)
        assert p.layer(0).shape == (3, 3)
        assert p.layer(1).shape == (4, 1)
        np.testing.assert_array_equal(p.layer(0)[-1], 0.0)

    def test_immutable(self):
        p = init_params(Architecture((2, 2), ()), 0)
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_init_deterministic_and_bounded(self):
        arch = Architecture((20, 12, 5), ("tanh",))
        a, b = init_params(arch, 3), init_params(arch, 3)
        np.testing.assert_array_equal(a.values, b.values)
        s = np.sqrt(6 / 32)
        assert np.all(np.abs(a.layer(0)) <= s)


class TestForward:
    def test_identity_layer(self):
        arch = Architecture((2, 2), ())
        theta = np.concatenate([np.eye(2), np.zeros((1, 2))]).reshape(-1)
        np.testing.assert_allclose(mm.forward(ParamVector(arch, theta), [1, 2]).logits, [[1, 2]])

    def test_zero_weights(self):
        arch = Architecture((3, 4, 2), ("tanh",))
        tr = mm.forward(ParamVector(arch, np.zeros(arch.n_params)), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(tr.logits, 0.0)

    def test_stacked_identity_is_identity_map(self):
        arch = Architecture((3, 3, 3), ("identity",))
        layer = np.concatenate([np.eye(3), np.zeros((1, 3))]).reshape(-1)
        theta = np.concatenate([layer, layer])
        x = np.array([0.3, -1.0, 2.0])
        np.testing.assert_allclose(MLP(arch).forward(theta, x).logits[0], x)

    def test_matches_independent_implementation(self):
        arch = Architecture((2, 3, 2), ("tanh",))
        theta = init_params(arch, 7).values
        np.testing.assert_allclose(MLP(arch).forward(theta, [1.0, 0.0]).logits[0],
                                   independent_forward(theta, arch, [1.0, 0.0]), rtol=1e-12)

    def test_trace_shapes(self):
        arch = Architecture((4, 5, 3), ("relu",))
        tr = MLP(arch).forward(init_params(arch, 0).values, np.ones((6, 4)))
        assert [a.shape for a in tr.inputs] == [(6, 5), (6, 6)]
        assert [o.shape for o in tr.preacts] == [(6, 5), (6, 3)]

    def test_input_dimension_mismatch(self):
        arch = Architecture((4, 3), ())
        with pytest.raises(DimensionError):
            MLP(arch).forward(np.zeros(arch.n_params), np.ones(3))


class TestLossAndGrad:
    def test_mse_perfect_prediction(self):
        arch = Architecture((2, 2), ())
        theta = np.concatenate([np.eye(2), np.zeros((1, 2))]).reshape(-1)
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        f, g = MLP(arch, "mse").loss_and_grad(theta, Examples(X, X.copy()))
        assert f == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_uniform_logits_cross_entropy(self):
        arch = Architecture((3, 4), ())
        batch = Examples(np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
        f = MLP(arch).loss(np.zeros(arch.n_params), batch)
        assert f == pytest.approx(5 * np.log(4))

    def test_loss_is_sum(self, rng):
        arch = Architecture((3, 4, 2), ("tanh",))
        net = MLP(arch)
        theta = init_params(arch, 0).values
        batch = make_batch(rng, arch, "cross_entropy", n=6)
        parts = sum(net.loss(theta, batch.subset([i])) for i in range(6))
        assert net.loss(theta, batch) == pytest.approx(parts, rel=1e-12)

    @pytest.mark.parametrize("arch,loss", ARCHS)
    def test_gradient_matches_finite_differences(self, rng, arch, loss):
        net = MLP(arch, loss)
        theta = rng.normal(scale=0.5, size=arch.n_params)
        batch = make_batch(rng, arch, loss)
        _, g = net.loss_and_grad(theta, batch)
        g_fd = fd_grad(lambda t: net.loss(t, batch), theta)
        assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) < 1e-5

    def test_empty_batch(self):
        arch = Architecture((2, 2), ())
        with pytest.raises(DimensionError):
            MLP(arch).loss(np.zeros(arch.n_params), Examples(np.zeros((0, 2)), np.zeros(0, int)))

    def test_label_out_of_range(self):
        arch = Architecture((2, 2), ())
        with pytest.raises(DimensionError):
            MLP(arch).loss(np.zeros(arch.n_params), Examples(np.ones((1, 2)), np.array([2])))


class TestHvp:
    def test_zero_direction(self, rng):
        arch = Architecture((3, 4, 2), ("tanh",))
        batch = make_batch(rng, arch, "cross_entropy")
        out = MLP(arch).hvp(init_params(arch, 0).values, batch, np.zeros(arch.n_params))
        np.testing.assert_array_equal(out, 0.0)

    def test_linear_mse_matches_explicit_hessian(self, rng):
        arch = Architecture((3, 2), ())
        X = rng.normal(size=(8, 3))
        batch = Examples(X, rng.normal(size=(8, 2)))
        Xb = np.hstack([X, np.ones((8, 1))])
        # rows of W index inputs, columns outputs: H = (Xb^T Xb) kron I
        H = np.kron(Xb.T @ Xb, np.eye(2))
        net = MLP(arch, "mse")
        theta = rng.normal(size=arch.n_params)
        v = rng.normal(size=arch.n_params)
        np.testing.assert_allclose(net.hvp(theta, batch, v), H @ v, rtol=1e-12)
        np.testing.assert_allclose(net.dense_hessian(theta, batch), H, atol=1e-12)

    @pytest.mark.parametrize("arch,loss", ARCHS)
    def test_matches_gradient_differences(self, rng, arch, loss):
        net = MLP(arch, loss)
        theta = rng.normal(scale=0.5, size=arch.n_params)
        batch = make_batch(rng, arch, loss)
        v = rng.normal(size=arch.n_params)
        eps = 1e-5
        fd = (net.grad(theta + eps * v, batch) - net.grad(theta - eps * v, batch)) / (2 * eps)
        assert np.linalg.norm(net.hvp(theta, batch, v) - fd) / np.linalg.norm(fd) < 1e-4

    def test_block_directions(self, rng):
        arch = Architecture((3, 4, 2), ("tanh",))
        net = MLP(arch)
        theta = rng.normal(size=arch.n_params)
        batch = make_batch(rng, arch, "cross_entropy")
        V = rng.normal(size=(arch.n_params, 3))
        cols = np.column_stack([net.hvp(theta, batch, V[:, j]) for j in range(3)])
        np.testing.assert_allclose(net.hvp(theta, batch, V), cols, rtol=1e-12, atol=1e-14)


class TestDenseHessian:
    @pytest.mark.parametrize("arch,loss", ARCHS)
    def test_symmetric_and_consistent(self, rng, arch, loss):
        net = MLP(arch, loss)
        theta = rng.normal(scale=0.5, size=arch.n_params)
        batch = make_batch(rng, arch, loss)
        H = net.dense_hessian(theta, batch)
        assert np.max(np.abs(H - H.T)) < 1e-9
        v = rng.normal(size=arch.n_params)
        np.testing.assert_allclose(H @ v, net.hvp(theta, batch, v), rtol=1e-10, atol=1e-10)

    def test_guard(self, monkeypatch):
        monkeypatch.setattr(mm, "DENSE_HESSIAN_GUARD", 10)
        arch = Architecture((4, 3), ())
        with pytest.raises(GuardError):
            MLP(arch).dense_hessian(np.zeros(arch.n_params), Examples(np.ones((1, 4)), np.array([0])))


class TestQuadraticModel:
    def test_gradient_and_hessian(self, rng):
        qm = QuadraticModel(4)
        batch = Examples(rng.normal(size=(6, 4)), rng.normal(size=6), rng.uniform(0, 2, size=6))
        theta = rng.normal(size=4)
        g_fd = fd_grad(lambda t: qm.loss(t, batch), theta)
        np.testing.assert_allclose(qm.grad(theta, batch), g_fd, rtol=1e-7)
        H = qm.dense_hessian(theta, batch)
        np.testing.assert_allclose(H, (batch.X * batch.curvature[:, None]).T @ batch.X)

    def test_zero_curvature_is_linear(self, rng):
        qm = QuadraticModel(3)
        batch = Examples(rng.normal(size=(2, 3)), rng.normal(size=2), np.zeros(2))
        np.testing.assert_array_equal(qm.dense_hessian(None, batch), 0.0)


class TestParamVectorWrappers:
    def test_wrappers_match_mlp(self, rng):
        arch = Architecture((3, 4, 2), ("tanh",))
        p = init_params(arch, 1)
        batch = make_batch(rng, arch, "cross_entropy")
        net = MLP(arch)
        f, g = mm.loss_and_grad(p, batch)
        assert f == net.loss(p.values, batch)
        v = rng.normal(size=arch.n_params)
        np.testing.assert_allclose(mm.hvp(p, batch, "cross_entropy", v), net.hvp(p.values, batch, v))
        assert mm.dense_hessian(p, batch).shape == (arch.n_params, arch.n_params)
