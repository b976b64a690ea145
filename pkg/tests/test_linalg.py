import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaif.errors import DimensionError, FactorizationError, NotSymmetricError, NumericalError
from metaif.linalg import CholeskySolver, eig_sym, kron_apply, matvec, solve_spd

from conftest import random_spd


class TestMatvec:
    def test_identity(self):
        np.testing.assert_array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])

    def test_zero(self):
        np.testing.assert_array_equal(matvec(np.zeros((2, 2)), [5, 7]), [0, 0])

    def test_hand_product(self):
        np.testing.assert_array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3, 7])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            matvec(np.eye(3), [1, 2])

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            matvec([[np.nan, 0], [0, 1]], [1, 1])


class TestSolveSpd:
    def test_identity(self):
        v = np.array([0.5, -2.0, 3.0])
        np.testing.assert_allclose(solve_spd(np.eye(3), v, 0.0), v)

    def test_diagonal_scaling(self):
        np.testing.assert_allclose(solve_spd(2 * np.eye(2), [4, 6], 0.0), [2, 3])

    def test_damped_residual(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        v = np.array([3.0, 3.0])
        x = solve_spd(m, v, 1.0)
        r = m @ x + x - v
        assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(v)

    def test_non_symmetric(self):
        with pytest.raises(NotSymmetricError):
            solve_spd([[1.0, 2.0], [0.0, 1.0]], [1, 1])

    def test_not_positive_definite(self):
        with pytest.raises(FactorizationError):
            solve_spd(np.diag([1.0, -1.0]), [1, 1])

    def test_damping_rescues_indefinite(self):
        x = solve_spd(np.diag([1.0, -1.0]), [1, 1], damping=2.0)
        np.testing.assert_allclose(x, [1 / 3, 1.0])

    def test_solver_reuses_factor(self, rng):
        m = random_spd(rng, 6)
        s = CholeskySolver(m, 0.5)
        B = rng.normal(size=(6, 3))
        np.testing.assert_allclose((m + 0.5 * np.eye(6)) @ s.solve(B), B, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 12), d=st.floats(0.0, 5.0), seed=st.integers(0, 10_000))
    def test_residual_property(self, n, d, seed):
        rng = np.random.default_rng(seed)
        m = random_spd(rng, n)
        v = rng.normal(size=n)
        x = solve_spd(m, v, d)
        assert np.linalg.norm(matvec(m, x) + d * x - v) <= 1e-9 * max(1.0, np.linalg.norm(v))


class TestEigSym:
    def test_identity(self):
        np.testing.assert_allclose(eig_sym(np.eye(2)).eigenvalues, [1, 1])

    def test_diagonal(self):
        np.testing.assert_allclose(eig_sym(np.diag([2.0, 5.0])).eigenvalues, [2, 5])

    def test_reconstruction(self, rng):
        m = random_spd(rng, 5)
        e = eig_sym(m)
        q = e.eigenvectors
        np.testing.assert_allclose(q.T @ q, np.eye(5), atol=1e-10)
        assert np.linalg.norm(e.reconstruct() - m) <= 1e-8 * np.linalg.norm(m)
        assert np.all(np.diff(e.eigenvalues) >= 0)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), c=st.floats(-10, 10))
    def test_two_by_two_characteristic_roots(self, a, b, c):
        m = np.array([[a, b], [b, c]])
        mean, rad = (a + c) / 2, np.hypot((a - c) / 2, b)
        np.testing.assert_allclose(eig_sym(m).eigenvalues, [mean - rad, mean + rad], atol=1e-10 * max(1, rad))

    def test_non_symmetric(self):
        with pytest.raises(NotSymmetricError):
            eig_sym([[1.0, 1.0], [0.0, 1.0]])


class TestKronApply:
    def test_identity(self, rng):
        v = rng.normal(size=6)
        np.testing.assert_allclose(kron_apply(np.eye(2), np.eye(3), v), v)

    def test_scalar_factors(self, rng):
        v = rng.normal(size=4)
        np.testing.assert_allclose(kron_apply(2 * np.eye(2), 3 * np.eye(2), v), 6 * v)

    def test_explicit_kronecker(self):
        a = np.array([[1.0, 1.0], [0.0, 1.0]])
        v = np.array([1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(kron_apply(a, np.eye(2), v), np.kron(a, np.eye(2)) @ v)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            kron_apply(np.eye(2), np.eye(3), np.ones(5))

    @settings(max_examples=60, deadline=None)
    @given(r1=st.integers(1, 6), c1=st.integers(1, 6), r2=st.integers(1, 6), c2=st.integers(1, 6),
           seed=st.integers(0, 10_000))
    def test_matches_explicit_product(self, r1, c1, r2, c2, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(r1, c1)), rng.normal(size=(r2, c2))
        v = rng.normal(size=c1 * c2)
        np.testing.assert_allclose(kron_apply(a, b, v), np.kron(a, b) @ v, atol=1e-12)
