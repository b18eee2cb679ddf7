import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbochan.numerics import (
    hermitian_eig,
    hermitian_part,
    hermitian_sqrt,
    integrate_periodic,
    is_hermitian,
    kron,
    unvec,
    vec,
)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_psd(rng, n, cond=None):
    A = crandn(rng, n, n)
    U, _ = np.linalg.qr(A)
    if cond is None:
        w = rng.uniform(0.1, 2.0, n)
    else:
        w = np.logspace(0, -np.log10(cond), n)
    return hermitian_part((U * w) @ U.conj().T)


# ---------------------------------------------------------------- sqrt

def test_sqrt_identity():
    np.testing.assert_allclose(hermitian_sqrt(np.eye(4)), np.eye(4), atol=1e-14)


def test_sqrt_diagonal():
    np.testing.assert_allclose(hermitian_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]),
                               atol=1e-14)


def test_sqrt_random_3x3_resquares():
    A = random_psd(np.random.default_rng(1), 3)
    S = hermitian_sqrt(A)
    assert np.linalg.norm(S @ S - A) / np.linalg.norm(A) < 1e-9
    assert is_hermitian(S)
    assert np.linalg.eigvalsh(S).min() >= -1e-12


def test_sqrt_rejects_non_hermitian():
    with pytest.raises(ValueError, match="Hermitian"):
        hermitian_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sqrt_rejects_negative_eigenvalue():
    with pytest.raises(ValueError, match="positive semi-definite"):
        hermitian_sqrt(np.diag([1.0, -1e-6]))


def test_sqrt_clamps_roundoff_negatives():
    S = hermitian_sqrt(np.diag([1.0, -1e-12]))
    np.testing.assert_allclose(S, np.diag([1.0, 0.0]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 2**32 - 1),
       logcond=st.floats(0.0, 8.0))
def test_sqrt_property_conditioned(n, seed, logcond):
    A = random_psd(np.random.default_rng(seed), n, cond=10**logcond)
    S = hermitian_sqrt(A)
    assert np.linalg.norm(S @ S - A) <= 1e-9 * np.linalg.norm(A)


def test_eig_rejects_rectangular():
    with pytest.raises(ValueError):
        hermitian_eig(np.ones((2, 3)))


def test_eig_reconstructs():
    A = random_psd(np.random.default_rng(4), 6)
    w, U = hermitian_eig(A)
    np.testing.assert_allclose((U * w) @ U.conj().T, A, atol=1e-12)
    assert np.all(np.diff(w) >= 0)


# ---------------------------------------------------------------- kron / vec

def test_kron_identities():
    np.testing.assert_array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    B = crandn(np.random.default_rng(0), 3, 2)
    np.testing.assert_allclose(kron(np.array([[2.0]]), B), 2 * B)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_kron_mixed_product_and_associativity(seed):
    rng = np.random.default_rng(seed)
    A, B, C, D = (crandn(rng, 2, 2) for _ in range(4))
    lhs = kron(A, B) @ kron(C, D)
    np.testing.assert_allclose(lhs, kron(A @ C, B @ D), atol=1e-12)
    np.testing.assert_allclose(kron(kron(A, B), C), kron(A, kron(B, C)), atol=1e-12)


def test_vec_column_major():
    np.testing.assert_array_equal(vec(np.array([[1, 3], [2, 4]])), [1, 2, 3, 4])
    np.testing.assert_array_equal(vec(np.array([[5.0]])), [5.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 5), c=st.integers(1, 5))
def test_vec_kron_identity(seed, r, c):
    rng = np.random.default_rng(seed)
    A = crandn(rng, 2, r)
    X = crandn(rng, r, c)
    B = crandn(rng, 3, c)
    np.testing.assert_allclose(vec(A @ X @ B.T), kron(B, A) @ vec(X), atol=1e-12)
    np.testing.assert_array_equal(unvec(vec(X), r, c), X)


def test_vec_batched_matches_loop():
    X = crandn(np.random.default_rng(2), 4, 2, 3)
    batched = vec(X)
    for k in range(4):
        np.testing.assert_array_equal(batched[k], vec(X[k]))
    np.testing.assert_array_equal(unvec(batched, 2, 3), X)


# ---------------------------------------------------------------- quadrature

def test_integrate_constant():
    assert integrate_periodic(lambda x: np.ones_like(x)) == pytest.approx(2 * np.pi, abs=1e-12)


def test_integrate_odd():
    assert abs(integrate_periodic(np.sin)) < 1e-12


def test_integrate_complex():
    val = integrate_periodic(lambda x: np.exp(1j * x) * x, 0.0, 1.0)
    exact = np.exp(1j) * (1 - 1j) - 1  # antiderivative e^{ix}(1 - ix)
    assert abs(val - exact) < 1e-12


@pytest.mark.parametrize("kwargs", [{"nodes": 1}, {"lower": 1.0, "upper": 1.0}])
def test_integrate_rejects(kwargs):
    with pytest.raises(ValueError):
        integrate_periodic(np.cos, **kwargs)


def test_integrate_simpson_order():
    f = lambda x: np.exp(np.cos(x)) * x**2
    exact = integrate_periodic(f, 0.0, 2.0, nodes=1 << 14)
    errs = [abs(integrate_periodic(f, 0.0, 2.0, nodes=n) - exact) for n in (16, 32, 64)]
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_integrate_odd_nodes_bumped():
    f = lambda x: x**3
    assert integrate_periodic(f, 0.0, 1.0, nodes=3) == pytest.approx(0.25, abs=1e-14)
