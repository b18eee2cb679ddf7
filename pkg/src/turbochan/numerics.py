"""Small complex linear-algebra kernels shared by the rest of the package.

Everything here works on plain ``numpy`` arrays. Matrices are assumed to be
small (at most a few hundred rows), so no effort is spent on blocking or
sparse storage.
"""

import numpy as np
from scipy.integrate import simpson

__all__ = [
    "HERMITIAN_ATOL",
    "PSD_TOL",
    "is_hermitian",
    "hermitian_eig",
    "hermitian_sqrt",
    "hermitian_part",
    "kron",
    "vec",
    "unvec",
    "integrate_periodic",
]

HERMITIAN_ATOL = 1e-12
PSD_TOL = 1e-10
DEFAULT_NODES = 2048


def is_hermitian(A, atol=HERMITIAN_ATOL):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(A), initial=0.0)))
    return bool(np.max(np.abs(A - A.conj().T), initial=0.0) <= atol * scale)


def hermitian_part(A):
    """Return ``(A + A^H) / 2``."""
    A = np.asarray(A)
    return 0.5 * (A + A.conj().T)


def hermitian_eig(A, atol=HERMITIAN_ATOL):
    """Eigendecomposition of a Hermitian matrix.

    Returns
    -------
    w : ndarray
        Real eigenvalues in ascending order.
    U : ndarray
        Unitary matrix whose columns are the eigenvectors.

    Raises
    ------
    ValueError
        If ``A`` is not square or not Hermitian within ``atol``.
    """
    A = np.asarray(A, dtype=complex)
    if not is_hermitian(A, atol):
        raise ValueError("matrix is not Hermitian within tolerance")
    return np.linalg.eigh(hermitian_part(A))


def hermitian_sqrt(A, psd_tol=PSD_TOL, atol=HERMITIAN_ATOL):
    """Principal square root of a Hermitian positive semi-definite matrix.

    Eigenvalues in ``[-psd_tol, 0)`` are treated as round-off and clamped to
    zero; anything more negative is rejected.

    Parameters
    ----------
    A : array_like
        Hermitian PSD matrix.
    psd_tol : float
        Largest tolerated negative eigenvalue magnitude.

    Returns
    -------
    S : ndarray
        Hermitian PSD matrix with ``S @ S == A``.
    """
    w, U = hermitian_eig(A, atol)
    if w.size and w[0] < -psd_tol:
        raise ValueError(
            f"matrix is not positive semi-definite (min eigenvalue {w[0]:.3e})"
        )
    root = np.sqrt(np.clip(w, 0.0, None))
    S = (U * root) @ U.conj().T
    return hermitian_part(S)


def kron(A, B):
    """Kronecker product ``A ⊗ B``."""
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def vec(A):
    """Column-major stacking of a matrix (first column first).

    With this ordering ``vec(A @ X @ B.T) == kron(B, A) @ vec(X)``.
    Stacks of matrices with shape ``(..., rows, cols)`` are vectorized along
    the last two axes.
    """
    A = np.asarray(A)
    if A.ndim < 2:
        return A.reshape(-1)
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (-1,))


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


def integrate_periodic(f, lower=-np.pi, upper=np.pi, nodes=DEFAULT_NODES):
    """Composite Simpson quadrature of ``f`` over ``[lower, upper]``.

    ``f`` must accept a vector of abscissae and may return complex values.
    ``nodes`` is the number of sub-intervals; an odd count is bumped by one
    so that Simpson panels tile the interval exactly.
    """
    if nodes < 2:
        raise ValueError("need at least two quadrature intervals")
    if not lower < upper:
        raise ValueError("lower bound must be below upper bound")
    n = int(nodes) + (int(nodes) % 2)
    x = np.linspace(lower, upper, n + 1)
    y = np.asarray(f(x))
    if np.iscomplexobj(y):
        return complex(simpson(y.real, x=x) + 1j * simpson(y.imag, x=x))
    return complex(simpson(y, x=x))
