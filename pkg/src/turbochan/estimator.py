"""Closed-form linear channel estimators and their diagnostics.

Filters act on observation stacks of shape ``(..., M, N)``. The vertical
filter ``W_v`` (``M x M``) multiplies columns, the horizontal filter ``W_h``
(``N x N``) multiplies rows. Throughout, ``noise_var`` is the per-element
complex noise power ``N0``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import PSD_TOL, hermitian_part, hermitian_sqrt, kron, unvec, vec

__all__ = [
    "FilterPair",
    "VarianceReport",
    "DeviationTerms",
    "genie_filter",
    "subspace_filters",
    "optimal_subspace_filters",
    "estimate_arithmetic",
    "estimate_geometric",
    "estimate_ls",
    "estimate_vertical",
    "estimate_horizontal",
    "arithmetic_operator",
    "geometric_operator",
    "deviation_metrics",
    "nmse",
    "nmse_linear",
    "analytic_nmse",
    "variance_diagnostics",
    "cost_saving",
    "ordinary_oracle",
]

NMSE_FLOOR_DB = -300.0
ORACLE_MAX_DIM = 16


@dataclass
class FilterPair:
    W_v: np.ndarray
    W_h: np.ndarray
    noise_var: float = float("nan")
    source: str = "closed_form"

    @property
    def M(self):
        return self.W_v.shape[-1]

    @property
    def N(self):
        return self.W_h.shape[-1]

    def row_energies(self):
        """Per-row energy ``sum_m |W[i, m]|^2`` of each filter."""
        return (np.sum(np.abs(self.W_v) ** 2, axis=-1),
                np.sum(np.abs(self.W_h) ** 2, axis=-1))

    def sqrt_pair(self, psd_tol=PSD_TOL):
        W_v, W_h = self.W_v, self.W_h
        if self.source != "closed_form":
            W_v, W_h = hermitian_part(W_v), hermitian_part(W_h)
        try:
            return hermitian_sqrt(W_v, psd_tol), hermitian_sqrt(W_h, psd_tol)
        except ValueError as exc:
            raise ValueError(f"{self.source} filter unusable for geometric combining: {exc}")


def genie_filter(R, noise_var):
    """MMSE weighting ``R (R + noise_var I)^{-1}``.

    With ``noise_var == 0`` the orthogonal projector onto ``range(R)`` is
    returned and a warning is issued.
    """
    R = np.asarray(R, dtype=complex)
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    if noise_var == 0:
        warnings.warn("zero noise variance: returning projector onto range(R)",
                      RuntimeWarning, stacklevel=2)
        return hermitian_part(R @ np.linalg.pinv(R, hermitian=True))
    L = R.shape[-1]
    # R and (R + s I) commute, so the left solve equals the right inverse
    return hermitian_part(np.linalg.solve(R + noise_var * np.eye(L), R))


def subspace_filters(cov, noise_var):
    return FilterPair(
        W_v=genie_filter(cov.R_v, noise_var),
        W_h=genie_filter(cov.R_h, noise_var),
        noise_var=float(noise_var),
        source="closed_form",
    )


def _fold_blocks(C, M, N):
    """Average the diagonal blocks of an ``MN x MN`` matrix both ways.

    Returns the ``M x M`` average over column blocks (vertical view) and the
    ``N x N`` average over row-strided blocks (horizontal view).
    """
    C4 = C.reshape(N, M, N, M)
    vertical = np.einsum("nanb->ab", C4) / N
    horizontal = np.einsum("anbn->ab", C4) / M
    return vertical, horizontal


def optimal_subspace_filters(R, noise_var, M, N, T=None):
    """Best single vertical and horizontal filters for ``vec(X) = T vec(H + Z)``.

    ``R`` is the full channel covariance. Each filter minimizes the mean
    squared error over all slices of its subspace, which is exactly what a
    network trained on that data converges to.
    """
    MN = M * N
    if T is None:
        T = np.eye(MN)
    C_xx = T @ (R + noise_var * np.eye(MN)) @ T.conj().T
    C_hx = R @ T.conj().T
    cv, ch = _fold_blocks(C_xx, M, N)
    dv, dh = _fold_blocks(C_hx, M, N)
    W_v = np.linalg.solve(cv.T, dv.T).T
    W_h = np.linalg.solve(ch.T, dh.T).T
    return FilterPair(W_v, W_h, noise_var=float(noise_var), source="optimal")


def estimate_vertical(fp, Y):
    return fp.W_v @ Y


def estimate_horizontal(fp, Y):
    return Y @ np.swapaxes(fp.W_h, -1, -2)


def _check_dims(fp, Y):
    if Y.shape[-2:] != (fp.M, fp.N):
        raise ValueError(f"observation shape {Y.shape[-2:]} does not match filters ({fp.M}, {fp.N})")


def estimate_arithmetic(fp, Y):
    """``0.5 (W_v Y + Y W_h^T)``."""
    Y = np.asarray(Y)
    _check_dims(fp, Y)
    return 0.5 * (estimate_vertical(fp, Y) + estimate_horizontal(fp, Y))


def estimate_geometric(fp, Y, psd_tol=PSD_TOL):
    """``W_v^0.5 Y (W_h^0.5)^T`` with principal square roots.

    Learned filters are replaced by their Hermitian part first; ``psd_tol``
    bounds the negative eigenvalues that are still clamped to zero.
    """
    Y = np.asarray(Y)
    _check_dims(fp, Y)
    S_v, S_h = fp.sqrt_pair(psd_tol)
    return S_v @ Y @ S_h.T


def estimate_ls(Y):
    return np.array(Y, copy=True)


def arithmetic_operator(fp):
    """Effective ``MN x MN`` operator of arithmetic combining on ``vec(Y)``."""
    return 0.5 * (kron(np.eye(fp.N), fp.W_v) + kron(fp.W_h, np.eye(fp.M)))


def geometric_operator(fp, psd_tol=PSD_TOL):
    S_v, S_h = fp.sqrt_pair(psd_tol)
    return kron(S_h, S_v)


def nmse_linear(estimates, truths):
    estimates = np.asarray(estimates)
    truths = np.asarray(truths)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths differ in shape")
    power = np.sum(np.abs(truths) ** 2)
    if power == 0:
        raise ValueError("truth has zero power")
    return float(np.sum(np.abs(estimates - truths) ** 2) / power)


def nmse(estimates, truths):
    """NMSE in dB; a perfect estimate is reported as ``NMSE_FLOOR_DB``."""
    ratio = nmse_linear(estimates, truths)
    if ratio <= 10 ** (NMSE_FLOOR_DB / 10):
        return NMSE_FLOOR_DB
    return float(10.0 * np.log10(ratio))


def analytic_nmse(T, R, noise_var):
    """Exact NMSE (dB) of the linear estimator ``vec(H_hat) = T vec(Y)``."""
    I = np.eye(R.shape[0])
    E = (T - I) @ R @ (T - I).conj().T + noise_var * (T @ T.conj().T)
    return float(10.0 * np.log10(np.trace(E).real / np.trace(R).real))


@dataclass
class DeviationTerms:
    """Per-sample deviations from the genie estimator and the decomposition.

    ``cross`` is ``Re{y^H L (P + Q) y} / (4 MN)`` and ``identity_residual``
    is ``|D_a - D_g - cross|``.
    """

    D_a: np.ndarray
    D_g: np.ndarray
    cross: np.ndarray
    identity_residual: np.ndarray
    L: np.ndarray
    P: np.ndarray
    Q: np.ndarray


def deviation_metrics(fp, W_genie, Y, psd_tol=PSD_TOL):
    """Deviation of arithmetic and geometric combining from the genie filter.

    Each deviation is the Gram form ``y^H E^H E y / MN`` of the operator
    error ``E``, which is real and non-negative. With Hermitian subspace
    filters the difference obeys
    ``D_a - D_g = Re{y^H L (P + Q) y} / (4 MN)``.
    """
    M, N = fp.M, fp.N
    MN = M * N
    if MN > 4096:
        raise ValueError("deviation metrics need an explicit MN x MN genie filter; array too large")
    W_genie = np.asarray(W_genie)
    if W_genie.shape != (MN, MN):
        raise ValueError("genie filter has wrong dimensions")
    Y = np.asarray(Y)
    single = Y.ndim == 2
    y = vec(Y.reshape((-1, M, N)))  # (K, MN)

    S_v, S_h = fp.sqrt_pair(psd_tol)
    if fp.source == "closed_form":
        W_v, W_h = fp.W_v, fp.W_h
    else:
        W_v, W_h = hermitian_part(fp.W_v), hermitian_part(fp.W_h)
    I_M, I_N = np.eye(M), np.eye(N)
    A = kron(I_N, W_v)
    B = kron(W_h, I_M)
    a = kron(I_N, S_v)
    b = kron(S_h, I_M)

    E_a = 0.5 * (A + B) - W_genie
    E_g = a @ b - W_genie
    L = (a - b) @ (a - b)
    P = A + B - 2.0 * W_genie
    Q = 2.0 * (a @ b - W_genie)

    def quad(Op):
        v = y @ Op.T
        return np.einsum("ki,ki->k", y.conj(), v)

    D_a = np.sum(np.abs(y @ E_a.T) ** 2, axis=1) / MN
    D_g = np.sum(np.abs(y @ E_g.T) ** 2, axis=1) / MN
    cross = quad(L @ (P + Q)).real / (4.0 * MN)
    resid = np.abs(D_a - D_g - cross)
    if single:
        D_a, D_g, cross, resid = D_a[0], D_g[0], cross[0], resid[0]
    return DeviationTerms(D_a, D_g, cross, resid, L, P, Q)


@dataclass
class VarianceReport:
    """Noise-pathway variances after combining, with their analytic model.

    ``x``, ``y``, ``d`` and ``z`` are the normalized coordinates of the
    per-element noise variance: ``z = VAR[Z_a] / sigma^2 = (x + y)/2 + d``
    where ``sigma^2 = N0 / 2``. ``effective`` marks elements where combining
    beats both single subspaces (``z < 2x`` and ``z < 2y``).
    """

    var_a: np.ndarray
    var_v: np.ndarray
    var_h: np.ndarray
    rho: np.ndarray
    rho_expected: np.ndarray
    lower: np.ndarray
    upper: float
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    effective: np.ndarray
    in_bracket: np.ndarray

    @property
    def bracket_fraction(self):
        return float(np.mean(self.in_bracket))

    @property
    def effective_fraction(self):
        return float(np.mean(self.effective))

    @property
    def var_model(self):
        return 0.5 * self.upper * self.z


def variance_diagnostics(fp, batch, upper_slack=0.0):
    """Measure the AWGN share of the combined estimate on ``batch``.

    The filters are applied to the batch's pure noise ``Z = Y - H``, so the
    channel-estimation bias does not enter. ``upper_slack`` widens the upper
    bound multiplicatively to absorb Monte-Carlo noise.
    """
    Z = batch.Z
    _check_dims(fp, Z)
    N0 = float(batch.N0)
    Z_v = estimate_vertical(fp, Z)
    Z_h = estimate_horizontal(fp, Z)
    Z_a = 0.5 * (Z_v + Z_h)
    var_a = np.mean(np.abs(Z_a) ** 2, axis=0)
    var_v = np.mean(np.abs(Z_v) ** 2, axis=0)
    var_h = np.mean(np.abs(Z_h) ** 2, axis=0)

    ev, eh = fp.row_energies()
    x = np.asarray(ev, dtype=float)
    y = np.asarray(eh, dtype=float)
    d = np.real(np.outer(np.diag(fp.W_v), np.diag(fp.W_h).conj()))
    z = 0.5 * (x[:, None] + y[None, :]) + d
    rho = x[:, None] + y[None, :]
    lower = rho * N0 / 4.0
    upper = N0
    effective = (z < 2.0 * x[:, None]) & (z < 2.0 * y[None, :])
    in_bracket = (var_a > lower) & (var_a <= upper * (1.0 + upper_slack))
    return VarianceReport(
        var_a=var_a, var_v=var_v, var_h=var_h, rho=rho, rho_expected=rho.copy(),
        lower=lower, upper=upper, x=x, y=y, d=d, z=z,
        effective=effective, in_bracket=in_bracket,
    )


def cost_saving(M, N):
    """Complexity ratio of full-array over subspace training."""
    if M < 1 or N < 1:
        raise ValueError("array dimensions must be positive")
    M, N = float(M), float(N)
    return M**4 * N**4 / (M * N**4 + N * M**4)


def ordinary_oracle(R_full, noise_var, Y):
    """Full-array MMSE estimate ``unvec(W_genie vec(Y))``; tiny arrays only."""
    Y = np.asarray(Y)
    M, N = Y.shape[-2:]
    if M * N > ORACLE_MAX_DIM:
        warnings.warn(f"ordinary oracle on a {M}x{N} array is expensive",
                      RuntimeWarning, stacklevel=2)
    W = genie_filter(R_full, noise_var)
    return unvec(vec(Y) @ W.T, M, N)
