"""Spatial covariance synthesis and correlated Rayleigh channel sampling.

The array is an ``M x N`` grid (``M`` vertical, ``N`` horizontal elements).
Each 1D factor uses a truncated Laplacian power-angle profile; the full
covariance is the Kronecker product ``R_h ⊗ R_v``. Channel stacks have shape
``(K, M, N)``.
"""

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import toeplitz

from .numerics import (
    DEFAULT_NODES,
    PSD_TOL,
    hermitian_eig,
    hermitian_sqrt,
    integrate_periodic,
    kron,
)

__all__ = [
    "SpatialConfig",
    "CovarianceSet",
    "ChannelBatch",
    "spatial_correlation",
    "correlation_matrix",
    "laplacian_mass",
    "build_covariances",
    "sample_channels",
    "observe",
    "make_batch",
    "noise_power",
    "stack_subspaces",
    "unstack_subspaces",
    "save_batch",
    "load_batch",
    "FixedSource",
    "RandomizedSource",
]

# RNG stream identifiers; channel and noise draws never share a stream.
STREAM_CHANNEL = 0
STREAM_NOISE = 1
STREAM_SCENARIO = 2
CHUNK = 4096

MAX_FULL_DIM = 4096
_GRADE_POWER = 3


@dataclass(frozen=True)
class SpatialConfig:
    """Geometry and angular statistics of a 2D array.

    Angles are in radians. ``doa_v`` is measured from the array axis of the
    vertical ULA, hence the ``(0, pi)`` range.
    """

    M: int = 8
    N: int = 16
    spread_v: float = np.pi / 180
    spread_h: float = np.pi / 90
    doa_v: float = np.deg2rad(50.0)
    doa_h: float = np.deg2rad(20.0)
    spacing: float = 0.5

    def __post_init__(self):
        if int(self.M) < 1 or int(self.N) < 1:
            raise ValueError("array dimensions must be positive")
        if self.spread_v <= 0 or self.spread_h <= 0:
            raise ValueError("angular spreads must be positive")
        if self.spacing <= 0:
            raise ValueError("element spacing must be positive")
        if not -np.pi / 2 < self.doa_h < np.pi / 2:
            raise ValueError("horizontal DoA must lie in (-pi/2, pi/2)")
        if not 0 < self.doa_v < np.pi:
            raise ValueError("vertical DoA must lie in (0, pi)")

    def replace(self, **changes):
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return SpatialConfig(**values)


@dataclass(frozen=True)
class CovarianceSet:
    R_v: np.ndarray
    R_h: np.ndarray
    R_full: np.ndarray = field(default=None, repr=False)

    @property
    def M(self):
        return self.R_v.shape[0]

    @property
    def N(self):
        return self.R_h.shape[0]

    @cached_property
    def sqrt_v(self):
        return hermitian_sqrt(self.R_v)

    @cached_property
    def sqrt_h(self):
        return hermitian_sqrt(self.R_h)

    def full(self):
        """Full ``MN x MN`` covariance, computed on demand if not stored."""
        if self.R_full is not None:
            return self.R_full
        return kron(self.R_h, self.R_v)

    @classmethod
    def white(cls, M, N):
        return cls(np.eye(M, dtype=complex), np.eye(N, dtype=complex))


def laplacian_mass(spread):
    """Probability mass of the Laplacian profile kept inside ``[-pi, pi]``."""
    return 1.0 - np.exp(-np.sqrt(2.0) * np.pi / spread)


def _lag_correlation(lags, spread, doa, nodes):
    """Correlation for signed element offsets ``lags`` (in wavelengths)."""
    c = np.sqrt(2.0) / spread
    p = _GRADE_POWER

    # phi = +-pi s^p clusters the nodes around the cusp of the profile at 0
    def integrand(s, lag):
        jac = np.pi * p * s ** (p - 1)
        out = 0.0
        for sign in (1.0, -1.0):
            phi = sign * np.pi * s**p
            out = out + np.exp(-c * np.abs(phi) + 2j * np.pi * lag * np.sin(doa + phi))
        return out * jac / (np.sqrt(2.0) * spread)

    return np.array([
        integrate_periodic(lambda s, lag=lag: integrand(s, lag), 0.0, 1.0, nodes)
        for lag in np.atleast_1d(np.asarray(lags, dtype=float))
    ])


def spatial_correlation(i, j, spread, doa, spacing=0.5, nodes=DEFAULT_NODES):
    """Correlation between elements ``i`` and ``j`` of a uniform linear array.

    The element offset is signed, ``(i - j) * spacing`` wavelengths, which
    makes the result Hermitian in ``(i, j)``.
    """
    if spread <= 0:
        raise ValueError("angular spread must be positive")
    return complex(_lag_correlation([(i - j) * spacing], spread, doa, nodes)[0])


def correlation_matrix(L, spread, doa, spacing=0.5, nodes=DEFAULT_NODES):
    """``L x L`` Hermitian Toeplitz correlation matrix of a ULA."""
    if spread <= 0:
        raise ValueError("angular spread must be positive")
    r = _lag_correlation(np.arange(L) * spacing, spread, doa, nodes)
    return toeplitz(r, r.conj())


def _checked_psd(R):
    w, U = hermitian_eig(R, atol=1e-10)
    if w[0] < -PSD_TOL:
        raise ValueError(f"covariance not PSD (min eigenvalue {w[0]:.3e})")
    if w[0] < 0:
        R = (U * np.clip(w, 0.0, None)) @ U.conj().T
        R = 0.5 * (R + R.conj().T)
    return R


def build_covariances(cfg, include_full=False, nodes=DEFAULT_NODES):
    """Vertical, horizontal and (optionally) full covariance for ``cfg``."""
    R_v = _checked_psd(correlation_matrix(cfg.M, cfg.spread_v, cfg.doa_v, cfg.spacing, nodes))
    R_h = _checked_psd(correlation_matrix(cfg.N, cfg.spread_h, cfg.doa_h, cfg.spacing, nodes))
    R_full = None
    if include_full:
        if cfg.M * cfg.N > MAX_FULL_DIM:
            raise ValueError(
                f"full covariance of size {cfg.M * cfg.N} exceeds {MAX_FULL_DIM}"
            )
        R_full = kron(R_h, R_v)
    return CovarianceSet(R_v, R_h, R_full)


def _complex_normal(rng, shape, power=1.0):
    scale = np.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _chunked_normal(seed, stream, K, shape, power=1.0):
    # Chunk-indexed streams keep draws independent of how work is split.
    out = np.empty((K,) + shape, dtype=complex)
    for c, start in enumerate(range(0, K, CHUNK)):
        stop = min(K, start + CHUNK)
        rng = np.random.default_rng([int(seed), stream, c])
        out[start:stop] = _complex_normal(rng, (stop - start,) + shape, power)
    return out


def white_channels(M, N, K, seed):
    """i.i.d. unit-power circular Gaussian matrices, shape ``(K, M, N)``."""
    return _chunked_normal(seed, STREAM_CHANNEL, K, (M, N))


def color_channels(cov, H_w):
    """Apply ``R_v^0.5 H_w (R_h^0.5)^T`` to a stack of white matrices."""
    return cov.sqrt_v @ H_w @ cov.sqrt_h.T


def sample_channels(cov, K, seed):
    """Draw ``K`` correlated Rayleigh channels, shape ``(K, M, N)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return color_channels(cov, white_channels(cov.M, cov.N, K, seed))


def noise_power(snr_db):
    """Per-element complex noise power for unit channel power."""
    if np.isposinf(snr_db):
        return 0.0
    if not np.isfinite(snr_db):
        raise ValueError("SNR must be finite or +inf")
    return float(10.0 ** (-snr_db / 10.0))


@dataclass
class ChannelBatch:
    """Channels ``H``, observations ``Y = H + Z`` and the noise power ``N0``."""

    H: np.ndarray
    Y: np.ndarray
    N0: float
    snr_db: float
    seed: int

    @property
    def K(self):
        return self.H.shape[0]

    @property
    def Z(self):
        return self.Y - self.H


def observe(H, snr_db, seed):
    """Add circular AWGN of power ``10**(-snr_db/10)`` to a channel stack."""
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[None]
    N0 = noise_power(snr_db)
    if N0 == 0.0:
        Y = H.copy()
    else:
        Y = H + _chunked_normal(seed, STREAM_NOISE, H.shape[0], H.shape[1:], N0)
    return ChannelBatch(H=H, Y=Y, N0=N0, snr_db=float(snr_db), seed=int(seed))


def make_batch(cov, K, snr_db, seed):
    return observe(sample_channels(cov, K, seed), snr_db, seed)


def stack_subspaces(Y):
    """Vertical view (columns are M-vectors) and horizontal view (transpose)."""
    Y = np.asarray(Y)
    return Y, np.swapaxes(Y, -1, -2)


def unstack_subspaces(vertical, horizontal=None):
    if horizontal is None:
        return vertical
    return np.swapaxes(horizontal, -1, -2)


_BATCH_MAGIC = b"TCHB"
_BATCH_VERSION = 1
_BATCH_HEADER = struct.Struct("<4sIIIQdQ")


def save_batch(batch, path):
    """Write a batch: little-endian header, then (re, im) float64 pairs for H then Y."""
    K, M, N = batch.H.shape
    header = _BATCH_HEADER.pack(
        _BATCH_MAGIC, _BATCH_VERSION, M, N, K, float(batch.N0), int(batch.seed)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(batch.H, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(batch.Y, dtype="<c16").tobytes())


def load_batch(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _BATCH_HEADER.size:
        raise ValueError("file too short for a batch header")
    magic, version, M, N, K, N0, seed = _BATCH_HEADER.unpack_from(raw)
    if magic != _BATCH_MAGIC:
        raise ValueError("not a channel batch file")
    if version != _BATCH_VERSION:
        raise ValueError(f"unsupported batch version {version}")
    count = K * M * N
    body = np.frombuffer(raw, dtype="<c16", offset=_BATCH_HEADER.size)
    if body.size != 2 * count:
        raise ValueError("batch payload size does not match header")
    H = body[:count].reshape(K, M, N).astype(complex)
    Y = body[count:].reshape(K, M, N).astype(complex)
    snr_db = np.inf if N0 == 0 else -10.0 * np.log10(N0)
    return ChannelBatch(H=H, Y=Y, N0=float(N0), snr_db=float(snr_db), seed=int(seed))


class FixedSource:
    """Windows of channels drawn at one fixed spatial config and SNR.

    ``window(w)`` is a pure function of ``(seed, w)``, so any subset of
    windows can be regenerated on demand in any order.
    """

    def __init__(self, cfg, snr_db, window=256, seed=0, nodes=DEFAULT_NODES):
        self.cfg = cfg
        self.snr_db = float(snr_db)
        self.window_size = int(window)
        self.seed = int(seed)
        self.cov = build_covariances(cfg, nodes=nodes)

    def describe(self):
        return {
            "doa_h": (self.cfg.doa_h, self.cfg.doa_h),
            "doa_v": (self.cfg.doa_v, self.cfg.doa_v),
            "snr_db": (self.snr_db, self.snr_db),
            "spread_v": self.cfg.spread_v,
            "spread_h": self.cfg.spread_h,
        }

    def scenario(self, w):
        return self.cfg, self.cov, self.snr_db

    def window(self, w):
        cfg, cov, snr_db = self.scenario(w)
        seed = [self.seed, int(w)]
        rng = np.random.default_rng(seed + [STREAM_CHANNEL])
        H = color_channels(cov, _complex_normal(rng, (self.window_size, cfg.M, cfg.N)))
        N0 = noise_power(snr_db)
        rng = np.random.default_rng(seed + [STREAM_NOISE])
        Y = H + _complex_normal(rng, H.shape, N0)
        return H, Y, N0


class RandomizedSource(FixedSource):
    """Windows whose DoAs and SNR are drawn uniformly per window.

    Each window is stationary (one scenario), so its sample covariance is
    meaningful; the scenario changes from window to window.
    """

    def __init__(self, cfg, doa_h_range, doa_v_range, snr_range, window=256,
                 seed=0, nodes=DEFAULT_NODES):
        self.cfg = cfg
        self.doa_h_range = tuple(float(x) for x in doa_h_range)
        self.doa_v_range = tuple(float(x) for x in doa_v_range)
        self.snr_range = tuple(float(x) for x in snr_range)
        for lo, hi in (self.doa_h_range, self.doa_v_range, self.snr_range):
            if hi < lo:
                raise ValueError("empty parameter range")
        self.window_size = int(window)
        self.seed = int(seed)
        self.nodes = nodes
        self.snr_db = 0.5 * sum(self.snr_range)

    def describe(self):
        return {
            "doa_h": self.doa_h_range,
            "doa_v": self.doa_v_range,
            "snr_db": self.snr_range,
            "spread_v": self.cfg.spread_v,
            "spread_h": self.cfg.spread_h,
        }

    def scenario(self, w):
        rng = np.random.default_rng([self.seed, int(w), STREAM_SCENARIO])
        doa_h, doa_v, snr_db = (rng.uniform(*r) for r in
                                (self.doa_h_range, self.doa_v_range, self.snr_range))
        cfg = self.cfg.replace(doa_h=doa_h, doa_v=doa_v)
        return cfg, build_covariances(cfg, nodes=self.nodes), float(snr_db)
