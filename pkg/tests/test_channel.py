import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import jv

from turbochan.channel import (
    CHUNK,
    ChannelBatch,
    CovarianceSet,
    FixedSource,
    RandomizedSource,
    SpatialConfig,
    build_covariances,
    correlation_matrix,
    laplacian_mass,
    load_batch,
    make_batch,
    noise_power,
    observe,
    sample_channels,
    save_batch,
    spatial_correlation,
    stack_subspaces,
    unstack_subspaces,
    white_channels,
)
from turbochan.numerics import hermitian_eig, kron, vec

SPREAD_V = np.pi / 180
SPREAD_H = np.pi / 90


def bessel_oracle(lag, spread, doa, terms=400):
    """Correlation at a signed offset (wavelengths) from the Jacobi-Anger series.

    exp(j x sin(doa + phi)) = sum_k J_k(x) exp(j k (doa + phi)); the Laplacian
    weight then integrates in closed form term by term.
    """
    c = np.sqrt(2) / spread
    k = np.arange(-terms, terms + 1)
    weight = 2 * c * (1 - (-1.0) ** np.abs(k) * np.exp(-c * np.pi)) / (c**2 + k**2)
    series = jv(k, 2 * np.pi * lag) * np.exp(1j * k * doa) * weight
    return np.sum(series) / (np.sqrt(2) * spread)


# ---------------------------------------------------------------- correlation

@pytest.mark.parametrize("spread", [SPREAD_V, SPREAD_H, 0.3])
def test_zero_lag_equals_laplacian_mass(spread):
    val = spatial_correlation(3, 3, spread, np.deg2rad(20))
    assert abs(val - laplacian_mass(spread)) < 1e-9
    assert abs(val.imag) < 1e-12


def test_zero_lag_closed_form_value():
    assert laplacian_mass(SPREAD_H) == pytest.approx(1 - np.exp(-np.sqrt(2) * 90), abs=0)


@pytest.mark.parametrize("spread,doa", [(SPREAD_V, np.deg2rad(50)), (SPREAD_H, np.deg2rad(20)),
                                        (0.2, np.deg2rad(-40)), (0.05, np.deg2rad(70))])
@pytest.mark.parametrize("lag", [0.5, 1.5, 3.5, 7.5, -2.0])
def test_correlation_matches_bessel_series(spread, doa, lag):
    val = spatial_correlation(0, 0, spread, doa, spacing=1.0, nodes=2048) if lag == 0 else \
        complex(correlation_matrix(2, spread, doa, spacing=lag)[1, 0])
    assert abs(val - bessel_oracle(lag, spread, doa)) < 1e-10


def test_correlation_hermitian_in_indices():
    rng = np.random.default_rng(3)
    for _ in range(5):
        i, j = rng.integers(0, 16, 2)
        a = spatial_correlation(i, j, SPREAD_H, np.deg2rad(20))
        b = spatial_correlation(j, i, SPREAD_H, np.deg2rad(20))
        assert abs(a - np.conj(b)) < 1e-13


def test_correlation_decays_with_distance():
    r00 = spatial_correlation(0, 0, SPREAD_H, np.deg2rad(20))
    r07 = spatial_correlation(0, 7, SPREAD_H, np.deg2rad(20))
    assert abs(r07) < r00.real


def test_default_nodes_converged_for_reference_spreads():
    for spread, doa in ((SPREAD_V, np.deg2rad(50)), (SPREAD_H, np.deg2rad(20))):
        a = correlation_matrix(16, spread, doa, nodes=2048)
        b = correlation_matrix(16, spread, doa, nodes=4096)
        assert np.max(np.abs(a - b)) < 1e-8


def test_rejects_bad_spread():
    with pytest.raises(ValueError):
        spatial_correlation(0, 1, 0.0, 0.3)


# ---------------------------------------------------------------- config / covariances

@pytest.mark.parametrize("bad", [dict(M=0), dict(spread_v=0), dict(spacing=-1),
                                 dict(doa_h=np.pi / 2), dict(doa_v=0.0)])
def test_spatial_config_validation(bad):
    with pytest.raises(ValueError):
        SpatialConfig(**bad)


def test_single_element_covariance():
    cov = build_covariances(SpatialConfig(M=1, N=2))
    assert cov.R_v.shape == (1, 1)
    assert abs(cov.R_v[0, 0] - laplacian_mass(SPREAD_V)) < 1e-9


def test_reference_covariances_psd_before_clamp():
    cfg = SpatialConfig()
    for L, spread, doa in ((cfg.M, cfg.spread_v, cfg.doa_v), (cfg.N, cfg.spread_h, cfg.doa_h)):
        w, _ = hermitian_eig(correlation_matrix(L, spread, doa), atol=1e-10)
        assert w.min() >= -1e-10


def test_covariance_structure():
    cov = build_covariances(SpatialConfig(M=2, N=2), include_full=True)
    np.testing.assert_array_equal(cov.R_full, kron(cov.R_h, cov.R_v))
    for R in (cov.R_v, cov.R_h):
        np.testing.assert_allclose(R, R.conj().T, atol=1e-14)
        assert np.ptp(np.diag(R).real) < 1e-12


def test_full_covariance_memory_guard():
    with pytest.raises(ValueError):
        build_covariances(SpatialConfig(M=64, N=128), include_full=True)


@settings(max_examples=20, deadline=None)
@given(M=st.integers(1, 10), doa=st.floats(0.1, 3.0), spread=st.floats(0.01, 1.0))
def test_covariance_psd_property(M, doa, spread):
    R = correlation_matrix(M, spread, doa)
    assert np.linalg.eigvalsh(R).min() >= -1e-10


# ---------------------------------------------------------------- sampling

def test_white_channels_unit_power():
    H = sample_channels(CovarianceSet.white(2, 3), 100_000, seed=5)
    assert np.mean(np.abs(H) ** 2) == pytest.approx(1.0, abs=0.02)


def test_coloring_matches_kronecker_form():
    cov = build_covariances(SpatialConfig(M=4, N=8))
    H = sample_channels(cov, 3, seed=11)
    Hw = white_channels(4, 8, 3, seed=11)
    expect = vec(Hw) @ kron(cov.sqrt_h, cov.sqrt_v).T
    np.testing.assert_allclose(vec(H), expect, atol=1e-10)


def test_empirical_covariance_matches_kronecker():
    cov = build_covariances(SpatialConfig(M=2, N=2, spread_v=0.3, spread_h=0.5),
                            include_full=True)
    h = vec(sample_channels(cov, 200_000, seed=2))
    C = h.T @ h.conj() / h.shape[0]
    assert np.linalg.norm(C - cov.R_full) / np.linalg.norm(cov.R_full) < 0.05


def test_channel_power_matches_diagonal():
    cov = build_covariances(SpatialConfig(M=4, N=4))
    H = sample_channels(cov, 100_000, seed=9)
    diag = np.real(np.outer(np.diag(cov.R_v), np.diag(cov.R_h)))
    np.testing.assert_allclose(np.mean(np.abs(H) ** 2, axis=0), diag, rtol=0.05)


def test_sampling_is_deterministic_and_chunk_stable():
    cov = build_covariances(SpatialConfig(M=2, N=4))
    a = sample_channels(cov, 5000, seed=3)
    b = sample_channels(cov, 5000, seed=3)
    np.testing.assert_array_equal(a, b)
    # draws are chunked, so a draw ending on a chunk boundary is a prefix
    np.testing.assert_array_equal(sample_channels(cov, CHUNK, seed=3), a[:CHUNK])
    assert not np.array_equal(a, sample_channels(cov, 5000, seed=4))


def test_sample_rejects_empty():
    with pytest.raises(ValueError):
        sample_channels(CovarianceSet.white(2, 2), 0, seed=0)


# ---------------------------------------------------------------- noise

def test_noise_power_convention():
    assert noise_power(0) == 1.0
    assert noise_power(10) == pytest.approx(0.1)
    assert noise_power(np.inf) == 0.0
    with pytest.raises(ValueError):
        noise_power(np.nan)


def test_ls_nmse_at_zero_db():
    cov = build_covariances(SpatialConfig(M=4, N=8))
    b = make_batch(cov, 100_000, 0.0, seed=1)
    nmse = 10 * np.log10(np.sum(np.abs(b.Y - b.H) ** 2) / np.sum(np.abs(b.H) ** 2))
    assert abs(nmse) < 0.1


def test_noiseless_observation():
    H = sample_channels(CovarianceSet.white(2, 2), 10, seed=0)
    b = observe(H, np.inf, seed=0)
    np.testing.assert_array_equal(b.Y, b.H)
    assert b.N0 == 0.0


@pytest.mark.parametrize("snr", [0.0, 5.0, 10.0, 15.0])
def test_noise_calibration(snr):
    H = np.zeros((100_000, 2, 2), dtype=complex)
    b = observe(H, snr, seed=7)
    assert np.var(b.Z) == pytest.approx(noise_power(snr), rel=0.02)
    # real and imaginary parts each carry half
    assert np.var(b.Z.real) == pytest.approx(noise_power(snr) / 2, rel=0.02)


def test_noise_independent_of_channel_stream():
    cov = CovarianceSet.white(2, 2)
    H = sample_channels(cov, 100, seed=1)
    a = observe(H, 0.0, seed=1)
    b = observe(2 * H, 0.0, seed=1)
    np.testing.assert_allclose(a.Z, b.Z, atol=1e-14)


# ---------------------------------------------------------------- views / io

def test_stack_views():
    Y = np.arange(6).reshape(2, 3)
    v, h = stack_subspaces(Y)
    np.testing.assert_array_equal(v, Y)
    np.testing.assert_array_equal(h, Y.T)
    np.testing.assert_array_equal(unstack_subspaces(v, h), Y)
    assert v[1, 2] == h[2, 1]


def test_batch_roundtrip(tmp_path):
    cov = build_covariances(SpatialConfig(M=2, N=3))
    b = make_batch(cov, 17, 5.0, seed=42)
    path = tmp_path / "b.tchb"
    save_batch(b, path)
    c = load_batch(path)
    np.testing.assert_array_equal(c.H, b.H)
    np.testing.assert_array_equal(c.Y, b.Y)
    assert (c.N0, c.seed, c.K) == (b.N0, 42, 17)
    assert c.snr_db == pytest.approx(5.0)


def test_batch_file_layout(tmp_path):
    H = np.array([[[1 + 2j]]])
    b = ChannelBatch(H=H, Y=H + 0.5, N0=0.25, snr_db=6.0, seed=3)
    path = tmp_path / "one.tchb"
    save_batch(b, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TCHB"
    payload = np.frombuffer(raw[-32:], dtype="<f8")
    np.testing.assert_array_equal(payload, [1.0, 2.0, 1.5, 2.0])


@pytest.mark.parametrize("mutate", ["magic", "truncate"])
def test_batch_load_rejects_corruption(tmp_path, mutate):
    b = make_batch(CovarianceSet.white(2, 2), 3, 0.0, seed=0)
    path = tmp_path / "bad.tchb"
    save_batch(b, path)
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    else:
        raw = raw[:-8]
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_batch(path)


# ---------------------------------------------------------------- sources

def test_fixed_source_windows_are_pure():
    src = FixedSource(SpatialConfig(M=2, N=4), 0.0, window=32, seed=1)
    H1, Y1, N0 = src.window(5)
    src.window(2)
    H2, Y2, _ = src.window(5)
    np.testing.assert_array_equal(H1, H2)
    np.testing.assert_array_equal(Y1, Y2)
    assert H1.shape == (32, 2, 4) and N0 == 1.0


def test_randomized_source_draws_within_ranges():
    src = RandomizedSource(SpatialConfig(M=2, N=4), (-0.5, 0.5), (1.0, 2.0), (0.0, 15.0),
                           window=8, seed=3)
    snrs = []
    for w in range(20):
        cfg, cov, snr = src.scenario(w)
        assert -0.5 <= cfg.doa_h <= 0.5 and 1.0 <= cfg.doa_v <= 2.0
        snrs.append(snr)
        assert src.scenario(w)[2] == snr
    assert 0 <= min(snrs) and max(snrs) <= 15 and np.ptp(snrs) > 5


def test_randomized_source_rejects_empty_range():
    with pytest.raises(ValueError):
        RandomizedSource(SpatialConfig(), (1.0, 0.0), (1.0, 2.0), (0, 15))
