import copy
import json

import numpy as np
import pytest

from turbochan.channel import FixedSource, RandomizedSource, SpatialConfig, make_batch
from turbochan.learning import TrainConfig
from turbochan.turbo import (
    ModelChain,
    apply_stage,
    load_chain,
    monotonicity_audit,
    residual_pdf,
    save_chain,
    select_start,
    stage_filters,
    train_universal_chain,
    turbo_infer,
    turbo_train,
    write_trace_csv,
)

SNR = 0.0
CFG = TrainConfig(max_steps=400, window=128, eval_every=50)
SPATIAL = SpatialConfig(M=4, N=8)


@pytest.fixture(scope="module")
def source():
    return FixedSource(SPATIAL, SNR, window=CFG.window, seed=11)


@pytest.fixture(scope="module")
def chain(source):
    return turbo_train(source, 3, CFG, n_windows=160)


@pytest.fixture(scope="module")
def batch(source):
    return make_batch(source.cov, 4096, SNR, seed=123)


def test_chain_has_requested_length(chain):
    assert len(chain) == 3 and "truncated" not in chain.meta
    assert chain.origin == "dedicated" and chain.combining == "arithmetic"


def test_effective_variance_strictly_decreasing(chain):
    v = [chain[0].input_var] + chain.effective_vars
    assert all(b < a * 0.99 for a, b in zip(v, v[1:]))
    assert chain[0].input_var == pytest.approx(1.0, rel=0.05)  # 0 dB, unit channel power


def test_single_stage_is_arithmetic_combining(chain, batch):
    one = ModelChain(chain.stages[:1], window=chain.window)
    Y = batch.Y[: chain.window]
    W_v, W_h = stage_filters(chain[0], Y)
    expect = 0.5 * (W_v @ Y + Y @ W_h.T)
    np.testing.assert_allclose(one.run(Y)[0], expect, atol=1e-12)
    np.testing.assert_array_equal(apply_stage(chain[0], Y, chain.window), one.run(Y)[0])


def test_inference_reproduces_training_nmse(chain, batch):
    res = turbo_infer(chain, batch.Y, SNR, H=batch.H)
    assert res.start == 0 and not res.mismatch
    assert [r["iteration"] for r in res.trace] == [0, 1, 2]
    for row, stage in zip(res.trace, chain.stages):
        assert abs(row["nmse_db"] - stage.nmse_db) < 0.2


def test_inference_is_deterministic(chain, batch):
    a = turbo_infer(chain, batch.Y, SNR).estimate
    b = turbo_infer(chain, batch.Y, SNR).estimate
    np.testing.assert_array_equal(a, b)


def test_tail_window_handled(chain, batch):
    Y = batch.Y[: chain.window + 5]
    X, _ = chain.run(Y)
    assert X.shape == Y.shape and np.all(np.isfinite(X))


def test_select_start_picks_nearest_stage(chain):
    target = chain[1].input_snr_db
    assert select_start(chain, target) == (1, False)
    start, mismatch = select_start(chain, 40.0)
    assert start == len(chain) - 1 and mismatch


def test_mismatch_warns(chain, batch):
    with pytest.warns(RuntimeWarning, match="outside"):
        res = turbo_infer(chain, batch.Y[:256], -20.0)
    assert res.mismatch and res.start == 0


def test_empty_chain_rejected(batch):
    with pytest.raises(ValueError):
        turbo_infer(ModelChain([]), batch.Y, 0.0)


def test_train_rejects_zero_iterations(source):
    with pytest.raises(ValueError):
        turbo_train(source, 0, CFG)


def test_chain_roundtrip(chain, batch, tmp_path):
    save_chain(chain, tmp_path / "c")
    back = load_chain(tmp_path / "c")
    assert len(back) == len(chain) and back.window == chain.window
    assert back.effective_vars == chain.effective_vars
    np.testing.assert_array_equal(back.run(batch.Y)[0], chain.run(batch.Y)[0])


def test_load_rejects_other_combining(chain, tmp_path):
    save_chain(chain, tmp_path / "c")
    path = tmp_path / "c" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["combining"] = "geometric"
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_chain(tmp_path / "c")


def test_trace_csv(chain, batch, tmp_path):
    _, trace = chain.run(batch.Y, H=batch.H)
    write_trace_csv(trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,nmse_db,residual_var"
    assert len(lines) == 1 + len(chain)
    assert float(lines[1].split(",")[1]) == pytest.approx(trace[0]["nmse_db"])


# ---------------------------------------------------------------- audit

def test_audit_passes_trained_chain(chain, batch):
    rep = monotonicity_audit(chain, batch.H, batch.Y)
    assert rep.passed and len(rep.rows) == len(chain)


@pytest.mark.parametrize("scale", [-1.0, 3.0])
def test_audit_flags_corrupted_middle_stage(chain, batch, scale):
    bad = copy.deepcopy(chain)
    bad[1].model_v.W2 *= scale
    bad[1].model_v.b2 *= scale
    rep = monotonicity_audit(bad, batch.H, batch.Y)
    # later stages may also misbehave on out-of-distribution input
    assert not rep.passed and rep.flagged[0] == 1


# ---------------------------------------------------------------- residual PDF

def test_residual_pdf_awgn_variance():
    rng = np.random.default_rng(0)
    H = np.zeros((100_000, 2, 2), complex)
    E = np.sqrt(0.5) * (rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape))
    fit = residual_pdf(E, H)
    assert fit.var == pytest.approx(0.5, rel=0.02)
    assert fit.max_element_kurtosis < 0.1
    assert fit.gaussian()
    assert np.sum(fit.density) * (fit.centers[1] - fit.centers[0]) == pytest.approx(1.0, abs=1e-3)
    assert fit.max_abs_dev < 0.1 * fit.fitted.max()


def test_residual_pdf_detects_heavy_tails():
    rng = np.random.default_rng(1)
    E = rng.laplace(size=(50_000, 2, 2)).astype(complex)
    fit = residual_pdf(E, np.zeros_like(E))
    assert fit.max_element_kurtosis > 2 and not fit.gaussian()


def test_residual_pdf_of_turbo_estimates(chain, batch):
    X, _ = chain.run(batch.Y)
    fit = residual_pdf(X, batch.H)
    assert fit.max_element_kurtosis < 0.3  # 4096 draws: sampling spread of kurtosis ~0.08
    assert fit.var == pytest.approx(chain[-1].effective_var / 2, rel=0.1)


# ---------------------------------------------------------------- universal

def test_universal_chain_trains_fresh_stages_over_the_space():
    src = RandomizedSource(SpatialConfig(M=2, N=4), (0.2, 0.5), (0.7, 1.0), (0.0, 15.0),
                           window=64, seed=3)
    cfg = TrainConfig(max_steps=150, window=64, eval_every=50)
    ch = train_universal_chain(src, 2, cfg, n_windows=60)
    assert ch.origin == "universal" and len(ch) == 2
    assert ch[0].model_v is not ch[1].model_v
    assert ch[0].model_v.meta["steps"] > cfg.max_steps
    assert ch[0].model_v.meta["snr_range"] == (0.0, 15.0)
    assert select_start(ch, 7.0) == (0, False)
    assert select_start(ch, 20.0) == (0, True)
    v = [ch[0].input_var] + ch.effective_vars
    assert v[1] < v[0] and v[2] < v[1]
