"""Iterative denoising with a chain of subspace networks.

Every stage holds a vertical and a horizontal network. A stage reads the
current observation window, asks both networks for filters, combines the
two subspace estimates arithmetically, and hands the result to the next
stage as its new observation. Training follows the same order: stage ``i``
is fitted on the output of stages ``0..i-1`` against the unchanged labels.
"""

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .estimator import optimal_subspace_filters
from .learning import (
    collect_stats,
    convergence_check,
    fit,
    forward,
    init_model,
    load_model,
    save_model,
    split_windows,
    source_meta,
)
from .numerics import kron

__all__ = [
    "Stage",
    "ModelChain",
    "InferenceResult",
    "PdfFit",
    "AuditReport",
    "apply_stage",
    "turbo_train",
    "train_universal_chain",
    "turbo_infer",
    "residual_pdf",
    "monotonicity_audit",
    "save_chain",
    "load_chain",
    "write_trace_csv",
]

log = logging.getLogger(__name__)


@dataclass
class Stage:
    model_v: object
    model_h: object
    input_var: float
    effective_var: float
    nmse_db: float
    convergence: dict = field(default_factory=dict)

    @property
    def input_snr_db(self):
        return float(-10.0 * np.log10(self.input_var))


@dataclass
class ModelChain:
    stages: list
    origin: str = "dedicated"
    combining: str = "arithmetic"
    window: int = 256
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]

    @property
    def effective_vars(self):
        return [s.effective_var for s in self.stages]

    def run(self, Y, start=0, stop=None, H=None):
        """Pass ``Y`` through stages ``start..stop-1``; optionally trace errors."""
        X = Y
        trace = []
        for i in range(start, len(self) if stop is None else stop):
            X = apply_stage(self.stages[i], X, self.window)
            if H is not None:
                trace.append(_trace_row(i, X, H))
        return X, trace


def _trace_row(i, X, H):
    err = np.sum(np.abs(X - H) ** 2)
    return {
        "iteration": i,
        "nmse_db": float(10.0 * np.log10(err / np.sum(np.abs(H) ** 2))),
        "residual_var": float(err / H.size),
    }


def _windows(X, window):
    K = X.shape[0]
    return [slice(a, min(K, a + window)) for a in range(0, K, window)]


def _window_covariances(X):
    """Sample covariances of the column and row slices of ``(..., K, M, N)``."""
    K, M, N = X.shape[-3:]
    cov_v = np.einsum("...kmn,...kpn->...mp", X, X.conj()) / (K * N)
    cov_h = np.einsum("...kmn,...kmq->...nq", X, X.conj()) / (K * M)
    herm = lambda C: 0.5 * (C + np.swapaxes(C, -1, -2).conj())
    return herm(cov_v), herm(cov_h)


def stage_filters(stage, X):
    """Filters a stage produces for a single window ``X`` of shape ``(K, M, N)``."""
    cov_v, cov_h = _window_covariances(X)
    return forward(stage.model_v, cov_v), forward(stage.model_h, cov_h)


def apply_stage(stage, X, window=256):
    """Denoise ``X`` (``(K, M, N)``) window by window with one stage."""
    X = np.asarray(X)
    K = X.shape[0]
    full = (K // window) * window
    out = np.empty_like(X, dtype=complex)
    if full:
        Xw = X[:full].reshape((full // window, window) + X.shape[1:])
        cov_v, cov_h = _window_covariances(Xw)
        W_v = forward(stage.model_v, cov_v)[:, None]
        W_h = forward(stage.model_h, cov_h)[:, None]
        out[:full] = (0.5 * (W_v @ Xw + Xw @ np.swapaxes(W_h, -1, -2))).reshape(
            (full,) + X.shape[1:])
    if full < K:
        W_v, W_h = stage_filters(stage, X[full:])
        out[full:] = 0.5 * (W_v @ X[full:] + X[full:] @ W_h.T)
    return out


def _stage_operator(W_v, W_h):
    M, N = W_v.shape[0], W_h.shape[0]
    return 0.5 * (kron(np.eye(N), W_v) + kron(W_h, np.eye(M)))


def _reference_filters(chain, source, windows):
    """Exact best linear subspace filters for each validation window.

    Earlier stages act on a window as a known linear operator ``T``; given
    the window's true covariance the optimal next-stage filters follow in
    closed form.
    """
    refs_v, refs_h = [], []
    for w in windows:
        cfg, cov, snr_db = source.scenario(w)
        H, Y, N0 = source.window(w)
        T = np.eye(cfg.M * cfg.N, dtype=complex)
        X = Y
        for stage in chain.stages:
            W_v, W_h = stage_filters(stage, X)
            X = 0.5 * (W_v @ X + X @ W_h.T)
            T = _stage_operator(W_v, W_h) @ T
        fp = optimal_subspace_filters(cov.full(), N0, cfg.M, cfg.N, T)
        refs_v.append(fp.W_v)
        refs_h.append(fp.W_h)
    return np.array(refs_v), np.array(refs_h)


def _measure(chain, source, windows):
    err = power = count = 0.0
    for w in windows:
        H, Y, _ = source.window(w)
        X, _ = chain.run(Y)
        err += np.sum(np.abs(X - H) ** 2)
        power += np.sum(np.abs(H) ** 2)
        count += H.size
    return err / count, float(10.0 * np.log10(err / power))


def turbo_train(source, iterations, cfg, n_windows=None, origin=None, step_factor=1,
                require_frobenius=False):
    """Train a chain of ``iterations`` stages on windows from ``source``.

    Each stage gets fresh networks fitted to the output of the stages before
    it. A stage whose networks fail the convergence check ends the chain; the
    reason is stored in ``chain.meta["truncated"]``. The Frobenius proximity
    test only gates acceptance when ``require_frobenius`` is set, because the
    optimum of later stages is ill-determined along directions the earlier
    stages have already suppressed.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if origin is None:
        origin = "universal" if hasattr(source, "snr_range") else "dedicated"
    n_windows = n_windows or max(2, 200_000 // cfg.window)
    train_idx, val_idx = split_windows(n_windows, cfg.validation_fraction)
    M, N = source.cfg.M, source.cfg.N
    chain = ModelChain([], origin=origin, window=cfg.window,
                       meta={"source": {k: list(v) if isinstance(v, tuple) else v
                                        for k, v in source.describe().items()},
                             "n_windows": int(n_windows)})
    fit_cfg = cfg.replace(max_steps=cfg.max_steps * step_factor)
    input_var = _measure(chain, source, val_idx)[0]
    for i in range(iterations):
        transform = (lambda w, H, Y: chain.run(Y)[0]) if chain.stages else None
        tr_v, tr_h = collect_stats(source, train_idx, transform)
        va_v, va_h = collect_stats(source, val_idx, transform)
        ref_v, ref_h = _reference_filters(chain, source, val_idx)
        stage_cfg = fit_cfg.replace(seed=cfg.seed * 1000 + i)
        model_v = fit(init_model(M, cfg.init_std, stage_cfg.seed), tr_v, va_v, stage_cfg, ref_v)
        model_h = fit(init_model(N, cfg.init_std, stage_cfg.seed), tr_h, va_h, stage_cfg, ref_h)
        reports = {}
        for name, model in (("v", model_v), ("h", model_h)):
            model.meta.update(source_meta(source, name, i))
            reports[name] = model.meta["convergence"]
        ok = all(r["within_noise"] and r["rows_ok"] and (r["near_reference"] or not require_frobenius)
                 for r in reports.values())
        if not ok:
            reason = f"iteration {i} failed convergence: {reports}"
            log.warning("chain truncated: %s", reason)
            chain.meta["truncated"] = reason
            break
        stage = Stage(model_v, model_h, input_var=float(input_var),
                      effective_var=float("nan"), nmse_db=float("nan"),
                      convergence=reports)
        chain.stages.append(stage)
        stage.effective_var, stage.nmse_db = _measure(chain, source, val_idx)
        log.info("stage %d: input var %.4g -> %.4g (NMSE %.2f dB)",
                 i, input_var, stage.effective_var, stage.nmse_db)
        input_var = stage.effective_var
    return chain


def train_universal_chain(source, iterations, cfg, n_windows=None, step_factor=3):
    """Universal chain: every stage is trained over a randomized scenario space.

    Same stage-by-stage procedure as :func:`turbo_train`, so stage ``i`` learns
    from windows already denoised by stages ``0..i-1`` across the whole
    space. The wider input distribution needs a longer step budget, hence
    ``step_factor``.
    """
    return turbo_train(source, iterations, cfg, n_windows=n_windows, origin="universal",
                       step_factor=step_factor)


@dataclass
class InferenceResult:
    estimate: np.ndarray
    start: int
    trace: list
    mismatch: bool = False


def select_start(chain, snr_est):
    """Stage whose input SNR is nearest to ``snr_est`` (dedicated chains)."""
    if chain.origin == "universal":
        lo, hi = chain.stages[0].model_v.meta.get("snr_range", (-np.inf, np.inf))
        return 0, not (lo <= snr_est <= hi)
    snrs = np.array([s.input_snr_db for s in chain.stages])
    start = int(np.argmin(np.abs(snrs - snr_est)))
    return start, bool(abs(snrs[start] - snr_est) > 1.0)


def turbo_infer(chain, Y, snr_est, H=None):
    """Estimate channels from observations ``Y`` with a trained chain.

    With ``H`` given, the trace holds the NMSE after every applied stage.
    """
    if not len(chain):
        raise ValueError("empty model chain")
    start, mismatch = select_start(chain, snr_est)
    if mismatch:
        warnings.warn(f"SNR estimate {snr_est:.2f} dB is outside the chain's trained range",
                      RuntimeWarning, stacklevel=2)
    X, trace = chain.run(np.asarray(Y), start=start, H=H)
    return InferenceResult(estimate=X, start=start, trace=trace, mismatch=mismatch)


@dataclass
class PdfFit:
    centers: np.ndarray
    density: np.ndarray
    fitted: np.ndarray
    mean: float
    var: float
    max_abs_dev: float
    skewness: float
    excess_kurtosis: float
    element_kurtosis: np.ndarray
    jb_stat: float
    jb_pvalue: float

    @property
    def max_element_kurtosis(self):
        return float(np.max(np.abs(self.element_kurtosis)))

    def gaussian(self, alpha=0.01):
        """Normality at level ``alpha`` of the per-element standardized residuals."""
        return self.jb_pvalue > alpha


def residual_pdf(estimates, truths, bins=101):
    """Histogram of the real part of ``estimates - truths`` with a Gaussian fit.

    ``mean``/``var`` and the histogram describe the pooled residual. Every
    element has its own error variance, so the pooled histogram is a scale
    mixture; normality is therefore judged per element: ``element_kurtosis``
    holds each element's excess kurtosis and the Jarque-Bera test runs on
    residuals standardized per element.
    """
    E = np.real(np.asarray(estimates) - np.asarray(truths))
    if E.ndim == 2:
        E = E[None]
    flat = E.ravel()
    mean = float(flat.mean())
    var = float(flat.var())
    edges = np.linspace(mean - 5 * np.sqrt(var), mean + 5 * np.sqrt(var), bins + 1)
    density, _ = np.histogram(flat, bins=edges, density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    # bins past +-5 sigma are dropped, rescale to the mass actually binned
    density = density * np.mean((flat >= edges[0]) & (flat <= edges[-1]))
    fitted = sps.norm.pdf(centers, mean, np.sqrt(var))

    element_kurt = sps.kurtosis(E, axis=0, fisher=True)
    std = (E - E.mean(axis=0)) / E.std(axis=0)
    jb = sps.jarque_bera(std.ravel())
    return PdfFit(
        centers=centers, density=density, fitted=fitted, mean=mean, var=var,
        max_abs_dev=float(np.max(np.abs(density - fitted))),
        skewness=float(sps.skew(flat)),
        excess_kurtosis=float(sps.kurtosis(flat, fisher=True)),
        element_kurtosis=np.asarray(element_kurt),
        jb_stat=float(jb.statistic), jb_pvalue=float(jb.pvalue),
    )


@dataclass
class AuditReport:
    rows: list
    tol: float

    @property
    def flagged(self):
        return [r["iteration"] for r in self.rows if not r["ok"]]

    @property
    def passed(self):
        return not self.flagged


def monotonicity_audit(chain, H, Y, tol=0.01):
    """Check that no stage increases the channel error of its input.

    Stage ``i`` passes when ``E|X_{i+1} - H|^2 <= (1 + tol) E|X_i - H|^2``.
    """
    rows = []
    X = np.asarray(Y)
    before = float(np.mean(np.abs(X - H) ** 2))
    for i, stage in enumerate(chain.stages):
        X = apply_stage(stage, X, chain.window)
        after = float(np.mean(np.abs(X - H) ** 2))
        rows.append({"iteration": i, "before": before, "after": after,
                     "ok": after <= (1.0 + tol) * before})
        before = after
    return AuditReport(rows, tol)


def save_chain(chain, directory):
    """Write ``manifest.json`` plus one model file per network."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, stage in enumerate(chain.stages):
        names = {"v": f"model_v_{i}.bin", "h": f"model_h_{i}.bin"}
        save_model(stage.model_v, directory / names["v"])
        save_model(stage.model_h, directory / names["h"])
        entries.append({
            "iteration": i,
            "files": names,
            "input_var": stage.input_var,
            "effective_var": stage.effective_var,
            "nmse_db": stage.nmse_db,
            "convergence": stage.convergence,
        })
    manifest = {
        "iterations": len(chain),
        "origin": chain.origin,
        "combining": chain.combining,
        "window": chain.window,
        "stages": entries,
        "meta": chain.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_chain(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("combining") != "arithmetic":
        raise ValueError("only arithmetic combining chains are supported")
    stages = []
    for entry in manifest["stages"]:
        model_v = load_model(directory / entry["files"]["v"])
        model_h = load_model(directory / entry["files"]["h"])
        stages.append(Stage(model_v, model_h, entry["input_var"], entry["effective_var"],
                            entry["nmse_db"], entry.get("convergence", {})))
    if len(stages) != manifest["iterations"]:
        raise ValueError("manifest iteration count does not match its stage list")
    return ModelChain(stages, origin=manifest["origin"], combining=manifest["combining"],
                      window=manifest["window"], meta=manifest.get("meta", {}))


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "nmse_db", "residual_var"],
                                lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in ("iteration", "nmse_db", "residual_var")})
