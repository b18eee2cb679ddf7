"""Two-layer ReLU network that maps a sample covariance to a subspace filter.

One network serves one subspace of dimension ``L`` (``M`` for vertical,
``N`` for horizontal). Its input is the ``L x L`` sample covariance of the
observation slices in a window, flattened to ``2 L^2`` reals; its output is
the ``L x L`` complex filter in the same encoding. Training minimizes the
channel-domain error ``|W y - h|^2`` over the slices of each window.

The per-window loss only depends on three second-order statistics of the
window (``C = E[x x^H]``, ``D = E[h x^H]`` and ``E|h|^2``), so data is reduced
to :class:`SubspaceStats` once and the optimizer never touches raw samples.
"""

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "TrainConfig",
    "NnModel",
    "SubspaceStats",
    "ConvergenceReport",
    "TrainingError",
    "sample_covariance",
    "encode",
    "decode",
    "init_model",
    "forward",
    "loss_and_grad",
    "window_stats",
    "slice_stats",
    "fit",
    "train_dedicated",
    "train_universal",
    "convergence_check",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.009
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 16
    max_steps: int = 1500
    window: int = 256
    convergence_eps: float = 0.1
    row_slack: float = 0.05
    patience: int = 8
    eval_every: int = 50
    lr_floor: float = 0.01
    init_std: float = 0.01
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.batch_size < 1 or self.max_steps < 1 or self.window < 1:
            raise ValueError("batch size, step budget and window must be positive")

    def replace(self, **changes):
        return replace(self, **changes)

    def learning_rate(self, step):
        """Cosine decay from ``lr`` down to ``lr * lr_floor`` at ``max_steps``."""
        frac = min(step, self.max_steps) / self.max_steps
        scale = self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac))
        return self.lr * scale


@dataclass
class NnModel:
    dim: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    adam_m: dict = field(default_factory=dict, repr=False)
    adam_v: dict = field(default_factory=dict, repr=False)
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def width(self):
        return 2 * self.dim * self.dim

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return NnModel(
            dim=self.dim,
            **{k: v.copy() for k, v in self.params().items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
            meta=dict(self.meta),
        )

    def reset_optimizer(self):
        self.adam_m, self.adam_v, self.step = {}, {}, 0

    def filter(self, R_hat):
        return forward(self, R_hat)


def sample_covariance(slices):
    """``(1/K) sum_k v_k v_k^H`` for slices given as rows of ``slices``."""
    S = np.atleast_2d(np.asarray(slices))
    if S.shape[0] == 0:
        raise ValueError("need at least one slice")
    R = S.T @ S.conj() / S.shape[0]
    return 0.5 * (R + R.conj().T)


def encode(R):
    """Real parts (row-major) followed by imaginary parts."""
    R = np.asarray(R)
    flat = R.reshape(R.shape[:-2] + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def decode(v, L=None):
    v = np.asarray(v, dtype=float)
    half = v.shape[-1] // 2
    if L is None:
        L = int(round(np.sqrt(half)))
    if 2 * L * L != v.shape[-1]:
        raise ValueError(f"vector of length {v.shape[-1]} does not encode an {L}x{L} matrix")
    W = v[..., :half] + 1j * v[..., half:]
    return W.reshape(v.shape[:-1] + (L, L))


def init_model(L, std=0.01, seed=0):
    """Identity-initialized layers plus Gaussian jitter, zero biases."""
    rng = np.random.default_rng([int(seed), int(L)])
    D = 2 * L * L
    return NnModel(
        dim=L,
        W1=np.eye(D) + std * rng.standard_normal((D, D)),
        b1=np.zeros(D),
        W2=np.eye(D) + std * rng.standard_normal((D, D)),
        b2=np.zeros(D),
    )


def _forward_cache(model, R_hat):
    X = encode(R_hat)
    if X.shape[-1] != model.width:
        raise ValueError(f"input of size {X.shape[-1]} does not match model width {model.width}")
    A1 = X @ model.W1.T + model.b1
    Hd = np.maximum(A1, 0.0)
    out = Hd @ model.W2.T + model.b2
    return X, A1, Hd, out


def forward(model, R_hat):
    """Filter(s) produced for one covariance or a stack of covariances."""
    return decode(_forward_cache(model, R_hat)[3], model.dim)


@dataclass
class SubspaceStats:
    """Second-order statistics of the slices of each window.

    ``cov`` is ``E[x x^H]`` (also the network input), ``cross`` is
    ``E[h x^H]``, ``label_energy`` is ``E|h|^2`` and ``noise_energy`` is
    ``E|x - h|^2``, all per slice and stacked along the first axis.
    """

    cov: np.ndarray
    cross: np.ndarray
    label_energy: np.ndarray
    noise_energy: np.ndarray

    def __len__(self):
        return self.cov.shape[0]

    @property
    def dim(self):
        return self.cov.shape[-1]

    def take(self, idx):
        return SubspaceStats(self.cov[idx], self.cross[idx],
                             self.label_energy[idx], self.noise_energy[idx])

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("cov", "cross", "label_energy", "noise_energy")))


def slice_stats(X, H):
    """Statistics of slices given as rows: ``X``, ``H`` of shape ``(K, L)``."""
    X = np.atleast_2d(X)
    H = np.atleast_2d(H)
    K = X.shape[0]
    cov = sample_covariance(X)
    cross = H.T @ X.conj() / K
    return SubspaceStats(
        cov=cov[None],
        cross=cross[None],
        label_energy=np.array([np.sum(np.abs(H) ** 2) / K]),
        noise_energy=np.array([np.sum(np.abs(X - H) ** 2) / K]),
    )


def window_stats(H, X):
    """Vertical and horizontal statistics of one window of ``(K, M, N)`` stacks."""
    K, M, N = X.shape
    Xc = X.conj()
    E = X - H
    cov_v = np.einsum("kmn,kpn->mp", X, Xc) / (K * N)
    cov_h = np.einsum("kmn,kmq->nq", X, Xc) / (K * M)
    cross_v = np.einsum("kmn,kpn->mp", H, Xc) / (K * N)
    cross_h = np.einsum("kmn,kmq->nq", H, Xc) / (K * M)
    h_energy = np.sum(np.abs(H) ** 2) / K
    e_energy = np.sum(np.abs(E) ** 2) / K
    vertical = SubspaceStats(
        0.5 * (cov_v + cov_v.conj().T)[None], cross_v[None],
        np.array([h_energy / N]), np.array([e_energy / N]))
    horizontal = SubspaceStats(
        0.5 * (cov_h + cov_h.conj().T)[None], cross_h[None],
        np.array([h_energy / M]), np.array([e_energy / M]))
    return vertical, horizontal


def _window_losses(W, stats):
    # E|W x - h|^2 = tr(W C W^H) - 2 Re tr(W D^H) + E|h|^2
    WC = W @ stats.cov
    quad = np.einsum("bij,bij->b", WC, W.conj()).real
    lin = np.einsum("bij,bij->b", W, stats.cross.conj()).real
    return quad - 2.0 * lin + stats.label_energy, WC


def window_losses(model, stats):
    """Per-window mean squared channel error of the model's filters."""
    return _window_losses(forward(model, stats.cov), stats)[0]


def loss_and_grad(model, stats):
    """Mean per-slice loss over the windows in ``stats`` and exact gradients."""
    X, A1, Hd, out = _forward_cache(model, stats.cov)
    W = decode(out, model.dim)
    losses, WC = _window_losses(W, stats)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss encountered")
    B = len(stats)
    # d loss / d Re W = Re G, d loss / d Im W = Im G with G = 2 (W C - D)
    G = 2.0 * (WC - stats.cross) / B
    d_out = encode(G)
    d_hidden = (d_out @ model.W2) * (A1 > 0)
    grads = {
        "W2": d_out.T @ Hd,
        "b2": d_out.sum(axis=0),
        "W1": d_hidden.T @ X,
        "b1": d_hidden.sum(axis=0),
    }
    return loss, grads


def adam_step(model, grads, cfg):
    model.step += 1
    t = model.step
    lr = cfg.learning_rate(t - 1)
    for name in PARAM_NAMES:
        g = grads[name]
        m = model.adam_m.get(name)
        v = model.adam_v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        model.adam_m[name] = m
        model.adam_v[name] = v
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        p = getattr(model, name)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)


@dataclass
class ConvergenceReport:
    residual: float
    noise_energy: float
    within_noise: bool
    frob_rel: float
    near_reference: bool
    max_row_energy: float
    rows_ok: bool

    @property
    def converged(self):
        return bool(self.within_noise and self.rows_ok and (self.near_reference or np.isnan(self.frob_rel)))

    def as_dict(self):
        return {
            "residual": self.residual,
            "noise_energy": self.noise_energy,
            "within_noise": self.within_noise,
            "frob_rel": self.frob_rel,
            "near_reference": self.near_reference,
            "max_row_energy": self.max_row_energy,
            "rows_ok": self.rows_ok,
            "converged": self.converged,
        }


def convergence_check(model, stats, reference=None, eps=0.1, row_slack=0.05):
    """Check a trained model on held-out windows.

    The model is accepted when its channel error does not exceed the error
    already present in its input, every filter row has energy at most
    ``1 + row_slack`` and, if a reference filter is given (one matrix or one
    per window), the mean relative Frobenius distance to it is below ``eps``.
    """
    W = forward(model, stats.cov)
    residual = float(np.mean(_window_losses(W, stats)[0]))
    noise = float(np.mean(stats.noise_energy))
    rows = np.sum(np.abs(W) ** 2, axis=-1)
    max_row = float(np.max(rows))
    if reference is None:
        frob = float("nan")
    else:
        ref = np.broadcast_to(reference, W.shape)
        frob = float(np.mean(np.linalg.norm(W - ref, axis=(-2, -1))
                             / np.linalg.norm(ref, axis=(-2, -1))))
    return ConvergenceReport(
        residual=residual,
        noise_energy=noise,
        within_noise=bool(residual <= noise),
        frob_rel=frob,
        near_reference=bool(frob < eps) if not np.isnan(frob) else False,
        max_row_energy=max_row,
        rows_ok=bool(max_row <= 1.0 + row_slack),
    )


def fit(model, train, val, cfg, reference=None):
    """Run Adam on ``model`` (in place) and return it with training metadata.

    Minibatches are drawn from the training windows with a generator seeded
    from ``cfg.seed``; the parameters with the best validation loss seen at
    any evaluation point are kept. Training stops early when the validation
    loss has not improved for ``cfg.patience`` evaluations and the
    noise-reduction condition already holds.
    """
    rng = np.random.default_rng([cfg.seed, model.dim, 7])
    n = len(train)
    best_loss = np.inf
    best = model.copy()
    stale = 0
    history = []
    for step in range(cfg.max_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss, grads = loss_and_grad(model, train.take(idx))
        adam_step(model, grads, cfg)
        last = step == cfg.max_steps - 1
        if (step + 1) % cfg.eval_every == 0 or last:
            val_loss = float(np.mean(window_losses(model, val)))
            history.append((step + 1, loss, val_loss))
            log.debug("L=%d step %d train %.5f val %.5f", model.dim, step + 1, loss, val_loss)
            if val_loss < best_loss * (1 - 1e-4):
                best_loss = val_loss
                best = model.copy()
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience and best_loss <= float(np.mean(val.noise_energy)):
                break
    report = convergence_check(best, val, reference, cfg.convergence_eps, cfg.row_slack)
    best.meta.update(
        steps=int(model.step),
        val_loss=float(best_loss),
        history=history,
        convergence=report.as_dict(),
        converged=report.converged,
    )
    if not (report.within_noise and report.rows_ok):
        log.warning("model L=%d did not converge: %s", model.dim, report.as_dict())
    elif not report.converged:
        log.info("model L=%d is %.3f (relative) from the reference filter",
                 model.dim, report.frob_rel)
    return best


def split_windows(n_windows, validation_fraction):
    n_val = max(1, int(round(n_windows * validation_fraction)))
    if n_val >= n_windows:
        raise ValueError("not enough windows for a training/validation split")
    return np.arange(n_val, n_windows), np.arange(n_val)


def collect_stats(source, windows, transform=None):
    """Vertical and horizontal statistics for the given window indices.

    ``transform(w, H, Y)`` maps the raw observation of window ``w`` to the
    current input, e.g. the output of earlier denoising passes.
    """
    vert, horiz = [], []
    for w in windows:
        H, Y, _ = source.window(w)
        X = Y if transform is None else transform(w, H, Y)
        v, h = window_stats(H, X)
        vert.append(v)
        horiz.append(h)
    return SubspaceStats.concat(vert), SubspaceStats.concat(horiz)


def source_meta(source, subspace, iteration=0):
    info = source.describe()
    doa = info["doa_v"] if subspace == "v" else info["doa_h"]
    spread = info["spread_v"] if subspace == "v" else info["spread_h"]
    return {
        "subspace": subspace,
        "iteration": iteration,
        "snr_range": tuple(float(x) for x in info["snr_db"]),
        "doa_range": tuple(float(x) for x in doa),
        "spread": float(spread),
    }


def train_dedicated(source, cfg, subspace="v", n_windows=None, reference=None):
    """Train one subspace network on windows from ``source``.

    ``n_windows`` defaults to enough windows for 200 000 observations.
    ``reference`` is an optional closed-form filter used for the Frobenius
    proximity check.
    """
    if subspace not in ("v", "h"):
        raise ValueError("subspace must be 'v' or 'h'")
    n_windows = n_windows or max(2, 200_000 // cfg.window)
    train_idx, val_idx = split_windows(n_windows, cfg.validation_fraction)
    tr_v, tr_h = collect_stats(source, train_idx)
    va_v, va_h = collect_stats(source, val_idx)
    train, val = (tr_v, va_v) if subspace == "v" else (tr_h, va_h)
    L = source.cfg.M if subspace == "v" else source.cfg.N
    model = init_model(L, cfg.init_std, cfg.seed)
    model = fit(model, train, val, cfg, reference)
    model.meta.update(source_meta(source, subspace))
    return model


def train_universal(source, cfg, subspace="v", n_windows=None, step_factor=3):
    """Universal training: every window carries a freshly drawn scenario.

    The optimizer budget is ``step_factor`` times that of dedicated training.
    """
    cfg = cfg.replace(max_steps=cfg.max_steps * step_factor)
    model = train_dedicated(source, cfg, subspace, n_windows)
    model.meta["universal"] = True
    return model


_MODEL_MAGIC = b"TCNN"
_MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIII5d")


def save_model(model, path):
    """Header (magic, version, L, iteration, SNR range, DoA range, spread)
    followed by W1, b1, W2, b2 as little-endian float64."""
    meta = model.meta
    snr = meta.get("snr_range", (np.nan, np.nan))
    doa = meta.get("doa_range", (np.nan, np.nan))
    header = _MODEL_HEADER.pack(
        _MODEL_MAGIC, _MODEL_VERSION, model.dim, int(meta.get("iteration", 0)),
        snr[0], snr[1], doa[0], doa[1], float(meta.get("spread", np.nan)),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MODEL_HEADER.size:
        raise ValueError("file too short for a model header")
    magic, version, L, iteration, s0, s1, d0, d1, spread = _MODEL_HEADER.unpack_from(raw)
    if magic != _MODEL_MAGIC:
        raise ValueError("not a model file")
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    D = 2 * L * L
    body = np.frombuffer(raw, dtype="<f8", offset=_MODEL_HEADER.size)
    if body.size != 2 * D * D + 2 * D:
        raise ValueError("parameter payload does not match the declared dimension")
    if not np.all(np.isfinite(body)):
        raise ValueError("model file contains non-finite parameters")
    sizes = {"W1": (D, D), "b1": (D,), "W2": (D, D), "b2": (D,)}
    params, offset = {}, 0
    for name in PARAM_NAMES:
        count = int(np.prod(sizes[name]))
        params[name] = body[offset:offset + count].reshape(sizes[name]).astype(float)
        offset += count
    meta = {"iteration": iteration, "snr_range": (s0, s1), "doa_range": (d0, d1),
            "spread": spread}
    return NnModel(dim=L, meta=meta, **params)
