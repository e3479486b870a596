"""Gaussian-mixture variational autoencoder over normalized energy histories.

Small MLP encoder/decoder with hand-written backpropagation, a diagonal GMM
prior updated by EM once per epoch, Adam training, and the tooling around it
(preprocessing, SVD, cluster-to-mode assignment, misclassification, file IO).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, logsumexp

from .dynamics import Trajectory, TrajectoryMode

N_FEATURES = 64
ENC_HIDDEN = (32, 16)
DEC_HIDDEN = (16, 32)
VAR_FLOOR = 1e-6
EMPTY_CLUSTER = 1e-8
DIVERGED = 1e6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
MAGIC = b"GMVAE\x00\x01\x00"


class TrainingError(RuntimeError):
    """Loss became non-finite or diverged."""


# ---------------------------------------------------------------- data

def default_time_grid(t_f: float = 1500.0, n: int = N_FEATURES) -> np.ndarray:
    return np.linspace(0.0, t_f, n)


def preprocess_series(t, eps, time_grid, norm_constant: float) -> np.ndarray:
    """Energy interpolated onto ``time_grid``; past the last sample it holds
    the final value. Divided by ``norm_constant``."""
    t = np.asarray(t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty trajectory")
    if not norm_constant > 0:
        raise ValueError("norm_constant must be positive")
    # np.interp clamps to the end values, which is exactly the padding rule
    return np.interp(time_grid, t, eps) / norm_constant


def preprocess(traj: Trajectory, time_grid, norm_constant: float) -> np.ndarray:
    if len(traj.states) == 0:
        raise ValueError("empty trajectory")
    return preprocess_series(traj.t, traj.energy_series, time_grid, norm_constant)


@dataclass(frozen=True)
class EnergyDataset:
    samples: np.ndarray
    labels: tuple[TrajectoryMode, ...]
    norm_constant: float
    time_grid: np.ndarray
    scenario: str = ""
    split: tuple[int, int, int] | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.time_grid):
            raise ValueError("samples must be N x len(time_grid)")
        if len(self.labels) != x.shape[0]:
            raise ValueError("one label per sample")
        if not self.norm_constant > 0:
            raise ValueError("norm_constant must be positive")
        if self.split is not None and sum(self.split) != x.shape[0]:
            raise ValueError("split counts must sum to the dataset size")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", tuple(TrajectoryMode(m) for m in self.labels))

    def __len__(self):
        return self.samples.shape[0]

    def part(self, name: str) -> EnergyDataset:
        """Train, val or test rows (in stored order)."""
        if self.split is None:
            raise ValueError("dataset has no split")
        a, b, _ = self.split
        sl = {"train": slice(0, a), "val": slice(a, a + b), "test": slice(a + b, None)}[name]
        return EnergyDataset(self.samples[sl], self.labels[sl], self.norm_constant,
                             self.time_grid, self.scenario)

    def to_csv(self, path, header: str | None = None, extra_meta: dict | None = None) -> None:
        path = Path(path)
        with path.open("w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(",".join(f"x{i}" for i in range(self.samples.shape[1])) + ",label\n")
            for row, lab in zip(self.samples, self.labels):
                fh.write(",".join(repr(float(v)) for v in row) + f",{lab.value}\n")
        meta = {
            "norm_constant": self.norm_constant,
            "time_grid": [float(v) for v in self.time_grid],
            "scenario": self.scenario,
            "split": list(self.split) if self.split else None,
        }
        if extra_meta:
            meta.update(extra_meta)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> EnergyDataset:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        rows, labels = [], []
        with path.open() as fh:
            for line in fh:
                if line.startswith("#") or line.startswith("x0"):
                    continue
                *vals, lab = line.strip().split(",")
                rows.append([float(v) for v in vals])
                labels.append(lab)
        split = tuple(meta["split"]) if meta.get("split") else None
        return cls(np.array(rows).reshape(len(rows), -1), tuple(labels), meta["norm_constant"],
                   np.array(meta["time_grid"]), meta.get("scenario", ""), split)


def svd_analysis(samples: np.ndarray) -> np.ndarray:
    """Singular values of the mean-centred sample matrix, descending."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return np.linalg.svd(x - x.mean(axis=0), compute_uv=False)


# ---------------------------------------------------------------- network

def gelu(x):
    """Exact GELU, x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


@dataclass
class Mlp:
    """Dense layers with GELU on hidden layers and a linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, widths, rng: np.random.Generator) -> Mlp:
        ws, bs = [], []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            lim = 1.0 / math.sqrt(n_in)
            ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            bs.append(rng.uniform(-lim, lim, size=n_out))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, widths) -> Mlp:
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]])

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x):
        """Output and the cache needed by :meth:`backward`."""
        acts, pres = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pres.append(a)
            h = a if i == last else gelu(a)
            acts.append(h)
        return h, (acts, pres)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, g):
        """Parameter gradients (same order as :meth:`params`) and input gradient."""
        acts, pres = cache
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                g = g * gelu_grad(pres[i])
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


# ---------------------------------------------------------------- mixture

@dataclass(frozen=True)
class GmmLatent:
    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        s2 = np.atleast_2d(np.asarray(self.sigma2, dtype=np.float64))
        if pi.ndim != 1 or mu.shape != s2.shape or mu.shape[0] != pi.size:
            raise ValueError("inconsistent GMM shapes")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("cluster weights must be non-negative and sum to 1")
        if np.any(s2 <= 0):
            raise ValueError("cluster variances must be positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)

    @property
    def c(self) -> int:
        return self.pi.size


def log_joint(latent: GmmLatent, Z) -> np.ndarray:
    """log pi_c + log N(z | mu_c, diag sigma2_c) for each row of Z (N x c)."""
    Z = np.atleast_2d(Z)
    d = Z[:, None, :] - latent.mu[None, :, :]
    with np.errstate(divide="ignore"):
        log_pi = np.log(latent.pi)
    quad = np.sum(d * d / latent.sigma2[None], axis=2)
    logdet = np.sum(np.log(2.0 * math.pi * latent.sigma2), axis=1)
    return log_pi[None, :] - 0.5 * (quad + logdet[None, :])


def responsibilities(latent: GmmLatent, z) -> np.ndarray:
    """Posterior cluster probabilities; one row per latent point (or a vector)."""
    z = np.asarray(z, dtype=np.float64)
    lj = log_joint(latent, z)
    g = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    g /= g.sum(axis=1, keepdims=True)
    return g[0] if z.ndim == 1 else g


def gmm_log_likelihood(latent: GmmLatent, Z) -> float:
    return float(np.sum(logsumexp(log_joint(latent, Z), axis=1)))


def em_update(latent: GmmLatent, Z, Gamma, rng: np.random.Generator | None = None,
              log: list | None = None, Z_var=None) -> GmmLatent:
    """Weighted M-step; an emptied cluster is re-seeded at a random data point.

    ``Z_var`` (encoder posterior variances, same shape as Z) enters the
    cluster variances so they maximize the expected ELBO under q(z|x) rather
    than fitting the means alone.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    V = np.zeros_like(Z) if Z_var is None else np.atleast_2d(np.asarray(Z_var, dtype=np.float64))
    G = np.asarray(Gamma, dtype=np.float64)
    nk = G.sum(axis=0)
    pi = nk / nk.sum()
    mu = np.empty_like(latent.mu)
    s2 = np.empty_like(latent.sigma2)
    for k in range(G.shape[1]):
        if nk[k] < EMPTY_CLUSTER:
            rng = rng or np.random.default_rng(0)
            i = int(rng.integers(Z.shape[0]))
            mu[k] = Z[i]
            s2[k] = np.maximum(Z.var(axis=0) + V.mean(axis=0), VAR_FLOOR)
            if log is not None:
                log.append({"event": "reseed", "cluster": k, "row": i})
            continue
        mu[k] = G[:, k] @ Z / nk[k]
        d = Z - mu[k]
        s2[k] = np.maximum(G[:, k] @ (d * d + V) / nk[k], VAR_FLOOR)
    if np.any(nk < EMPTY_CLUSTER):
        pi = np.maximum(pi, EMPTY_CLUSTER)
    pi = pi / pi.sum()
    return GmmLatent(pi, mu, s2)


def refit_gmm(Z, Z_var, c: int, rng: np.random.Generator, iters: int = 25,
              log: list | None = None) -> GmmLatent:
    """Fresh mixture on encoded means: k-means++ seeding, then ``iters`` EM steps."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    idx = [int(rng.integers(Z.shape[0]))]
    for _ in range(1, c):
        d2 = np.min(np.sum((Z[:, None, :] - Z[idx][None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        idx.append(int(rng.choice(Z.shape[0], p=d2 / total)) if total > 0 else int(rng.integers(Z.shape[0])))
    spread = np.maximum(Z.var(axis=0) / c, VAR_FLOOR)
    latent = GmmLatent(np.full(c, 1.0 / c), Z[idx].copy(), np.tile(spread, (c, 1)))
    for _ in range(iters):
        latent = em_update(latent, Z, responsibilities(latent, Z), rng, log, Z_var)
    return latent


# ---------------------------------------------------------------- model

@dataclass
class GmvaeModel:
    encoder: Mlp
    decoder: Mlp
    latent: GmmLatent
    l: int
    c: int
    cluster_to_mode: dict[int, TrajectoryMode] = field(default_factory=dict)
    norm_constant: float = 1.0
    time_grid: np.ndarray = field(default_factory=default_time_grid)
    failure_mode: TrajectoryMode = TrajectoryMode.ESCAPE
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, l: int, c: int, seed: int, n_in: int = N_FEATURES) -> GmvaeModel:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E6E]))
        enc = Mlp.init((n_in, *ENC_HIDDEN, 2 * l), rng)
        dec = Mlp.init((l, *DEC_HIDDEN, n_in), rng)
        latent = GmmLatent(np.full(c, 1.0 / c), np.zeros((c, l)), np.ones((c, l)))
        return cls(enc, dec, latent, l, c, meta={"seed": int(seed), "init": "uniform fan-in"})

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()


def encode(model: GmvaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Encoder mean and log-variance for one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.encoder.widths[0]:
        raise ValueError(f"expected {model.encoder.widths[0]} features, got {x.shape[-1]}")
    out = model.encoder(np.atleast_2d(x))
    mu, log_var = out[:, : model.l], out[:, model.l:]
    if x.ndim == 1:
        return mu[0], log_var[0]
    return mu, log_var


def decode(model: GmvaeModel, z):
    z = np.asarray(z, dtype=np.float64)
    out = model.decoder(np.atleast_2d(z))
    return out[0] if z.ndim == 1 else out


def mode_probabilities(model: GmvaeModel, x) -> dict[TrajectoryMode, float]:
    """Sum of responsibilities (at the encoder mean) over clusters per mode."""
    mu, _ = encode(model, x)
    g = responsibilities(model.latent, mu)
    out: dict[TrajectoryMode, float] = {}
    for k in range(model.c):
        mode = model.cluster_to_mode.get(k)
        if mode is None:
            raise ValueError("cluster_to_mode is incomplete")
        out[mode] = out.get(mode, 0.0) + float(g[k])
    return out


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossParts:
    total: float
    recon: float
    kl: float


def _forward_loss(model: GmvaeModel, x, eta, kind: str, beta_kl: float, gamma=None):
    """Shared forward/backward for both losses. Returns (LossParts, grads)."""
    n = x.shape[0]
    l = model.l
    enc_out, enc_cache = model.encoder.forward(x)
    mu, log_var = enc_out[:, :l], enc_out[:, l:]
    std = np.exp(0.5 * log_var)
    z = mu + std * eta
    xr, dec_cache = model.decoder.forward(z)
    diff = xr - x
    recon = 0.5 * np.sum(diff * diff) / n

    var = std * std
    if kind == "vae":
        kl_each = 0.5 * (var + mu * mu - 1.0 - log_var)
        kl = float(np.sum(kl_each)) / n
        d_mu = beta_kl * mu / n
        d_lv = beta_kl * 0.5 * (var - 1.0) / n
    else:
        lat = model.latent
        if gamma is None:
            gamma = responsibilities(lat, mu)
        # sum_c gamma_c KL(N(mu, var) || N(mu_c, s2_c))
        s2 = lat.sigma2[None]
        dm = mu[:, None, :] - lat.mu[None]
        kl_c = 0.5 * np.sum(np.log(s2) - log_var[:, None, :] + (var[:, None, :] + dm * dm) / s2 - 1.0, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            cat = np.where(gamma > 0, gamma * (np.log(gamma) - np.log(lat.pi)[None]), 0.0)
        kl = float(np.sum(gamma * kl_c) + np.sum(cat)) / n
        inv = 1.0 / lat.sigma2  # c x l
        d_mu = beta_kl * np.einsum("nc,ncl->nl", gamma, dm * inv[None]) / n
        d_lv = beta_kl * 0.5 * (var * (gamma @ inv) - 1.0) / n

    total = recon + beta_kl * kl

    g_xr = diff / n
    dec_grads, g_z = model.decoder.backward(dec_cache, g_xr)
    d_mu = d_mu + g_z
    d_lv = d_lv + g_z * eta * 0.5 * std
    enc_grads, _ = model.encoder.backward(enc_cache, np.concatenate([d_mu, d_lv], axis=1))
    parts = LossParts(float(total), float(recon), float(kl))
    if not math.isfinite(parts.total):
        raise TrainingError("non-finite loss")
    return parts, enc_grads + dec_grads


def elbo_loss(model: GmvaeModel, batch, eta, beta_kl: float = 1.0, gamma=None):
    """Negative ELBO with a Gaussian-mixture prior and its gradients.

    Reconstruction is unit-variance Gaussian (half squared error, constants
    dropped). The latent terms are sum_c gamma_c KL(q(z|x) || N(mu_c, s2_c))
    plus KL(gamma || pi); gamma comes from the current mixture at the encoder
    mean and is held constant (EM owns the mixture parameters).
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return _forward_loss(model, x, np.atleast_2d(eta), "gmvae", beta_kl, gamma)


def vae_loss(model: GmvaeModel, batch, eta, beta_kl: float):
    """Reconstruction plus beta-weighted KL to a standard normal prior."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return _forward_loss(model, x, np.atleast_2d(eta), "vae", beta_kl)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    split: tuple[int, int, int] = (1024, 128, 128)
    seed: int = 0
    beta_kl: float = 1.0
    em_every: int = 1
    init_jitter: float = 0.05
    # epochs against the fixed initial mixture before the GMM is refit from
    # the learned codes and EM takes over; 0 runs EM from the first epoch
    warmup_epochs: int = 100
    refit_em_iters: int = 25

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.warmup_epochs < 0:
            raise ValueError("invalid training configuration")


class Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: GmvaeModel, data: np.ndarray, cfg: TrainConfig, mode: str = "gmvae",
          progress=None) -> tuple[GmvaeModel, list[dict]]:
    """Minibatch Adam on the chosen loss; updates ``model`` in place.

    In gmvae mode the mixture is initialized from the encoded training means
    and refit by one EM step on the full training set every ``em_every``
    epochs. Returns the model and one log row per epoch.
    """
    if mode not in ("gmvae", "vae"):
        raise ValueError("mode must be 'gmvae' or 'vae'")
    x = np.asarray(data, dtype=np.float64)
    ss = np.random.SeedSequence([int(cfg.seed), 0x7472])
    rng_shuffle, rng_noise, rng_em = (np.random.default_rng(s) for s in ss.spawn(3))
    opt = Adam(model.params(), cfg.learning_rate)
    em_log: list[dict] = []
    if mode == "gmvae" and cfg.epochs > 0:
        mu0, _ = encode(model, x)
        pick = rng_em.choice(x.shape[0], size=model.c, replace=x.shape[0] < model.c)
        jitter = cfg.init_jitter * rng_em.standard_normal((model.c, model.l))
        model.latent = GmmLatent(np.full(model.c, 1.0 / model.c), mu0[pick] + jitter,
                                 np.ones((model.c, model.l)))
    log = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(n)
        tot = rec = klt = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            eta = rng_noise.standard_normal((idx.size, model.l))
            fn = elbo_loss if mode == "gmvae" else vae_loss
            parts, grads = fn(model, x[idx], eta, cfg.beta_kl)
            opt.step(grads)
            w = idx.size / n
            tot += w * parts.total
            rec += w * parts.recon
            klt += w * parts.kl
        if not tot < DIVERGED:
            raise TrainingError(f"loss diverged at epoch {epoch}: {tot}")
        ll = math.nan
        if mode == "gmvae" and epoch + 1 == cfg.warmup_epochs:
            Z, lv = encode(model, x)
            model.latent = refit_gmm(Z, np.exp(lv), model.c, rng_em, cfg.refit_em_iters, em_log)
            ll = gmm_log_likelihood(model.latent, Z) / n
        elif mode == "gmvae" and epoch + 1 > cfg.warmup_epochs and (epoch + 1) % cfg.em_every == 0:
            Z, lv = encode(model, x)
            G = responsibilities(model.latent, Z)
            model.latent = em_update(model.latent, Z, G, rng_em, em_log, np.exp(lv))
            ll = gmm_log_likelihood(model.latent, Z) / n
        row = {"epoch": epoch + 1, "loss": tot, "recon": rec, "kl": klt, "gmm_ll": ll}
        log.append(row)
        if progress is not None:
            progress(row)
    model.meta.update({"warmup_epochs": cfg.warmup_epochs, "epochs": cfg.epochs, "lr": cfg.learning_rate,
                       "batch_size": cfg.batch_size, "train_seed": int(cfg.seed), "beta_kl": cfg.beta_kl, "mode": mode,
                       "reseeds": len(em_log)})
    return model, log


# ---------------------------------------------------------------- labelling

def mahalanobis_to_clusters(latent: GmmLatent, Z) -> np.ndarray:
    """N x c diagonal Mahalanobis distances."""
    d = np.atleast_2d(Z)[:, None, :] - latent.mu[None]
    return np.sqrt(np.sum(d * d / latent.sigma2[None], axis=2))


def assign_clusters(model: GmvaeModel, samples, labels, modes=None) -> dict[int, TrajectoryMode]:
    """Map each cluster to the mode whose samples are closest on average.

    If some labelled mode ends up without a cluster, the cluster nearest to
    that mode's samples (among clusters whose mode keeps another cluster) is
    handed over so every mode can be predicted. ``modes`` lists the modes
    that must be present; one without samples is an error.
    """
    labels = [TrajectoryMode(m) for m in labels]
    present = set(labels)
    if not present:
        raise ValueError("no labelled samples")
    if modes is not None:
        missing = [TrajectoryMode(m).value for m in modes if TrajectoryMode(m) not in present]
        if missing:
            raise ValueError(f"no samples for mode(s): {', '.join(missing)}")
    modes = sorted(present, key=lambda m: m.value)
    Z, _ = encode(model, np.asarray(samples))
    D = mahalanobis_to_clusters(model.latent, Z)
    lab = np.array([m.value for m in labels])
    mean_d = np.array([D[lab == m.value].mean(axis=0) for m in modes])  # modes x c
    best = mean_d.argmin(axis=0)
    mapping = {k: modes[int(best[k])] for k in range(model.c)}
    for mi, m in enumerate(modes):
        if m in mapping.values():
            continue
        counts = {mm: sum(1 for v in mapping.values() if v == mm) for mm in modes}
        candidates = [k for k in range(model.c) if counts[mapping[k]] > 1]
        if not candidates:
            break
        k = min(candidates, key=lambda k: mean_d[mi, k])
        mapping[k] = m
    model.cluster_to_mode = mapping
    return mapping


def predict_modes(model: GmvaeModel, samples) -> list[TrajectoryMode]:
    Z, _ = encode(model, np.atleast_2d(samples))
    G = responsibilities(model.latent, Z)
    return [model.cluster_to_mode[int(k)] for k in G.argmax(axis=1)]


def misclassification(model: GmvaeModel, samples, labels) -> tuple[dict[TrajectoryMode, float], float]:
    """Per-true-mode percentage of samples assigned to a wrong mode, and their mean."""
    labels = [TrajectoryMode(m) for m in labels]
    pred = predict_modes(model, samples)
    per = {}
    for m in sorted(set(labels), key=lambda m: m.value):
        idx = [i for i, lab in enumerate(labels) if lab == m]
        per[m] = 100.0 * sum(pred[i] != m for i in idx) / len(idx)
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


# ---------------------------------------------------------------- files

def save_model(model: GmvaeModel, path) -> None:
    """Header length (uint64 LE) + JSON header + little-endian f64 parameter blob."""
    arrays = model.params() + [model.latent.pi, model.latent.mu, model.latent.sigma2]
    header = {
        "format": "gmvae-v1",
        "enc_widths": list(model.encoder.widths),
        "dec_widths": list(model.decoder.widths),
        "l": model.l,
        "c": model.c,
        "shapes": [list(a.shape) for a in arrays],
        "cluster_to_mode": {str(k): v.value for k, v in sorted(model.cluster_to_mode.items())},
        "norm_constant": model.norm_constant,
        "time_grid": [float(v) for v in model.time_grid],
        "failure_mode": model.failure_mode.value,
        "meta": model.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + blob)


def load_model(path) -> GmvaeModel:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a model file")
    off = len(MAGIC)
    (hl,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    header = json.loads(raw[off:off + hl])
    off += hl
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    n_enc = 2 * (len(header["enc_widths"]) - 1)
    n_dec = 2 * (len(header["dec_widths"]) - 1)
    enc = Mlp(arrays[0:n_enc:2], arrays[1:n_enc:2])
    dec = Mlp(arrays[n_enc:n_enc + n_dec:2], arrays[n_enc + 1:n_enc + n_dec:2])
    pi, mu, s2 = arrays[n_enc + n_dec:]
    return GmvaeModel(
        enc, dec, GmmLatent(pi, mu, s2), header["l"], header["c"],
        {int(k): TrajectoryMode(v) for k, v in header["cluster_to_mode"].items()},
        header["norm_constant"], np.array(header["time_grid"]),
        TrajectoryMode(header["failure_mode"]), header["meta"],
    )
