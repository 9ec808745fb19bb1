"""Expectation-maximization fitting of a mixture of factor analyzers.

Complete-data EM: the E-step computes component responsibilities and the
posterior factor moments through the l-by-l Woodbury core, the M-step updates
weights, means, loadings and diagonal noise in closed form (loadings and mean
are solved jointly via the constant-augmented factor trick).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .mfa import LOG_2PI, FactorAnalyzer, MFAModel

EMPTY_RESP = 1e-8  # responsibility mass below this marks a dead component
MAX_RESEEDS = 3

KMEANS_SUBSET = 5000
KMEANS_MAX_ITERS = 100


@dataclass(frozen=True)
class EMConfig:
    k: int = 8
    l: int = 4
    max_iters: int = 200
    ll_tol: float = 1e-6
    d_floor: float = 1e-6
    seed: int = 0
    init: str = "kmeans"  # "kmeans" | "random-subset"

    def __post_init__(self):
        if self.k < 1 or self.l < 0:
            raise ValueError("k >= 1 and l >= 0 required")
        if self.max_iters < 1:
            raise ValueError("max_iters >= 1 required")
        if self.ll_tol < 0:
            raise ValueError("ll_tol must be >= 0")
        if self.d_floor <= 0:
            raise ValueError("d_floor must be > 0")
        if self.init not in ("kmeans", "random-subset"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class EMReport:
    """Mean log-likelihood per iteration plus termination info."""

    loglik: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    reseeds: int = 0


def write_em_csv(report: EMReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loglik"])
        for i, ll in enumerate(report.loglik):
            w.writerow([i, repr(ll)])


def _kmeans(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Lloyd iteration; assignment ties break toward the lowest index."""
    n_samples = data.shape[0]
    centers = data[rng.choice(n_samples, size=k, replace=False)].copy()
    assign = np.full(n_samples, -1)
    for _ in range(KMEANS_MAX_ITERS):
        # np.argmin returns the first (lowest-index) minimizer on ties
        d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            pick = assign == j
            if pick.any():
                centers[j] = data[pick].mean(axis=0)
    return assign


def _init_model(data: np.ndarray, cfg: EMConfig, rng: np.random.Generator) -> MFAModel:
    n_samples, n = data.shape
    k, l = cfg.k, cfg.l
    global_var = np.maximum(data.var(axis=0), cfg.d_floor)
    if cfg.init == "kmeans":
        m = min(KMEANS_SUBSET, n_samples)
        subset = data[rng.choice(n_samples, size=m, replace=False)]
        assign = _kmeans(subset, k, rng)
        comps, props = [], []
        for j in range(k):
            pick = assign == j
            if pick.any():
                mu = subset[pick].mean(axis=0)
                d = np.maximum(subset[pick].var(axis=0), cfg.d_floor)
                props.append(pick.sum() / m)
            else:
                mu = subset[rng.integers(m)]
                d = global_var
                props.append(1.0 / m)
            A = 0.01 * rng.standard_normal((n, l))
            comps.append(FactorAnalyzer(mu, A, d))
        w = np.asarray(props)
    else:
        idx = rng.choice(n_samples, size=k, replace=False)
        comps = [
            FactorAnalyzer(data[i], 0.01 * rng.standard_normal((n, l)), global_var)
            for i in idx
        ]
        w = np.ones(k)
    return MFAModel(tuple(comps), w / w.sum())


def _e_step(data, model):
    """Per-component log joint, posterior factor means and core Cholesky.

    Returns (log_joint (N, k), factor_means list of (N, l), chols list).
    The posterior factor covariance for component j is core_j^-1, identical
    for every sample, so only its Cholesky is kept.
    """
    n_samples, n = data.shape
    k, l = model.k, model.rank
    log_joint = np.empty((n_samples, k))
    factor_means = []
    chols = []
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    for j, comp in enumerate(model.components):
        z = data - comp.mean
        u = z / comp.noise
        quad = np.einsum("ij,ij->i", z, u)
        logdet = np.sum(np.log(comp.noise))
        if l:
            core = np.eye(l) + comp.factors.T @ (comp.factors / comp.noise[:, None])
            chol = cho_factor(0.5 * (core + core.T), lower=True)
            w = u @ comp.factors
            v = cho_solve(chol, w.T).T  # E[y | x] per sample
            quad = quad - np.einsum("ij,ij->i", w, v)
            logdet += 2.0 * np.sum(np.log(np.diag(chol[0])))
        else:
            chol = None
            v = np.zeros((n_samples, 0))
        factor_means.append(v)
        chols.append(chol)
        log_joint[:, j] = log_w[j] - 0.5 * (n * LOG_2PI + logdet + quad)
    return log_joint, factor_means, chols


def _m_step(data, data_sq, resp, factor_means, chols, cfg):
    n_samples, n = data.shape
    k, l = resp.shape[1], cfg.l
    comps, weights = [], np.empty(k)
    eye = np.eye(l)
    for j in range(k):
        r = resp[:, j]
        nj = r.sum()
        weights[j] = nj / n_samples
        ez = np.concatenate([factor_means[j], np.ones((n_samples, 1))], axis=1)
        rez = r[:, None] * ez
        s_zz = ez.T @ rez
        if l:
            s_zz[:l, :l] += nj * cho_solve(chols[j], eye)
        s_zx = rez.T @ data
        sol = np.linalg.solve(s_zz, s_zx)  # rows 0..l-1: loadings^T, row l: mean
        new_A = sol[:l].T
        new_mu = sol[l]
        new_d = (r @ data_sq - np.einsum("ij,ij->j", sol, s_zx)) / nj
        new_d = np.maximum(new_d, cfg.d_floor)
        comps.append(FactorAnalyzer(new_mu, new_A, new_d))
    return comps, weights


def fit(data, cfg: EMConfig) -> tuple[MFAModel, EMReport]:
    """Fit an MFA to complete vectors by EM.

    Args:
        data: (N, n) array or list of length-n vectors; all entries finite.
        cfg: EM settings (see EMConfig).

    Returns:
        (model, report); report.loglik holds the mean log-likelihood under the
        parameters entering each iteration, a non-decreasing sequence up to
        floating-point noise.

    Raises:
        ValueError: fewer than k*(l+2) samples, or non-finite data.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        data = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in data])
    n_samples = data.shape[0]
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    if n_samples < cfg.k * (cfg.l + 2):
        raise ValueError(
            f"need at least k*(l+2) = {cfg.k * (cfg.l + 2)} samples, got {n_samples}"
        )

    rng = np.random.default_rng(cfg.seed)
    model = _init_model(data, cfg, rng)
    data_sq = data**2
    global_var = np.maximum(data.var(axis=0), cfg.d_floor)
    report = EMReport()
    reseed_counts = np.zeros(cfg.k, dtype=int)
    prev_ll = -np.inf

    for _ in range(cfg.max_iters):
        log_joint, factor_means, chols = _e_step(data, model)
        per_sample = logsumexp(log_joint, axis=1)
        mean_ll = float(per_sample.mean())
        report.loglik.append(mean_ll)
        report.iterations_run += 1

        rel = (mean_ll - prev_ll) / max(abs(prev_ll), 1e-12)
        if np.isfinite(prev_ll) and rel < cfg.ll_tol:
            report.converged = True
            break
        prev_ll = mean_ll

        resp = np.exp(log_joint - per_sample[:, None])

        dead = resp.sum(axis=0) < EMPTY_RESP
        if dead.any():
            comps = list(model.components)
            w = model.weights.copy()
            worst = int(np.argmin(per_sample))
            for j in np.flatnonzero(dead):
                reseed_counts[j] += 1
                if reseed_counts[j] >= MAX_RESEEDS:
                    raise RuntimeError(f"component {j} died {MAX_RESEEDS} times")
                comps[j] = FactorAnalyzer(
                    data[worst],
                    0.01 * rng.standard_normal((data.shape[1], cfg.l)),
                    global_var,
                )
                w[j] = 1.0 / n_samples
                report.reseeds += 1
            model = MFAModel(tuple(comps), w / w.sum())
            prev_ll = -np.inf
            continue

        comps, weights = _m_step(data, data_sq, resp, factor_means, chols, cfg)
        model = MFAModel(tuple(comps), weights / weights.sum())

    return model, report
