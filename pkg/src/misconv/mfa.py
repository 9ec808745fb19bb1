"""Mixture-of-factor-analyzers distributions over image vectors.

A factor analyzer is a Gaussian whose covariance is low-rank plus diagonal,
``Sigma = F F^T + diag(s)`` with ``F`` of shape (n, l), ``l << n``.  All
operations here (density, sampling, conditioning on observed pixels) work in
that low-rank form and never materialize an n-by-n covariance matrix.

Conditioning a mixture on the observed pixels of a partially observed image
returns a new mixture over the full n-dimensional space: each component is a
point mass on the observed coordinates and the exact conditional Gaussian on
the missing ones, still in factor-analyzer form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)

# Posterior weights smaller than this are flushed to exact zero.
WEIGHT_FLUSH = 1e-300

# Cholesky jitter used when the l-by-l core is numerically indefinite.
CORE_JITTER = 1e-10


class DegenerateDensityError(ValueError):
    """Density evaluation requested on a component with zero noise variance."""


class ConditioningError(ValueError):
    """Conditioning on observed pixels is impossible for this model/image."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FactorAnalyzer:
    """One Gaussian component with covariance ``factors @ factors.T + diag(noise)``.

    Attributes:
        mean: length-n vector of pixel intensities.
        factors: (n, l) loading matrix; l may be 0 for a pure diagonal Gaussian.
        noise: length-n vector of diagonal noise variances (must be >= 0).
    """

    mean: np.ndarray
    factors: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        mean = _readonly(np.asarray(self.mean).reshape(-1))
        factors = np.asarray(self.factors, dtype=np.float64)
        if factors.ndim != 2:
            raise ValueError(f"factors must be 2-D, got shape {factors.shape}")
        factors = _readonly(factors)
        noise = _readonly(np.asarray(self.noise).reshape(-1))
        n = mean.shape[0]
        if n < 1:
            raise ValueError("dimension must be >= 1")
        if factors.shape[0] != n or noise.shape[0] != n:
            raise ValueError(
                f"inconsistent shapes: mean {mean.shape}, factors {factors.shape}, "
                f"noise {noise.shape}"
            )
        if np.any(noise < 0):
            raise ValueError("noise variances must be nonnegative")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(factors))
                and np.all(np.isfinite(noise))):
            raise ValueError("non-finite parameter")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "noise", noise)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    def covariance(self) -> np.ndarray:
        """Dense covariance matrix; intended for small-n diagnostics only."""
        return self.factors @ self.factors.T + np.diag(self.noise)


@dataclass(frozen=True)
class MFAModel:
    """Weighted mixture of factor analyzers sharing one (n, l) geometry."""

    components: tuple[FactorAnalyzer, ...]
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) < 1:
            raise ValueError("mixture needs at least one component")
        n, l = comps[0].dim, comps[0].rank
        for c in comps:
            if c.dim != n or c.rank != l:
                raise ValueError("all components must share dimension and rank")
        w = _readonly(np.asarray(self.weights).reshape(-1))
        if w.shape[0] != len(comps):
            raise ValueError("one weight per component required")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def rank(self) -> int:
        return self.components[0].rank


@dataclass(frozen=True)
class MaskedImage:
    """Pixel buffer plus per-pixel observedness flags.

    Unobserved entries of ``pixels`` are canonically stored as 0 and ignored
    by every operation.
    """

    pixels: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1)
        obs = np.asarray(self.observed, dtype=bool).reshape(-1)
        if px.shape != obs.shape:
            raise ValueError("pixels and observed must have equal length")
        px = px.copy()
        px[~obs] = 0.0
        object.__setattr__(self, "pixels", _readonly(px))
        obs = np.ascontiguousarray(obs)
        obs.flags.writeable = False
        object.__setattr__(self, "observed", obs)

    @property
    def dim(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


def _chol_core(factors: np.ndarray, noise: np.ndarray):
    """Cholesky of the l-by-l core ``I + F^T diag(noise)^-1 F``.

    Returns (chol_lower, logdet_core).  Retries once with a small jitter if
    the factorization fails.
    """
    l = factors.shape[1]
    if l == 0:
        return np.zeros((0, 0)), 0.0
    scaled = factors / noise[:, None]
    core = np.eye(l) + factors.T @ scaled
    core = 0.5 * (core + core.T)
    try:
        chol = np.linalg.cholesky(core)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(core + CORE_JITTER * np.eye(l))
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return chol, logdet


def _fa_log_density(mean, factors, noise, x) -> float:
    """Gaussian log density in low-rank form, O(n l^2 + l^3).

    Uses the Woodbury inverse and the matching determinant identity:
    ``Sigma^-1 = D^-1 - D^-1 F core^-1 F^T D^-1`` and
    ``logdet Sigma = logdet core + sum(log noise)``.
    """
    n = mean.shape[0]
    z = x - mean
    u = z / noise
    quad = z @ u
    logdet = np.sum(np.log(noise))
    if factors.shape[1] > 0:
        chol, logdet_core = _chol_core(factors, noise)
        w = factors.T @ u
        v = solve_triangular(chol, w, lower=True)
        quad -= v @ v
        logdet += logdet_core
    return -0.5 * (n * LOG_2PI + logdet + quad)


def log_density(model: MFAModel, x: np.ndarray) -> float:
    """Mixture log density at a complete vector ``x``.

    Raises:
        ValueError: on dimension mismatch.
        DegenerateDensityError: if any component has a zero noise variance.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim:
        raise ValueError(f"x has length {x.shape[0]}, model dimension is {model.dim}")
    for c in model.components:
        if np.any(c.noise <= 0):
            raise DegenerateDensityError("component with zero noise variance")
    comp_logs = np.array(
        [_fa_log_density(c.mean, c.factors, c.noise, x) for c in model.components]
    )
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return float(logsumexp(log_w + comp_logs))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample(fa: FactorAnalyzer, rng, size: int | None = None) -> np.ndarray:
    """Draw from ``mean + sqrt(noise) * X + factors @ Y`` with standard normal X, Y.

    Args:
        fa: the component to sample.
        rng: integer seed or a numpy Generator.  The per-coordinate noise draw
            happens before the factor draw, so a given seed always yields the
            same sample.
        size: number of samples; None returns a single length-n vector,
            an integer m returns an (m, n) array.

    Same seed, same output.
    """
    g = _as_rng(rng)
    m = 1 if size is None else int(size)
    x = g.standard_normal((m, fa.dim))
    y = g.standard_normal((m, fa.rank))
    out = fa.mean + np.sqrt(fa.noise) * x + y @ fa.factors.T
    return out[0] if size is None else out


def sample_mixture(model: MFAModel, rng, size: int | None = None) -> np.ndarray:
    """Draw from the mixture: categorical component choice, then `sample`.

    A single-component mixture consumes no categorical draw, so it matches
    `sample` on the lone component seed-for-seed.
    """
    g = _as_rng(rng)
    if model.k == 1:
        return sample(model.components[0], g, size=size)
    m = 1 if size is None else int(size)
    idx = g.choice(model.k, size=m, p=model.weights)
    out = np.empty((m, model.dim))
    # Components are visited in index order so the draw sequence is a pure
    # function of the seed.
    for i, comp in enumerate(model.components):
        pick = idx == i
        cnt = int(pick.sum())
        if cnt:
            out[pick] = sample(comp, g, size=cnt)
    return out[0] if size is None else out


def _observed_loglik(comp: FactorAnalyzer, obs: np.ndarray, x_o: np.ndarray) -> float:
    """Component log likelihood of the observed pixels.

    Coordinates with exactly zero noise and zero factor rows are point
    masses (they arise from re-conditioning an already conditioned model):
    they gate consistency with x_o but contribute no density term, which is
    shared across components whenever the zero pattern is.
    """
    mu_o = comp.mean[obs]
    d_o = comp.noise[obs]
    A_o = comp.factors[obs]
    det = d_o == 0.0
    if det.any():
        if np.any(A_o[det] != 0.0):
            raise ConditioningError(
                "zero noise with a nonzero factor row on an observed pixel"
            )
        if np.any(np.abs(x_o[det] - mu_o[det]) > 1e-9):
            return -np.inf
    sto = ~det
    if not sto.any():
        return 0.0
    return _fa_log_density(mu_o[sto], A_o[sto], d_o[sto], x_o[sto])


def condition(model: MFAModel, img: MaskedImage) -> MFAModel:
    """Condition the mixture on the observed pixels of ``img``.

    Returns a k-component mixture over the full space.  Per component:

    * posterior weight proportional to (prior weight) * N(x_o; mu_o, Sigma_oo);
    * conditional mean on missing coordinates
      ``mu_m + F_m core^-1 F_o^T diag(d_o)^-1 (x_o - mu_o)``;
    * conditional covariance kept in factor form,
      ``diag(d_m) + (F_m L)(F_m L)^T`` with ``L L^T = core^-1`` and
      ``core = I + F_o^T diag(d_o)^-1 F_o`` (Woodbury);
    * observed coordinates become an exact point mass at x_o: mean set to the
      pixel value, factor rows and noise set to exact zeros.

    A fully observed image is legal and yields point-mass components whose
    weights are the posterior responsibilities.

    Raises:
        ValueError: on dimension mismatch.
        ConditioningError: if no pixel is observed, or every component has
            zero posterior likelihood.
    """
    if img.dim != model.dim:
        raise ValueError(f"image length {img.dim} != model dimension {model.dim}")
    obs = img.observed
    if not obs.any():
        raise ConditioningError("conditioning requires at least one observed pixel")
    mis = ~obs
    x_o = img.pixels[obs]
    n, l = model.dim, model.rank

    logliks = np.array([_observed_loglik(c, obs, x_o) for c in model.components])
    with np.errstate(divide="ignore"):
        log_post = np.log(model.weights) + logliks
    if np.all(np.isinf(log_post) & (log_post < 0)):
        raise ConditioningError("all components have zero posterior likelihood")
    post = np.exp(log_post - logsumexp(log_post))
    post[post < WEIGHT_FLUSH] = 0.0
    post = post / post.sum()

    new_comps = []
    for comp in model.components:
        new_mean = np.array(img.pixels)
        new_factors = np.zeros((n, l))
        new_noise = np.zeros(n)
        if mis.any():
            mu_o = comp.mean[obs]
            d_o = comp.noise[obs]
            A_o = comp.factors[obs]
            A_m = comp.factors[mis]
            sto = d_o > 0.0
            A_os, d_os = A_o[sto], d_o[sto]
            z = x_o[sto] - mu_o[sto]
            chol, _ = _chol_core(A_os, d_os) if l else (np.zeros((0, 0)), 0.0)
            if l:
                w = A_os.T @ (z / d_os)
                v = cho_solve((chol, True), w)
                new_mean[mis] = comp.mean[mis] + A_m @ v
                # F_m @ L with L = chol(core)^-T, so (F_m L)(F_m L)^T = F_m core^-1 F_m^T
                new_factors[mis] = solve_triangular(chol, A_m.T, lower=True).T
            else:
                new_mean[mis] = comp.mean[mis]
            new_noise[mis] = comp.noise[mis]
        new_comps.append(FactorAnalyzer(new_mean, new_factors, new_noise))
    return MFAModel(tuple(new_comps), post)


def conditional_mean_imputation(model: MFAModel, img: MaskedImage) -> np.ndarray:
    """Posterior mixture mean; observed pixels pass through exactly."""
    cond = condition(model, img)
    means = np.stack([c.mean for c in cond.components])
    out = cond.weights @ means
    # every component mean equals the pixel value on observed coordinates;
    # reassert it so the pass-through is bitwise rather than within rounding
    out[img.observed] = img.pixels[img.observed]
    return out
