"""Imputation and classification quality metrics.

MSE and PSNR are evaluated on missing pixels only (PSNR with MAX = 1.0,
capped at 99 dB when the error is exactly zero to keep CSV output numeric).
NLL is the negative log density of the true missing values under the
conditioned mixture, evaluated densely on the missing block.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .mfa import MaskedImage, MFAModel, condition

PSNR_CAP_DB = 99.0


@dataclass
class Metrics:
    accuracy: float | None = None
    per_class_accuracy: np.ndarray | None = None
    psnr: float | None = None
    mse: float | None = None
    nll: float | None = None

    def rows(self, arm: str):
        out = []
        for name in ("accuracy", "psnr", "mse", "nll"):
            val = getattr(self, name)
            if val is not None:
                out.append((arm, name, val))
        if self.per_class_accuracy is not None:
            for i, v in enumerate(self.per_class_accuracy):
                out.append((arm, f"accuracy_class_{i}", float(v)))
        return out


def write_metrics_csv(rows, path) -> None:
    """Rows of (arm, metric, value); values serialized via repr for exactness."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "metric", "value"])
        for arm, metric, value in rows:
            w.writerow([arm, metric, repr(float(value))])


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def masked_mse(imputations, truths, masks) -> float:
    """Squared error over missing pixels pooled across a batch."""
    total, count = 0.0, 0
    for imp, truth, img in zip(imputations, truths, masks):
        mis = ~img.observed
        diff = np.asarray(imp).reshape(-1)[mis] - np.asarray(truth).reshape(-1)[mis]
        total += float(diff @ diff)
        count += int(mis.sum())
    if count == 0:
        raise ValueError("no missing pixels to score")
    return total / count


def _missing_block_nll(cond: MFAModel, truth_missing, mis) -> float:
    """-log of the conditioned mixture density at the true missing values, dense."""
    logs = []
    with np.errstate(divide="ignore"):
        for w, comp in zip(cond.weights, cond.components):
            cov = (comp.factors[mis] @ comp.factors[mis].T
                   + np.diag(comp.noise[mis]))
            try:
                lp = multivariate_normal(comp.mean[mis], cov).logpdf(truth_missing)
            except (np.linalg.LinAlgError, ValueError):
                warnings.warn("degenerate conditional covariance; NLL set to +inf")
                return np.inf
            logs.append(np.log(w) + lp)
    return -float(logsumexp(logs))


def evaluate_imputation(model: MFAModel, masked_images, ground_truth) -> Metrics:
    """Score conditional-mean imputation against the simulated ground truth.

    ground_truth is (N, n) complete pixel vectors matching masked_images.
    """
    imputations, nlls = [], []
    for img, truth in zip(masked_images, ground_truth):
        cond = condition(model, img)
        means = np.stack([c.mean for c in cond.components])
        imputations.append(cond.weights @ means)
        mis = ~img.observed
        if mis.any():
            nlls.append(_missing_block_nll(cond, np.asarray(truth).reshape(-1)[mis], mis))
    mse = masked_mse(imputations, ground_truth, masked_images)
    nll = float(np.mean(nlls)) if nlls else np.nan
    return Metrics(mse=mse, psnr=psnr_from_mse(mse), nll=nll)


def zero_fill_metrics(masked_images, ground_truth) -> Metrics:
    """Reference arm: missing pixels imputed as zero."""
    zeros = [img.pixels for img in masked_images]  # canonical storage is 0
    mse = masked_mse(zeros, ground_truth, masked_images)
    return Metrics(mse=mse, psnr=psnr_from_mse(mse))
