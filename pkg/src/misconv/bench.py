"""Forward-pass latency comparison: standard convolution vs expected activation.

Measures wall time of a batched forward through the standard convolution and
through the probabilistic layer (k = 1 models with a configurable factor
count) over a grid of image sizes and batch sizes.  The two arms are timed
back to back within each repeat and the headline ratio is the median of the
per-repeat ratios, which cancels the multi-x clock-speed swings shared
sandboxes exhibit.  BLAS pools are pinned to one thread while timing so a
measured call never spans a thread handoff; warm-up iterations are excluded.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .layer import KernelStack, classic_forward_batch, misconv_forward_batch
from .mfa import FactorAnalyzer, MFAModel

DEFAULT_IMAGE_SIZES = (28, 32, 64)
DEFAULT_BATCH_SIZES = (16, 32, 64)
MIN_REPEATS = 100


@dataclass(frozen=True)
class BenchRow:
    input_size: int
    batch: int
    layer: str  # "classic" | "misconv"
    median_s: float
    iqr_s: float
    factor_count: int
    ratio_vs_classic: float | None = None  # median of per-repeat ratios


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input_size", "batch", "layer", "median_s", "iqr_s"])
        for r in rows:
            w.writerow([r.input_size, r.batch, r.layer, repr(r.median_s), repr(r.iqr_s)])


def _time_pair(fn_a, fn_b, repeats, warmup):
    """Interleaved timing; returns (times_a, times_b) arrays of length repeats."""
    for _ in range(warmup):
        fn_a()
        fn_b()
    times_a = np.empty(repeats)
    times_b = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn_a()
        times_a[i] = time.perf_counter() - t0
        t0 = time.perf_counter()
        fn_b()
        times_b[i] = time.perf_counter() - t0
    return times_a, times_b


def _median_iqr(samples):
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1)


def _batch_models(rng, batch, n, l):
    models = []
    for _ in range(batch):
        mean = rng.uniform(0.0, 1.0, size=n)
        factors = 0.1 * rng.standard_normal((n, l))
        noise = rng.uniform(0.01, 0.05, size=n)
        models.append(MFAModel((FactorAnalyzer(mean, factors, noise),),
                               np.array([1.0])))
    return models


def bench_layer(image_sizes=DEFAULT_IMAGE_SIZES, batch_sizes=DEFAULT_BATCH_SIZES,
                l_values=(4,), repeats=200, warmup=10, seed=0,
                kernels: KernelStack | None = None) -> list[BenchRow]:
    """Time both layers over the size/batch grid; two rows per cell.

    Raises:
        ValueError: repeats below 100 (medians get too noisy to report).
    """
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}")
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for size in image_sizes:
            hw = (size, size)
            for batch in batch_sizes:
                for l in l_values:
                    ks = kernels
                    if ks is None:
                        ks = KernelStack.random(32, 1, 5, 5, stride=(2, 2),
                                                padding=(2, 2), seed=seed)
                    models = _batch_models(rng, batch, size * size, l)
                    imgs = np.stack([m.components[0].mean for m in models])

                    t_classic, t_misconv = _time_pair(
                        lambda: classic_forward_batch(imgs, ks, hw, activation="relu"),
                        lambda: misconv_forward_batch(models, ks, hw, activation="relu"),
                        repeats, warmup,
                    )
                    ratio = float(np.median(t_misconv / t_classic))
                    med, iqr = _median_iqr(t_classic)
                    rows.append(BenchRow(size, batch, "classic", med, iqr, l))
                    med, iqr = _median_iqr(t_misconv)
                    rows.append(BenchRow(size, batch, "misconv", med, iqr, l, ratio))
    return rows


def latency_ratios(rows) -> dict:
    """(input_size, batch, factor_count) -> per-repeat median latency ratio."""
    return {
        (r.input_size, r.batch, r.factor_count): r.ratio_vs_classic
        for r in rows
        if r.layer == "misconv" and r.ratio_vs_classic is not None
    }
