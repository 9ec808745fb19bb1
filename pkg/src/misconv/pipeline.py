"""Experiment plumbing: config files, feature extraction, end-to-end runs.

An experiment compares feature-extraction arms that share one kernel stack,
one set of masks, one train/test split and one classifier setup, so the only
varying factor is how each arm handles the missing pixels.  All seeds are
explicit; results are bitwise reproducible for any worker count (work is cut
into fixed-size chunks whose content does not depend on the pool size).
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .baselines import ImputationStrategy, impute
from .classifier import TrainConfig, train_linear_classifier
from .data import MaskSpec, load_idx, mask_batch
from .em import EMConfig, fit, write_em_csv
from .layer import KernelStack, classic_forward_batch, misconv_forward_batch
from .metrics import Metrics, write_metrics_csv
from .mfa import MFAModel, condition
from .serialize import load_kernels, load_model, save_kernels, save_model

THREADS_ENV = "MISCONV_THREADS"
CHUNK = 64  # images per work unit; fixed so results never depend on workers

ARM_NAMES = ("misconv", "zero", "mask", "mfa_mean")


def worker_count() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ExperimentConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_count: int = 0  # 0 = use every example
    test_count: int = 0
    mask_pattern: str = "square"
    mask_area_fraction: float = 0.25
    mask_missing_fraction: float = 0.75
    mask_seed: int = 0
    arms: str = "misconv,zero,mfa_mean"
    imputation_mode: str = "mixture-mean"
    model_file: str = ""
    em_k: int = 8
    em_l: int = 4
    em_max_iters: int = 200
    em_ll_tol: float = 1e-6
    em_d_floor: float = 1e-6
    em_seed: int = 0
    em_init: str = "kmeans"
    kernel_file: str = ""
    kernel_filters: int = 32
    kernel_size: int = 5
    kernel_stride: int = 2
    kernel_padding: int = 2
    kernel_seed: int = 0
    classifier_lr: float = 0.1
    classifier_epochs: int = 30
    classifier_batch: int = 128
    classifier_seed: int = 0
    output_dir: str = "out"

    def arm_list(self) -> list[str]:
        arms = [a.strip() for a in self.arms.split(",") if a.strip()]
        for a in arms:
            if a not in ARM_NAMES:
                raise ValueError(f"unknown arm {a!r}; choose from {ARM_NAMES}")
        return arms

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.mask_pattern, self.mask_area_fraction,
                        self.mask_missing_fraction, self.mask_seed)

    def em_config(self) -> EMConfig:
        return EMConfig(self.em_k, self.em_l, self.em_max_iters, self.em_ll_tol,
                        self.em_d_floor, self.em_seed, self.em_init)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.classifier_lr, self.classifier_epochs,
                           self.classifier_batch, self.classifier_seed)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    """Parse the flat ``key = value`` grammar (# starts a comment)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def config_from_sources(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File values first, then override pairs (e.g. from CLI flags)."""
    values: dict = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    for key, val in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = val
    cfg = ExperimentConfig()
    casts = {"int": int, "float": float, "str": str}
    typed = {
        key: casts[_FIELD_TYPES[key]](val) if isinstance(val, str) else val
        for key, val in values.items()
    }
    return replace(cfg, **typed)


def _chunked(seq, size=CHUNK):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def _parallel_map(fn, chunks, threads):
    if threads <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def extend_kernels_for_mask(kernels: KernelStack, seed: int) -> KernelStack:
    """Append indicator-channel filters; pixel-channel weights stay identical."""
    f, c, kh, kw = kernels.weights.shape
    rng = np.random.default_rng((seed, 1))
    scale = np.sqrt(2.0 / (c * kh * kw))
    extra = scale * rng.standard_normal((f, c, kh, kw))
    return KernelStack(np.concatenate([kernels.weights, extra], axis=1),
                       kernels.bias, kernels.stride, kernels.padding)


def extract_features(arm: str, masked_images, chw, kernels: KernelStack,
                     model: MFAModel | None = None, mode: str = "mixture-mean",
                     mask_kernels: KernelStack | None = None,
                     threads: int | None = None) -> np.ndarray:
    """First-layer feature matrix (n_images, F*H'*W') for one arm."""
    if arm not in ARM_NAMES:
        raise ValueError(f"unknown arm {arm!r}")
    c, h, w = chw
    hw = (h, w)
    threads = worker_count() if threads is None else threads
    chunks = list(_chunked(list(masked_images)))

    if arm == "misconv":
        if model is None:
            raise ValueError("misconv arm needs a model")

        def run(chunk):
            conds = [condition(model, img) for img in chunk]
            out = misconv_forward_batch(conds, kernels, hw, activation="relu")
            return out.reshape(len(chunk), -1)

    elif arm == "mask":
        ks = mask_kernels
        if ks is None:
            raise ValueError("mask arm needs the extended kernel stack")
        strategy = ImputationStrategy("mask_channel")

        def run(chunk):
            vecs = np.stack([impute(strategy, img)[0] for img in chunk])
            out = classic_forward_batch(vecs, ks, hw, activation="relu")
            return out.reshape(len(chunk), -1)

    else:
        kind = "zero" if arm == "zero" else "mfa_mean"
        strategy = ImputationStrategy(kind, model=model, mode=mode)

        def run(chunk):
            vecs = np.stack([impute(strategy, img)[0] for img in chunk])
            out = classic_forward_batch(vecs, kernels, hw, activation="relu")
            return out.reshape(len(chunk), -1)

    return np.concatenate(_parallel_map(run, chunks, threads), axis=0)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(cfg: ExperimentConfig, path, extras: dict | None = None) -> None:
    """Config echo plus content hashes of every input file, plain text."""
    lines = ["[config]"]
    for f in fields(ExperimentConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    lines.append("")
    lines.append("[inputs]")
    for name in ("train_images", "train_labels", "test_images", "test_labels",
                 "model_file", "kernel_file"):
        p = getattr(cfg, name)
        if p and Path(p).exists():
            lines.append(f"{name} sha256 = {_sha256(p)}")
    if extras:
        lines.append("")
        lines.append("[outputs]")
        for key in sorted(extras):
            lines.append(f"{key} = {extras[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def _load_split(images_path, labels_path, count):
    images, labels, chw = load_idx(images_path, labels_path)
    if count and count < len(images):
        images = images[:count]
        labels = labels[:count]
    return images, labels, chw


def prepare_model(cfg: ExperimentConfig, train_pixels, out_dir: Path):
    """Load the model file if given, else fit by EM on the training pixels."""
    if cfg.model_file:
        return load_model(cfg.model_file), None
    model, report = fit(train_pixels, cfg.em_config())
    save_model(model, out_dir / "model.mfa")
    write_em_csv(report, out_dir / "em_report.csv")
    return model, report


def prepare_kernels(cfg: ExperimentConfig, in_channels: int, out_dir: Path):
    if cfg.kernel_file:
        return load_kernels(cfg.kernel_file)
    ks = KernelStack.random(
        cfg.kernel_filters, in_channels, cfg.kernel_size, cfg.kernel_size,
        stride=(cfg.kernel_stride, cfg.kernel_stride),
        padding=(cfg.kernel_padding, cfg.kernel_padding), seed=cfg.kernel_seed,
    )
    save_kernels(ks, out_dir / "kernels.krn")
    return ks


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> dict:
    """End-to-end classification comparison; returns {arm: test accuracy}.

    Writes metrics.csv, the manifest, the fitted model/kernels and figures
    into cfg.output_dir.  Every arm shares the kernel stack, the masks, the
    split and the classifier seed.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = worker_count() if threads is None else threads

    train_images, train_labels, chw = _load_split(
        cfg.train_images, cfg.train_labels, cfg.train_count
    )
    test_images, test_labels, chw_test = _load_split(
        cfg.test_images, cfg.test_labels, cfg.test_count
    )
    if chw != chw_test:
        raise ValueError(f"train geometry {chw} != test geometry {chw_test}")

    spec = cfg.mask_spec()
    train_pixels = np.stack([img.pixels for img in train_images])
    masked_train = mask_batch(train_pixels, chw, spec, stream=0)
    masked_test = mask_batch([img.pixels for img in test_images], chw, spec, stream=1)

    arms = cfg.arm_list()
    needs_model = bool({"misconv", "mfa_mean"} & set(arms))
    model = None
    em_report = None
    if needs_model:
        model, em_report = prepare_model(cfg, train_pixels, out_dir)
        if model.dim != int(np.prod(chw)):
            raise ValueError("model dimension does not match the image geometry")

    kernels = prepare_kernels(cfg, chw[0], out_dir)
    mask_kernels = (extend_kernels_for_mask(kernels, cfg.kernel_seed)
                    if "mask" in arms else None)

    rows = []
    accuracies = {}
    for arm in arms:
        feats_train = extract_features(
            arm, masked_train, chw, kernels, model=model,
            mode=cfg.imputation_mode, mask_kernels=mask_kernels, threads=threads,
        )
        feats_test = extract_features(
            arm, masked_test, chw, kernels, model=model,
            mode=cfg.imputation_mode, mask_kernels=mask_kernels, threads=threads,
        )
        result = train_linear_classifier(
            feats_train, train_labels, cfg.train_config(), feats_test, test_labels
        )
        accuracies[arm] = result.accuracy
        rows.extend(Metrics(accuracy=result.accuracy,
                            per_class_accuracy=result.per_class_accuracy).rows(arm))

    write_metrics_csv(rows, out_dir / "metrics.csv")
    write_manifest(cfg, out_dir / "manifest.txt")

    from . import plots

    plots.save_accuracy_bars(accuracies, out_dir / "accuracy_by_arm.png")
    if em_report is not None:
        plots.save_em_curve(em_report, out_dir / "em_convergence.png")
    return accuracies
