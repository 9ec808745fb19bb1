"""Command-line entry points.

Every report-producing subcommand writes CSV output and a rendered figure
next to it.  ``verify`` runs the oracle suite and exits nonzero on any
breach; ``run-experiment`` is the end-to-end classification comparison.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import plots
from .baselines import MFA_MEAN_MODES
from .classifier import train_linear_classifier
from .data import MaskSpec, load_idx, mask_batch, write_synthetic_dataset
from .em import fit, write_em_csv
from .layer import KernelStack, classic_forward_batch, expected_relu_scalar
from .metrics import evaluate_imputation, write_metrics_csv, zero_fill_metrics
from .mfa import FactorAnalyzer, MFAModel, conditional_mean_imputation
from .oracle import (
    dense_condition,
    mc_expected_forward,
    quadrature_expected_relu,
    write_oracle_csv,
)
from .pipeline import (
    ExperimentConfig,
    config_from_sources,
    extract_features,
    run_experiment,
    worker_count,
    write_manifest,
)
from .serialize import load_kernels, load_model, save_kernels, save_model


def _add_config_args(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return config_from_sources(args.config, overrides)


def cmd_make_data(args) -> int:
    paths = write_synthetic_dataset(args.out, args.train, args.test, seed=args.seed)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_train_mfa(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, _, _ = load_idx(cfg.train_images, cfg.train_labels)
    if cfg.train_count:
        images = images[:cfg.train_count]
    data = np.stack([img.pixels for img in images])
    model, report = fit(data, cfg.em_config())
    save_model(model, out_dir / "model.mfa")
    write_em_csv(report, out_dir / "em_report.csv")
    plots.save_em_curve(report, out_dir / "em_convergence.png")
    print(f"fitted k={model.k} l={model.rank} on {data.shape[0]} images; "
          f"{report.iterations_run} iterations, converged={report.converged}")
    print(f"model: {out_dir / 'model.mfa'}")
    return 0


def cmd_eval_imputation(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(cfg.model_file)
    images, _, chw = load_idx(cfg.test_images, cfg.test_labels)
    if cfg.test_count:
        images = images[:cfg.test_count]
    truths = [img.pixels for img in images]
    masked = mask_batch(truths, chw, cfg.mask_spec(), stream=1)
    model_metrics = evaluate_imputation(model, masked, truths)
    zero_metrics = zero_fill_metrics(masked, truths)
    rows = model_metrics.rows("mfa_mean") + zero_metrics.rows("zero")
    write_metrics_csv(rows, out_dir / "imputation_metrics.csv")
    n_show = min(8, len(masked))
    imputations = [conditional_mean_imputation(model, img) for img in masked[:n_show]]
    plots.save_imputation_grid(truths[:n_show], masked[:n_show], imputations,
                               chw[1:], out_dir / "imputation_examples.png")
    for arm, metric, value in rows:
        print(f"{arm} {metric} = {value:.6g}")
    return 0


def cmd_extract_features(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels, chw = load_idx(args.images, args.labels)
    if args.count:
        images = images[:args.count]
        labels = labels[:args.count]
    masked = mask_batch([img.pixels for img in images], chw, cfg.mask_spec(),
                        stream=args.mask_stream)
    model = load_model(cfg.model_file) if cfg.model_file else None
    kernels = load_kernels(cfg.kernel_file) if cfg.kernel_file else None
    if kernels is None:
        kernels = KernelStack.random(
            cfg.kernel_filters, chw[0], cfg.kernel_size, cfg.kernel_size,
            stride=(cfg.kernel_stride, cfg.kernel_stride),
            padding=(cfg.kernel_padding, cfg.kernel_padding), seed=cfg.kernel_seed,
        )
    from .pipeline import extend_kernels_for_mask

    mask_kernels = extend_kernels_for_mask(kernels, cfg.kernel_seed)
    feats = extract_features(args.arm, masked, chw, kernels, model=model,
                             mode=cfg.imputation_mode, mask_kernels=mask_kernels)
    out = out_dir / f"features_{args.arm}.npz"
    np.savez(out, features=feats, labels=labels)
    print(f"{args.arm}: features {feats.shape} -> {out}")
    return 0


def cmd_classify(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = np.load(args.train_features)
    test = np.load(args.test_features)
    result = train_linear_classifier(
        train["features"], train["labels"], cfg.train_config(),
        test["features"], test["labels"],
    )
    from .metrics import Metrics

    rows = Metrics(accuracy=result.accuracy,
                   per_class_accuracy=result.per_class_accuracy).rows(args.arm)
    write_metrics_csv(rows, out_dir / f"classify_{args.arm}.csv")
    plots.save_accuracy_bars({args.arm: result.accuracy},
                             out_dir / f"classify_{args.arm}.png")
    print(f"{args.arm} accuracy = {result.accuracy:.4f}")
    return 0


def cmd_bench(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    batches = tuple(int(b) for b in args.batches.split(","))
    l_values = tuple(int(v) for v in args.l_values.split(","))
    rows = bench_mod.bench_layer(sizes, batches, l_values,
                                 repeats=args.repeats, seed=args.seed)
    bench_mod.write_bench_csv(rows, out_dir / "timing.csv")
    plots.save_latency_chart(rows, out_dir / "timing.png")
    for key, ratio in sorted(bench_mod.latency_ratios(rows).items()):
        size, batch, l = key
        print(f"{size}x{size} batch={batch} l={l}: misconv/classic = {ratio:.2f}x")
    return 0


def _verify_conditioning(rng, n_cases) -> tuple[bool, str]:
    from .mfa import MaskedImage, condition

    worst_param, worst_weight = 0.0, 0.0
    for _ in range(n_cases):
        n = int(rng.integers(4, 33))
        l = int(rng.integers(0, 5))
        k = int(rng.integers(1, 4))
        comps = tuple(
            FactorAnalyzer(rng.uniform(-1, 1, n),
                           rng.normal(0, 0.5, (n, l)),
                           rng.uniform(0.05, 0.6, n))
            for _ in range(k)
        )
        w = rng.uniform(0.2, 1, k)
        model = MFAModel(comps, w / w.sum())
        observed = np.ones(n, dtype=bool)
        observed[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = False
        img = MaskedImage(rng.uniform(size=n), observed)
        cond = condition(model, img)
        dense_w, dense_means, dense_covs = dense_condition(model, img)
        mis = ~observed
        worst_weight = max(worst_weight, float(np.abs(cond.weights - dense_w).max()))
        for comp, dm, dc in zip(cond.components, dense_means, dense_covs):
            cov = comp.factors[mis] @ comp.factors[mis].T + np.diag(comp.noise[mis])
            worst_param = max(worst_param, float(np.abs(comp.mean[mis] - dm).max()),
                              float(np.abs(cov - dc).max()))
    ok = worst_param <= 1e-8 and worst_weight <= 1e-10
    return ok, (f"conditioning vs dense Schur oracle on {n_cases} cases: "
                f"max param err {worst_param:.2e} (tol 1e-8), "
                f"max weight err {worst_weight:.2e} (tol 1e-10)")


def _verify_expected_relu(rng, n_cases) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(1, 4))
        w = rng.uniform(0.2, 1, k)
        w /= w.sum()
        m = rng.uniform(-3, 3, k)
        s = rng.uniform(0, 2, k)
        worst = max(worst, abs(expected_relu_scalar(w, m, s)
                               - quadrature_expected_relu(w, m, s, abs_tol=1e-12)))
    return worst <= 1e-8, (f"expected ReLU closed form vs quadrature on {n_cases} "
                           f"mixtures: max err {worst:.2e} (tol 1e-8)")


def _verify_mc_forward(rng, n_cases, n_samples) -> tuple[bool, str, list]:
    reports = []
    for trial in range(n_cases):
        n_side = int(rng.integers(4, 9))
        k = int(rng.integers(1, 4))
        l = int(rng.integers(0, 5))
        n = n_side * n_side
        comps = tuple(
            FactorAnalyzer(rng.uniform(0, 1, n), rng.normal(0, 0.4, (n, l)),
                           rng.uniform(0.02, 0.3, n))
            for _ in range(k)
        )
        w = rng.uniform(0.2, 1, k)
        model = MFAModel(comps, w / w.sum())
        ks = KernelStack(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))
        reports.append(mc_expected_forward(
            model, ks, (n_side, n_side), activation="relu",
            n_samples=n_samples, seed=trial, label=f"trial {trial}",
        ))
    ok = all(r.passed() for r in reports)
    max_z = max(r.max_z for r in reports)
    return ok, (f"Monte-Carlo forward on {n_cases} configs x {n_samples} samples: "
                f"max z {max_z:.2f} (limit 5), "
                f"worst frac(z>4) {max(r.frac_above_fail for r in reports):.4f}"), reports


def cmd_verify(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    n_mc = 10 if args.quick else 50
    n_samples = 50_000 if args.quick else 200_000

    results = []
    results.append(_verify_conditioning(rng, 20 if args.quick else 100))
    results.append(_verify_expected_relu(rng, 50 if args.quick else 200))
    ok_mc, msg_mc, reports = _verify_mc_forward(rng, n_mc, n_samples)
    results.append((ok_mc, msg_mc))

    for i, report in enumerate(reports):
        write_oracle_csv(report, out_dir / f"mc_forward_{i:02d}.csv")
    plots.save_z_histogram(reports, out_dir / "mc_z_histogram.png")

    all_ok = True
    for ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'} {msg}")
        all_ok &= ok
    print(f"verify: {'PASS' if all_ok else 'FAIL'}")
    return 0 if all_ok else 1


def cmd_run_experiment(args) -> int:
    cfg = _config_from_args(args)
    accuracies = run_experiment(cfg)
    for arm, acc in accuracies.items():
        print(f"{arm}: accuracy = {acc:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="misconv",
        description="probabilistic first-layer convolution for incomplete images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic digit dataset as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=10000)
    p.add_argument("--test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train-mfa", help="fit the mixture model on training images")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train_mfa)

    p = sub.add_parser("eval-imputation", help="score conditional-mean imputation")
    _add_config_args(p)
    p.set_defaults(fn=cmd_eval_imputation)

    p = sub.add_parser("extract-features", help="first-layer features for one arm")
    _add_config_args(p)
    p.add_argument("--arm", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--mask-stream", type=int, default=0)
    p.set_defaults(fn=cmd_extract_features)

    p = sub.add_parser("classify", help="train the linear head on saved features")
    _add_config_args(p)
    p.add_argument("--arm", default="features")
    p.add_argument("--train-features", required=True)
    p.add_argument("--test-features", required=True)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("bench", help="latency of classic vs probabilistic forward")
    p.add_argument("--sizes", default="28,32,64")
    p.add_argument("--batches", default="16,32,64")
    p.add_argument("--l-values", default="4")
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the oracle suite; nonzero exit on breach")
    p.add_argument("--out-dir", default="verify_out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("run-experiment", help="end-to-end classification comparison")
    _add_config_args(p)
    p.set_defaults(fn=cmd_run_experiment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
