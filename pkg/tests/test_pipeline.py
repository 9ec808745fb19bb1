import os

import numpy as np
import pytest

from misconv.data import MaskSpec, write_synthetic_dataset, load_idx, mask_batch
from misconv.layer import KernelStack
from misconv.mfa import MaskedImage
from misconv.oracle import mc_expected_forward
from misconv.pipeline import (
    ExperimentConfig,
    config_from_sources,
    extend_kernels_for_mask,
    extract_features,
    parse_config_text,
    run_experiment,
    worker_count,
    write_manifest,
)

from conftest import random_mfa


class TestConfig:
    def test_grammar_with_comments(self):
        text = """
        # comment line
        train_count = 100  # trailing comment
        mask_pattern = noise

        em_k = 3
        """
        values = parse_config_text(text)
        assert values == {"train_count": "100", "mask_pattern": "noise", "em_k": "3"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("not_a_key = 1")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just a line")

    def test_overrides_beat_file_values(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("train_count = 100\nem_k = 4\n")
        cfg = config_from_sources(path, {"em_k": "9"})
        assert cfg.train_count == 100
        assert cfg.em_k == 9
        assert cfg.em_l == ExperimentConfig().em_l  # untouched default

    def test_types_are_cast(self, tmp_path):
        cfg = config_from_sources(None, {"classifier_lr": "0.25", "test_count": "7"})
        assert cfg.classifier_lr == 0.25
        assert cfg.test_count == 7

    def test_arm_validation(self):
        with pytest.raises(ValueError, match="unknown arm"):
            config_from_sources(None, {"arms": "misconv,telepathy"}).arm_list()


class TestMaskArmKernels:
    def test_pixel_channels_identical(self, rng):
        base = KernelStack(rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4))
        extended = extend_kernels_for_mask(base, seed=3)
        assert extended.weights.shape == (4, 4, 3, 3)
        assert np.array_equal(extended.weights[:, :2], base.weights)
        assert np.array_equal(extended.bias, base.bias)

    def test_deterministic(self, rng):
        base = KernelStack(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
        a = extend_kernels_for_mask(base, seed=5)
        b = extend_kernels_for_mask(base, seed=5)
        assert np.array_equal(a.weights, b.weights)


class TestExtractFeatures:
    def test_fully_observed_arms_coincide(self, rng):
        # no missing pixels: conditioning gives point masses, so every arm
        # that feeds pixel channels through the same kernels must agree
        model = random_mfa(rng, 16, 2, 2)
        ks = KernelStack(rng.normal(size=(3, 1, 3, 3)), rng.normal(size=3))
        imgs = [MaskedImage(rng.uniform(size=16), np.ones(16, dtype=bool))
                for _ in range(4)]
        chw = (1, 4, 4)
        f_mis = extract_features("misconv", imgs, chw, ks, model=model, threads=1)
        f_zero = extract_features("zero", imgs, chw, ks, threads=1)
        f_mean = extract_features("mfa_mean", imgs, chw, ks, model=model, threads=1)
        assert f_mis == pytest.approx(f_zero, abs=1e-12)
        assert f_mean == pytest.approx(f_zero, abs=1e-12)

    def test_feature_matrix_shape(self, rng):
        ks = KernelStack(rng.normal(size=(5, 1, 3, 3)), np.zeros(5), (2, 2), (1, 1))
        imgs = [MaskedImage(rng.uniform(size=36), np.ones(36, dtype=bool))
                for _ in range(3)]
        out_h, out_w = ks.out_shape((6, 6))
        feats = extract_features("zero", imgs, (1, 6, 6), ks, threads=1)
        assert feats.shape == (3, 5 * out_h * out_w)

    def test_misconv_features_match_sampling_oracle(self, rng):
        from misconv.mfa import condition

        model = random_mfa(rng, 36, 2, 2)
        observed = np.ones(36, dtype=bool)
        observed[rng.choice(36, size=12, replace=False)] = False
        img = MaskedImage(rng.uniform(size=36), observed)
        ks = KernelStack(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))
        feats = extract_features("misconv", [img], (1, 6, 6), ks, model=model,
                                 threads=1)
        report = mc_expected_forward(condition(model, img), ks, (6, 6),
                                     n_samples=100_000, seed=0,
                                     analytic=feats[0])
        assert report.passed(), report.summary()

    def test_thread_count_does_not_change_results(self, rng):
        model = random_mfa(rng, 16, 1, 2)
        ks = KernelStack(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
        observed = np.ones(16, dtype=bool)
        observed[:5] = False
        imgs = [MaskedImage(rng.uniform(size=16), np.roll(observed, i))
                for i in range(130)]  # spans multiple chunks
        a = extract_features("misconv", imgs, (1, 4, 4), ks, model=model, threads=1)
        b = extract_features("misconv", imgs, (1, 4, 4), ks, model=model, threads=4)
        assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    return write_synthetic_dataset(out, 150, 40, seed=3)


def small_config(paths, out_dir, **extra) -> ExperimentConfig:
    overrides = {
        "train_images": paths["train_images"],
        "train_labels": paths["train_labels"],
        "test_images": paths["test_images"],
        "test_labels": paths["test_labels"],
        "train_count": "150",
        "test_count": "40",
        "em_k": "2",
        "em_l": "1",
        "em_max_iters": "15",
        "kernel_filters": "6",
        "classifier_epochs": "5",
        "output_dir": str(out_dir),
    }
    overrides.update({k: str(v) for k, v in extra.items()})
    return config_from_sources(None, overrides)


class TestRunExperiment:
    def test_outputs_and_fairness(self, small_dataset, tmp_path):
        cfg = small_config(small_dataset, tmp_path / "run",
                           arms="misconv,zero,mask,mfa_mean")
        accuracies = run_experiment(cfg, threads=1)
        assert set(accuracies) == {"misconv", "zero", "mask", "mfa_mean"}
        out = tmp_path / "run"
        for name in ("metrics.csv", "manifest.txt", "model.mfa", "kernels.krn",
                     "accuracy_by_arm.png", "em_convergence.png", "em_report.csv"):
            assert (out / name).exists(), name

    def test_metrics_identical_across_runs_and_threads(self, small_dataset, tmp_path):
        cfg1 = small_config(small_dataset, tmp_path / "a")
        run_experiment(cfg1, threads=1)
        cfg2 = small_config(small_dataset, tmp_path / "b")
        run_experiment(cfg2, threads=3)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_manifest_lists_input_hashes(self, small_dataset, tmp_path):
        cfg = small_config(small_dataset, tmp_path / "m")
        write_manifest(cfg, tmp_path / "manifest.txt")
        text = (tmp_path / "manifest.txt").read_text()
        assert "train_images sha256 = " in text
        assert "em_k = 2" in text


class TestWorkerCount:
    def test_env_cap_respected(self, monkeypatch):
        monkeypatch.setenv("MISCONV_THREADS", "3")
        assert worker_count() == 3

    def test_default_positive(self, monkeypatch):
        monkeypatch.delenv("MISCONV_THREADS", raising=False)
        assert worker_count() >= 1
