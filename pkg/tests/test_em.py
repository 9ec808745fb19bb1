import numpy as np
import pytest

from misconv.em import EMConfig, fit, write_em_csv
from misconv.mfa import FactorAnalyzer, MFAModel, sample

from conftest import random_fa


class TestClosedForms:
    def test_k1_l0_is_sample_mean_and_variance(self, rng):
        data = rng.normal(loc=2.0, scale=1.5, size=(400, 6))
        cfg = EMConfig(k=1, l=0, max_iters=50, seed=0)
        model, report = fit(data, cfg)
        comp = model.components[0]
        assert comp.mean == pytest.approx(data.mean(axis=0), abs=1e-9)
        expected_var = np.maximum(data.var(axis=0), cfg.d_floor)
        assert comp.noise == pytest.approx(expected_var, abs=1e-9)
        assert report.converged

    def test_variance_floor_applies(self, rng):
        data = np.zeros((50, 4))
        data[:, 0] = rng.normal(size=50)  # other columns constant
        cfg = EMConfig(k=1, l=0, max_iters=10, d_floor=1e-4)
        model, _ = fit(data, cfg)
        assert np.all(model.components[0].noise >= cfg.d_floor)


class TestMonotonicity:
    @pytest.mark.parametrize("k,l", [(1, 2), (3, 0), (3, 2)])
    def test_loglik_never_decreases(self, k, l):
        rng = np.random.default_rng(11)
        centers = rng.uniform(-2, 2, size=(3, 10))
        data = np.concatenate([
            c + 0.3 * rng.normal(size=(200, 10)) for c in centers
        ])
        _, report = fit(data, EMConfig(k=k, l=l, max_iters=60, seed=5))
        ll = np.asarray(report.loglik)
        assert np.all(np.diff(ll) >= -1e-7)


class TestRecovery:
    def test_generate_then_fit_recovers_covariance(self):
        rng = np.random.default_rng(3)
        true = random_fa(rng, 16, 2, noise_lo=0.05, noise_hi=0.2)
        data = sample(true, 99, size=5000)
        model, report = fit(
            data, EMConfig(k=1, l=2, max_iters=300, ll_tol=1e-9, seed=0)
        )
        est = model.components[0]
        sigma_true = true.covariance()
        sigma_est = est.factors @ est.factors.T + np.diag(est.noise)
        rel = np.linalg.norm(sigma_est - sigma_true) / np.linalg.norm(sigma_true)
        assert rel < 0.10
        assert np.max(np.abs(est.mean - true.mean)) < 0.05


class TestContract:
    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            fit(rng.normal(size=(5, 4)), EMConfig(k=2, l=2))

    def test_nan_rejected(self, rng):
        data = rng.normal(size=(50, 4))
        data[3, 2] = np.nan
        with pytest.raises(ValueError):
            fit(data, EMConfig(k=1, l=1))

    def test_deterministic_given_seed(self, rng):
        data = rng.normal(size=(300, 8))
        cfg = EMConfig(k=2, l=1, max_iters=25, seed=42)
        m1, r1 = fit(data, cfg)
        m2, r2 = fit(data, cfg)
        assert np.array_equal(m1.weights, m2.weights)
        for a, b in zip(m1.components, m2.components):
            assert np.array_equal(a.mean, b.mean)
            assert np.array_equal(a.factors, b.factors)
            assert np.array_equal(a.noise, b.noise)
        assert r1.loglik == r2.loglik

    def test_output_satisfies_model_invariants(self, rng):
        data = rng.normal(size=(200, 6))
        cfg = EMConfig(k=2, l=2, max_iters=30, seed=1)
        model, _ = fit(data, cfg)
        assert isinstance(model, MFAModel)
        for comp in model.components:
            assert np.all(comp.noise >= cfg.d_floor)

    def test_report_csv(self, rng, tmp_path):
        data = rng.normal(size=(100, 4))
        _, report = fit(data, EMConfig(k=1, l=1, max_iters=10))
        path = tmp_path / "em.csv"
        write_em_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,loglik"
        assert len(lines) == len(report.loglik) + 1
