import numpy as np
import pytest

from misconv.mfa import FactorAnalyzer, MFAModel


def random_fa(rng, n, l, noise_lo=0.05, noise_hi=0.6):
    mean = rng.uniform(-1.0, 1.0, size=n)
    factors = rng.normal(0.0, 0.6 / np.sqrt(max(l, 1)), size=(n, l))
    noise = rng.uniform(noise_lo, noise_hi, size=n)
    return FactorAnalyzer(mean, factors, noise)


def random_mfa(rng, n, l, k, **kw):
    comps = tuple(random_fa(rng, n, l, **kw) for _ in range(k))
    w = rng.uniform(0.2, 1.0, size=k)
    return MFAModel(comps, w / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
