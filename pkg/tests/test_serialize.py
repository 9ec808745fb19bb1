import numpy as np
import pytest

from misconv.layer import KernelStack
from misconv.serialize import load_kernels, load_model, save_kernels, save_model

from conftest import random_mfa


class TestModelContainer:
    def test_round_trip_is_exact(self, rng, tmp_path):
        model = random_mfa(rng, 7, 2, 3)
        path = tmp_path / "m.mfa"
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(back.weights, model.weights)
        for a, b in zip(model.components, back.components):
            assert np.array_equal(a.mean, b.mean)
            assert np.array_equal(a.factors, b.factors)
            assert np.array_equal(a.noise, b.noise)

    def test_rank_zero_round_trip(self, rng, tmp_path):
        model = random_mfa(rng, 5, 0, 1)
        save_model(model, tmp_path / "m.mfa")
        back = load_model(tmp_path / "m.mfa")
        assert back.rank == 0 and back.dim == 5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.mfa"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_truncation_detected(self, rng, tmp_path):
        model = random_mfa(rng, 4, 1, 2)
        path = tmp_path / "m.mfa"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="bytes"):
            load_model(path)

    def test_weight_sum_validated(self, rng, tmp_path):
        model = random_mfa(rng, 4, 1, 2)
        path = tmp_path / "m.mfa"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        # corrupt the first component weight (offset 16)
        blob[16:24] = np.array([0.9], dtype="<f8").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="sum"):
            load_model(path)

    def test_header_layout(self, rng, tmp_path):
        model = random_mfa(rng, 6, 2, 1)
        path = tmp_path / "m.mfa"
        save_model(model, path)
        blob = path.read_bytes()
        assert blob[:4] == b"MFA1"
        n, l, k = np.frombuffer(blob, dtype="<u4", count=3, offset=4)
        assert (n, l, k) == (6, 2, 1)


class TestKernelContainer:
    def test_round_trip_is_exact(self, rng, tmp_path):
        ks = KernelStack(rng.normal(size=(3, 2, 5, 4)), rng.normal(size=3),
                         (2, 1), (1, 2))
        path = tmp_path / "k.krn"
        save_kernels(ks, path)
        back = load_kernels(path)
        assert np.array_equal(back.weights, ks.weights)
        assert np.array_equal(back.bias, ks.bias)
        assert back.stride == ks.stride
        assert back.padding == ks.padding

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "k.krn"
        path.write_bytes(b"MFA1" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            load_kernels(path)

    def test_header_layout(self, rng, tmp_path):
        ks = KernelStack(rng.normal(size=(2, 1, 3, 3)), np.zeros(2), (2, 2), (1, 1))
        path = tmp_path / "k.krn"
        save_kernels(ks, path)
        blob = path.read_bytes()
        assert blob[:4] == b"KRN1"
        header = np.frombuffer(blob, dtype="<u4", count=8, offset=4)
        assert list(header) == [2, 1, 3, 3, 2, 2, 1, 1]
