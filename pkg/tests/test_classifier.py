import numpy as np
import pytest

from misconv.classifier import (
    Standardizer,
    TrainConfig,
    predict,
    softmax_loss_and_grad,
    train_linear_classifier,
)


def blobs(rng, n_per_class, centers, spread=0.3):
    xs, ys = [], []
    for label, c in enumerate(centers):
        xs.append(c + spread * rng.normal(size=(n_per_class, len(c))))
        ys.append(np.full(n_per_class, label))
    return np.concatenate(xs), np.concatenate(ys)


class TestTraining:
    def test_separable_blobs_reach_high_accuracy(self):
        rng = np.random.default_rng(0)
        centers = np.array([[3.0, 0.0], [-3.0, 0.0]])
        train_x, train_y = blobs(rng, 200, centers)
        test_x, test_y = blobs(rng, 100, centers)
        result = train_linear_classifier(
            train_x, train_y, TrainConfig(epochs=40, seed=1), test_x, test_y
        )
        assert result.accuracy >= 0.99

    def test_shuffled_labels_sit_at_chance(self):
        rng = np.random.default_rng(4)
        n, k = 4000, 10
        x = rng.normal(size=(n, 12))
        y = rng.integers(0, k, size=n)
        test_x = rng.normal(size=(1500, 12))
        test_y = rng.integers(0, k, size=1500)
        result = train_linear_classifier(
            x, y, TrainConfig(epochs=8, seed=0), test_x, test_y
        )
        bound = 3 * np.sqrt(0.1 * 0.9 / 1500)
        assert abs(result.accuracy - 0.1) < bound

    def test_divergence_raises_with_advice(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(64, 4))
        y = rng.integers(0, 2, size=64)
        with pytest.raises(ValueError, match="learning rate"):
            train_linear_classifier(
                x, y, TrainConfig(learning_rate=np.inf, epochs=5)
            )

    def test_one_class_rejected(self, rng):
        with pytest.raises(ValueError):
            train_linear_classifier(rng.normal(size=(10, 3)), np.zeros(10), TrainConfig())

    def test_nonfinite_features_rejected(self, rng):
        x = rng.normal(size=(10, 3))
        x[0, 0] = np.inf
        with pytest.raises(ValueError):
            train_linear_classifier(x, np.arange(10) % 2, TrainConfig())

    def test_deterministic(self, rng):
        x = rng.normal(size=(300, 6))
        y = (x[:, 0] > 0).astype(int)
        cfg = TrainConfig(epochs=5, seed=7)
        a = train_linear_classifier(x, y, cfg)
        b = train_linear_classifier(x, y, cfg)
        assert np.array_equal(a.weights, b.weights)
        assert a.epoch_loss == b.epoch_loss

    def test_standardizer_fitted_on_training_data_only(self, rng):
        x = rng.normal(loc=5.0, size=(200, 4))
        y = (x[:, 1] > 5.0).astype(int)
        result = train_linear_classifier(x, y, TrainConfig(epochs=2))
        assert result.standardizer.mean == pytest.approx(x.mean(axis=0))
        assert result.standardizer.std == pytest.approx(np.maximum(x.std(axis=0), 1e-8))


class TestGradient:
    def test_matches_central_finite_differences(self):
        # independent check of the analytic gradient, 20 random coordinates
        rng = np.random.default_rng(5)
        n, d, k = 40, 6, 3
        x = rng.normal(size=(n, d))
        onehot = np.eye(k)[rng.integers(0, k, size=n)]
        weights = rng.normal(size=(d, k))
        bias = rng.normal(size=k)
        _, gw, gb = softmax_loss_and_grad(weights, bias, x, onehot)
        grad = np.concatenate([gw.ravel(), gb])

        def loss_at(flat):
            w = flat[:d * k].reshape(d, k)
            b = flat[d * k:]
            return softmax_loss_and_grad(w, b, x, onehot)[0]

        flat0 = np.concatenate([weights.ravel(), bias])
        h = 1e-6
        for idx in rng.choice(flat0.shape[0], size=20, replace=False):
            lo, hi = flat0.copy(), flat0.copy()
            lo[idx] -= h
            hi[idx] += h
            numeric = (loss_at(hi) - loss_at(lo)) / (2 * h)
            denom = max(abs(numeric), abs(grad[idx]), 1e-8)
            assert abs(numeric - grad[idx]) / denom < 1e-5


class TestPrediction:
    def test_predict_uses_stored_standardizer(self, rng):
        x = rng.normal(size=(100, 3)) * 10 + 3
        y = (x[:, 0] > 3).astype(int)
        result = train_linear_classifier(x, y, TrainConfig(epochs=30, seed=2))
        pred = predict(result, x)
        assert (pred == y).mean() > 0.9

    def test_standardizer_floors_zero_variance(self):
        std = Standardizer.fit(np.ones((10, 2)))
        assert np.all(std.std >= 1e-8)
        out = std.transform(np.ones((3, 2)))
        assert np.all(np.isfinite(out))
