"""Convolution push-forward of an MFA and the expected ReLU activation.

A convolution is a linear map, so pushing a factor analyzer through it stays
a factor analyzer: the mean map is the ordinary convolution of the mean, and
the per-coordinate variance map is the squared-weight convolution of the
diagonal noise plus the sum of squared convolutions of the factor columns
(off-diagonal output correlations are dropped).  The expected ReLU of the
resulting per-coordinate 1-D Gaussian mixture has the closed form
``sum_i p_i (m_i * Phi(m_i / s_i) + s_i * phi(m_i / s_i))``.

Convolution semantics are cross-correlation (no kernel flip) with zero
padding; bias enters the mean path only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .mfa import MFAModel

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Per-process tally of convolution passes (units: images convolved); purely
# diagnostic, not synchronized across threads.
_CONV_CALLS = {"standard": 0, "squared": 0}


def reset_conv_call_counts() -> None:
    _CONV_CALLS["standard"] = 0
    _CONV_CALLS["squared"] = 0


def conv_call_counts() -> dict:
    return dict(_CONV_CALLS)


@dataclass(frozen=True)
class KernelStack:
    """A bank of convolution filters with stride and zero padding.

    Attributes:
        weights: (F, C, kh, kw) filter tensor.
        bias: length-F vector added on the mean/value path.
        stride: (stride_h, stride_w), both >= 1.
        padding: (pad_h, pad_w), both >= 0.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 4:
            raise ValueError(f"weights must be (F, C, kh, kw), got shape {w.shape}")
        b = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64).reshape(-1))
        if b.shape[0] != w.shape[0]:
            raise ValueError("one bias per filter required")
        stride = (int(self.stride[0]), int(self.stride[1]))
        padding = (int(self.padding[0]), int(self.padding[1]))
        if min(stride) < 1 or min(padding) < 0 or min(w.shape[2:]) < 1:
            raise ValueError("stride >= 1, padding >= 0, kernel dims >= 1 required")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def out_shape(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        h, w = image_hw
        kh, kw = self.weights.shape[2:]
        out_h = (h + 2 * self.padding[0] - kh) // self.stride[0] + 1
        out_w = (w + 2 * self.padding[1] - kw) // self.stride[1] + 1
        if out_h < 1 or out_w < 1:
            raise ValueError(f"kernel {kh}x{kw} does not fit a {h}x{w} input")
        return out_h, out_w

    @classmethod
    def random(cls, n_filters, in_channels, kh, kw, stride=(1, 1), padding=(0, 0),
               seed=0, scale=None) -> "KernelStack":
        """He-style random filters, N(0, 2 / (C*kh*kw)) entries, zero bias."""
        rng = np.random.default_rng(seed)
        if scale is None:
            scale = np.sqrt(2.0 / (in_channels * kh * kw))
        w = scale * rng.standard_normal((n_filters, in_channels, kh, kw))
        return cls(w, np.zeros(n_filters), stride, padding)


@dataclass(frozen=True)
class GaussianFeatureMaps:
    """Mixture of per-coordinate Gaussians over a feature-map grid.

    means and variances are (k, F, H', W'); weights is (k,).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if m.shape != v.shape or m.ndim != 4 or m.shape[0] != w.shape[0]:
            raise ValueError("means/variances must be (k, F, H', W') with one weight per component")
        if np.any(v < 0):
            raise ValueError("variances must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)


# Patch-matrix budget per chunk; keeps the gathered windows cache-resident,
# which matters far more than call overhead on bandwidth-starved hosts.
_COLS_BYTES = 512 * 1024


def _conv_batch(x, kernels: KernelStack, with_bias: bool, square_weights: bool):
    """Cross-correlate a (N, C, H, W) batch; returns (N, F, H', W').

    im2col plus one matrix product per chunk of images; chunking only bounds
    the scratch size, the per-image arithmetic (and result) is identical.
    """
    n, c, h, w = x.shape
    if c != kernels.in_channels:
        raise ValueError(f"input has {c} channels, kernels expect {kernels.in_channels}")
    out_h, out_w = kernels.out_shape((h, w))
    kh, kw = kernels.weights.shape[2:]
    ph, pw = kernels.padding
    sh, sw = kernels.stride
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    wm = kernels.weights.reshape(kernels.n_filters, -1)
    if square_weights:
        wm = wm**2
        _CONV_CALLS["squared"] += n
    else:
        _CONV_CALLS["standard"] += n
    wm_t = np.ascontiguousarray(wm.T)

    per_img = out_h * out_w * c * kh * kw * 8
    step = max(1, _COLS_BYTES // max(1, per_img))
    out = np.empty((n, out_h, out_w, kernels.n_filters))
    for start in range(0, n, step):
        stop = min(start + step, n)
        cols = win[start:stop].transpose(0, 2, 3, 1, 4, 5).reshape(
            (stop - start) * out_h * out_w, c * kh * kw
        )
        np.matmul(cols, wm_t, out=out[start:stop].reshape(-1, kernels.n_filters))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if with_bias:
        out += kernels.bias[None, :, None, None]
    return out


def _check_geometry(dim, kernels, image_hw):
    c = kernels.in_channels
    h, w = image_hw
    if dim != c * h * w:
        raise ValueError(
            f"vector length {dim} != C*H*W = {c}*{h}*{w}"
        )


def classic_forward_batch(imgs, kernels: KernelStack, image_hw, activation="relu"):
    """Standard convolution of complete images; imgs is (N, n), returns (N, F, H', W')."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 2:
        raise ValueError("imgs must be (N, n)")
    _check_geometry(imgs.shape[1], kernels, image_hw)
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    h, w = image_hw
    x = imgs.reshape(imgs.shape[0], kernels.in_channels, h, w)
    out = _conv_batch(x, kernels, with_bias=True, square_weights=False)
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    return out


def classic_forward(img, kernels: KernelStack, image_hw, activation="relu"):
    """Standard convolution (+ optional ReLU) of one flattened image."""
    img = np.asarray(img, dtype=np.float64).reshape(-1)
    return classic_forward_batch(img[None, :], kernels, image_hw, activation)[0]


# Smallest positive double; dividing by it sends any nonzero mean past the
# clip range below, which reproduces the ReLU limit exactly at std == 0.
_TINY_STD = 5e-324


def rectified_gaussian_mean(means, stds):
    """E[max(0, X)] for X ~ N(means, stds^2), elementwise; exact at stds == 0.

    Beyond |t| = 40 both Phi and phi have saturated in double precision, so
    the clip below is exact; at stds == 0 it turns the formula into
    max(0, mean) without a separate branch.
    """
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    with np.errstate(over="ignore"):
        t = means / np.maximum(stds, _TINY_STD)
    np.clip(t, -40.0, 40.0, out=t)
    tail = np.square(t)
    tail *= -0.5
    np.exp(tail, out=tail)
    tail *= INV_SQRT_2PI
    tail *= stds
    out = ndtr(t)
    out *= means
    out += tail
    return out


def expected_relu_scalar(weights, means, stds) -> float:
    """Expected ReLU of a 1-D Gaussian mixture.

    Computes ``sum_i p_i (m_i * Phi(m_i/s_i) + s_i * phi(m_i/s_i))``; a
    component with s_i == 0 contributes exactly p_i * max(0, m_i).
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    stds = np.asarray(stds, dtype=np.float64).reshape(-1)
    if np.any(stds < 0):
        raise ValueError("standard deviations must be nonnegative")
    return float(weights @ rectified_gaussian_mean(means, stds))


def expected_relu_scalar_quarter_sigma(weights, means, stds) -> float:
    """Alternate closed form whose sigma coefficient is 1/(4*sqrt(2*pi)).

    Kept only so the test suite can demonstrate that this variant disagrees
    with the quadrature and Monte-Carlo oracles; never used by the layer.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    stds = np.asarray(stds, dtype=np.float64).reshape(-1)
    if np.any(stds < 0):
        raise ValueError("standard deviations must be nonnegative")
    pos = stds > 0
    safe = np.where(pos, stds, 1.0)
    t = np.clip(means / safe, -40.0, 40.0)
    # Phi(t) = (1 + erf(t / sqrt 2)) / 2, written out to keep the constants visible
    erf_term = 2.0 * ndtr(t) - 1.0
    val = 0.5 * (means + stds / (2.0 * np.sqrt(2.0 * np.pi)) * np.exp(-0.5 * t * t)
                 + means * erf_term)
    per_comp = np.where(pos, val, np.maximum(means, 0.0))
    return float(weights @ per_comp)


def conv_pushforward(model: MFAModel, kernels: KernelStack, image_hw,
                     square_noise_kernel: bool = True) -> GaussianFeatureMaps:
    """Exact per-coordinate distribution of the convolved mixture.

    Per component: mean map = conv(mean) + bias; variance map =
    conv_sq(noise) + sum_j conv(factor_j)^2, where conv_sq applies the
    elementwise-squared kernel weights and both variance terms omit bias.

    ``square_noise_kernel=False`` switches the noise term to a plain-weight
    convolution of the noise vector (clamped at zero).  That reading is wrong
    for kernels with mixed-sign weights; it exists so tests can show the
    Monte-Carlo oracle rejecting it.
    """
    _check_geometry(model.dim, kernels, image_hw)
    h, w = image_hw
    c = kernels.in_channels
    k, l = model.k, model.rank

    mean_in = np.stack([comp.mean for comp in model.components]).reshape(k, c, h, w)
    means = _conv_batch(mean_in, kernels, with_bias=True, square_weights=False)

    noise_in = np.stack([comp.noise for comp in model.components]).reshape(k, c, h, w)
    variances = _conv_batch(noise_in, kernels, with_bias=False,
                            square_weights=square_noise_kernel)
    if not square_noise_kernel:
        np.maximum(variances, 0.0, out=variances)

    if l:
        fac_in = np.stack(
            [comp.factors[:, j] for comp in model.components for j in range(l)]
        ).reshape(k * l, c, h, w)
        fac_out = _conv_batch(fac_in, kernels, with_bias=False, square_weights=False)
        variances = variances + (fac_out**2).reshape(k, l, *fac_out.shape[1:]).sum(axis=1)

    return GaussianFeatureMaps(model.weights, means, variances)


def expected_activation(maps: GaussianFeatureMaps, activation="relu"):
    """Collapse mixture feature maps to their expected activation, (F, H', W')."""
    if activation == "none":
        # linearity: the expected linear output is exact
        return np.einsum("k,kfhw->fhw", maps.weights, maps.means)
    if activation != "relu":
        raise ValueError(f"unknown activation {activation!r}")
    rect = rectified_gaussian_mean(maps.means, np.sqrt(maps.variances))
    return np.einsum("k,kfhw->fhw", maps.weights, rect)


def misconv_forward(model: MFAModel, kernels: KernelStack, image_hw,
                    activation="relu", square_noise_kernel: bool = True):
    """Expected first-layer activation of the mixture pushed through the kernels.

    Equivalent by definition to the mean of classic conv(+ReLU) over draws
    from the model.  Returns a plain (F, H', W') tensor.
    """
    maps = conv_pushforward(model, kernels, image_hw, square_noise_kernel)
    return expected_activation(maps, activation)


def misconv_forward_batch(models, kernels: KernelStack, image_hw, activation="relu"):
    """Vectorized `misconv_forward` over models sharing one (n, l, k) geometry.

    Stacks all component means/factors/noise vectors into three convolution
    calls regardless of batch size; returns (N, F, H', W').
    """
    models = list(models)
    if not models:
        raise ValueError("empty model batch")
    k, l, dim = models[0].k, models[0].rank, models[0].dim
    for m in models:
        if (m.k, m.rank, m.dim) != (k, l, dim):
            raise ValueError("batched models must share k, l and dimension")
    _check_geometry(dim, kernels, image_hw)
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    h, w = image_hw
    c = kernels.in_channels
    nb = len(models)

    mean_in = np.stack(
        [comp.mean for m in models for comp in m.components]
    ).reshape(nb * k, c, h, w)
    means = _conv_batch(mean_in, kernels, with_bias=True, square_weights=False)
    fh, fw = means.shape[2], means.shape[3]
    means = means.reshape(nb, k, -1, fh, fw)

    wts = np.stack([m.weights for m in models])  # (N, k)
    if activation == "none":
        return np.einsum("nk,nkfhw->nfhw", wts, means)

    noise_in = np.stack(
        [comp.noise for m in models for comp in m.components]
    ).reshape(nb * k, c, h, w)
    variances = _conv_batch(noise_in, kernels, with_bias=False, square_weights=True)

    if l:
        fac_in = np.stack(
            [comp.factors[:, j] for m in models for comp in m.components
             for j in range(l)]
        ).reshape(nb * k * l, c, h, w)
        fac_out = _conv_batch(fac_in, kernels, with_bias=False, square_weights=False)
        np.square(fac_out, out=fac_out)
        variances += fac_out.reshape(nb * k, l, -1).sum(axis=1).reshape(variances.shape)

    stds = np.sqrt(variances, out=variances)
    rect = rectified_gaussian_mean(means, stds.reshape(means.shape))
    return np.einsum("nk,nkfhw->nfhw", wts, rect)
