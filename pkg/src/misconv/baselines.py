"""Imputation strategies that feed the standard convolution path.

Every strategy passes observed pixels through untouched.  ``zero`` fills
missing pixels with 0; ``mask_channel`` additionally appends one {0,1}
observedness channel per image channel; ``mfa_mean`` fills missing pixels
with the conditional mixture mean (or the most probable component's mean).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mfa import MaskedImage, MFAModel, condition

STRATEGY_KINDS = ("zero", "mask_channel", "mfa_mean")
MFA_MEAN_MODES = ("mixture-mean", "map-component")


@dataclass(frozen=True)
class ImputationStrategy:
    kind: str
    model: MFAModel | None = None
    mode: str = "mixture-mean"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown imputation strategy {self.kind!r}")
        if self.kind == "mfa_mean" and self.model is None:
            raise ValueError("mfa_mean imputation needs a model")
        if self.mode not in MFA_MEAN_MODES:
            raise ValueError(f"unknown imputation mode {self.mode!r}")


def impute(strategy: ImputationStrategy, img: MaskedImage) -> tuple[np.ndarray, int]:
    """Fill missing pixels; returns (vector, channel_factor).

    channel_factor is 1 except for mask_channel, where the output is the
    zero-imputed pixels followed by the observedness indicators (length 2n,
    i.e. C extra channels in (C, H, W) layout).
    """
    if strategy.kind == "zero":
        return np.array(img.pixels), 1
    if strategy.kind == "mask_channel":
        return np.concatenate([img.pixels, img.observed.astype(np.float64)]), 2
    model = strategy.model
    if model.dim != img.dim:
        raise ValueError(f"model dimension {model.dim} != image length {img.dim}")
    cond = condition(model, img)
    if strategy.mode == "map-component":
        return np.array(cond.components[int(np.argmax(cond.weights))].mean), 1
    means = np.stack([c.mean for c in cond.components])
    out = cond.weights @ means
    out[img.observed] = img.pixels[img.observed]  # bitwise pass-through
    return out, 1
