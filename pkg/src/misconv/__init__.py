"""Probabilistic first-layer convolution for images with missing pixels."""

from .baselines import ImputationStrategy, impute
from .data import MaskSpec, apply_mask, load_idx, make_synthetic_digits
from .em import EMConfig, EMReport, fit
from .layer import (
    GaussianFeatureMaps,
    KernelStack,
    classic_forward,
    classic_forward_batch,
    conv_pushforward,
    expected_relu_scalar,
    misconv_forward,
    misconv_forward_batch,
)
from .mfa import (
    ConditioningError,
    DegenerateDensityError,
    FactorAnalyzer,
    MaskedImage,
    MFAModel,
    condition,
    conditional_mean_imputation,
    log_density,
    sample,
    sample_mixture,
)
from .metrics import Metrics, evaluate_imputation
from .oracle import (
    OracleReport,
    QuadratureError,
    mc_expected_forward,
    quadrature_expected_relu,
)
from .serialize import load_kernels, load_model, save_kernels, save_model

__version__ = "0.1.0"
