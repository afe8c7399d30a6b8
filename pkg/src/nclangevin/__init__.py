"""Noise-corrected Langevin sampling and half-denoising.

A library and CLI for sampling with noisy-data score functions: exact
Gaussian-mixture scores, the Tweedie-Miyasawa denoiser and its
closed-form affine DSM fit, the corrected Langevin iterations, 2-D
sample-quality metrics, closed-form Gaussian covariance theory, and a
reproducible experiment harness.
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateDataError,
    NclError,
    NumericDivergenceError,
    StepSizeError,
    UsageError,
)
from .rng import RandomSource, derive_seed
from .models import (
    AffineScore,
    GmmModel,
    SampleSet,
    ScoreField,
    canonical_gmm,
    dsm_fit_affine,
    exact_sample,
    gaussian_model,
    gmm_log_pdf,
    gmm_log_pdf_batch,
    gmm_score,
    load_gmm_model,
    noisy_model,
    noisy_score_field,
    save_gmm_model,
    score_field,
    tweedie_denoise,
    zero_score_field,
)
from .samplers import (
    Chain,
    InitSpec,
    SamplerConfig,
    basic_langevin_step,
    half_denoise_step,
    noise_corrected_step,
    run_chain,
    run_chain_tail,
    run_ensemble,
    tail_samples,
)
from .analysis import (
    DensityGrid2D,
    MixingArm,
    MixingCurve,
    covariance,
    covariance_distance,
    density_distance,
    kde2d,
    mixing_curves,
    shared_extent,
)
from .gaussian_theory import (
    BiasPredictions,
    GaussianTheoryReport,
    bias_predictions,
    contraction_check,
    covariance_recursion_step,
    gaussian_theory_report,
    iterate_to_fixed_point,
    stationary_covariance,
)
from .experiments import (
    ExperimentReport,
    ExperimentSpec,
    run_experiment,
    run_gaussian_bias_experiment,
    run_gmm_bias_experiment,
    run_mixing_experiment,
)

__all__ = [name for name in dir() if not name.startswith("_")]
