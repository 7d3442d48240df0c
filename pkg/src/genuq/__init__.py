"""genuq: generative uncertainty for small diffusion and flow models.

Trains toy denoisers, estimates per-seed uncertainty as the entropy of a
moment-matched posterior predictive over replica generations, filters
sample sets by that score, and evaluates the result with distribution- and
sample-level quality metrics.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config
from .diffusion import (
    NoiseSchedule,
    SamplerSpec,
    SeedBundle,
    diffusion_loss,
    flow_matching_loss,
    forward_noise,
    make_seed_bundle,
    sample,
    sample_batch,
)
from .metrics import (
    ManifoldIndex,
    MetricReport,
    ModeSpec,
    combine_ranks,
    frechet_distance,
    mode_stats,
    precision_recall,
    rarity_score,
    realism_score,
    spearman,
)
from .nn import AdamState, MlpConfig, ParamVector, adam_step, mlp_backward, mlp_forward
from .pipeline import Pipeline
from .posterior import (
    LaplaceState,
    PosteriorSpec,
    fit_laplace,
    sample_weights,
    train_ensemble,
)
from .rng import RngState, gaussian_sample
from .training import TrainConfig, train
from .uncertainty import (
    FeatureMap,
    PredictiveGaussian,
    UncertaintyRecord,
    gaussian_entropy,
    moment_match,
    score_batch,
    score_seed,
)

__all__ = [
    "AdamState",
    "Checkpoint",
    "ExperimentConfig",
    "FeatureMap",
    "LaplaceState",
    "ManifoldIndex",
    "MetricReport",
    "MlpConfig",
    "ModeSpec",
    "NoiseSchedule",
    "ParamVector",
    "Pipeline",
    "PosteriorSpec",
    "PredictiveGaussian",
    "RngState",
    "SamplerSpec",
    "SeedBundle",
    "TrainConfig",
    "UncertaintyRecord",
    "adam_step",
    "combine_ranks",
    "config_hash",
    "diffusion_loss",
    "fit_laplace",
    "flow_matching_loss",
    "forward_noise",
    "frechet_distance",
    "gaussian_entropy",
    "gaussian_sample",
    "load_checkpoint",
    "load_config",
    "make_seed_bundle",
    "mlp_backward",
    "mlp_forward",
    "mode_stats",
    "moment_match",
    "precision_recall",
    "rarity_score",
    "realism_score",
    "sample",
    "sample_batch",
    "sample_weights",
    "save_checkpoint",
    "score_batch",
    "score_seed",
    "spearman",
    "train",
    "train_ensemble",
]
