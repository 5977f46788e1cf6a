"""Robust patrol planning against diffusion-model adversaries.

Pipeline: fit (or specify) a conditional generative model of adversary
behavior, form worst-case exponential tilts of it, sample those tilts with
twisted SMC, and compute a robust mixed patrol strategy with a double-oracle
game solver.
"""

from .diffusion import (
    DenoiserNet,
    ForwardVariant,
    GaussianMixtureModel,
    NoiseSchedule,
    TrainConfig,
    ancestral_sample,
    analytic_score,
    forward_perturb,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
    tweedie_denoise,
)
from .game import (
    DefenderSolution,
    DoubleOracleConfig,
    FixedSamples,
    TheoreticalSamples,
    double_oracle,
    sample_size_schedule,
)
from .mirror import MirrorAscentConfig
from .smc import (
    ParticleEnsemble,
    ProposalVariance,
    TiltSpec,
    dps_sample,
    ess,
    importance_sampling,
    multinomial_resample,
    twisted_smc,
    twisting_value,
)
from .utility import (
    LinearUtility,
    MixedDefenderStrategy,
    PatrolStrategy,
    UtilityParams,
    expected_utility,
    utility,
    utility_grad_x,
    utility_grad_z,
)

__version__ = "0.1.0"
