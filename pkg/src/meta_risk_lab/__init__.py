"""Numerical laboratory for one-step meta-learned linear regression under averaged SGD."""

__version__ = "0.1.0"

from .spectra import (
    ParameterDomainError,
    Spectrum,
    TaskSpectrum,
    exp_spectrum,
    isotropic_task_spectrum,
    log_decay_spectrum,
    log_growth_task_spectrum,
    poly_spectrum,
    two_block_spectrum,
    zero_task_spectrum,
)
from .meta_model import (
    GAUSSIAN,
    BundleParams,
    EffectiveWeights,
    MetaCovariance,
    MetaCovarianceEstimate,
    RateBundle,
    C_gauss,
    c_rate,
    effective_meta_weights,
    estimate_meta_covariance_mc,
    f_rate,
    g_rate,
    meta_covariance,
    rate_bundle,
)
from .maml_sgd import (
    ConfigError,
    DivergedRunError,
    ProblemConfig,
    TaskBatch,
    Trajectory,
    derive_rng,
    geometric_schedule,
    inner_adapt,
    meta_gradient,
    run_maml_sgd,
    run_single_task_sgd,
    sample_dataset,
    sample_task,
)
from .risk import (
    RiskReport,
    bayes_error,
    empirical_stopping_time,
    excess_risk_closed,
    excess_risk_mc,
    risk_curve,
    test_loss_mc,
    train_loss_closed,
)
from .bounds import (
    BoundBreakdown,
    StoppingEnvelope,
    TradeoffPoint,
    lower_bound,
    stopping_time_envelope,
    tradeoff_curve,
    upper_bound,
)
