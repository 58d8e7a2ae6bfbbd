"""Matching generalization bounds and stopping-time envelopes.

The upper bound splits into a bias term and a variance term; the variance
multiplies the summed effective weights by f plus an SGD-randomness block
(V2).  The lower bound mirrors the structure with absolute constants 1/100
and 1/1000 and the rate g evaluated at the inner sample count.  Both
refuse configurations violating alpha < 1/(c(beta_tr, Sigma) tr(Sigma))
rather than extrapolating across the sign change of the denominator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from ._parallel import parallel_map
from .maml_sgd import ConfigError, DivergedRunError, ProblemConfig, derive_rng, run_maml_sgd
from .meta_model import (
    GAUSSIAN,
    BundleParams,
    EffectiveWeights,
    RateBundle,
    effective_meta_weights,
    rate_bundle,
)
from .risk import excess_risk_closed
from .spectra import ParameterDomainError, TaskSpectrum

__all__ = [
    "BoundBreakdown",
    "StoppingEnvelope",
    "TradeoffPoint",
    "upper_bound",
    "lower_bound",
    "bound_breakdown",
    "stopping_time_envelope",
    "default_envelope_constants",
    "tradeoff_curve",
    "write_tradeoff_csv",
]


@dataclass(frozen=True)
class BoundBreakdown:
    """All evaluated pieces of the upper and lower excess-risk bounds."""

    bias: float
    v1: float
    v2: float
    var_total: float
    upper: float
    lower_bias: float
    lower_var: float
    lower: float
    xi_sum: float
    remainder: float  # additive O(1/T) bias diagnostic used by tradeoff reports
    rate_bundle: RateBundle
    omega_sq: np.ndarray
    leading_count: int
    variant: str = "main"

    def to_json(self) -> str:
        payload = asdict(self)
        payload["omega_sq"] = [float(v) for v in self.omega_sq]
        payload["rate_bundle"] = json.loads(self.rate_bundle.to_json())
        return json.dumps(payload, sort_keys=True)


def _weights_for(config: ProblemConfig) -> EffectiveWeights:
    return effective_meta_weights(
        config.data_spectrum,
        config.alpha,
        config.T,
        config.n1,
        config.beta_tr,
        config.m,
        config.beta_te,
    )


def bound_breakdown(
    config: ProblemConfig,
    params: BundleParams = GAUSSIAN,
    variant: str = "main",
) -> BoundBreakdown:
    """Evaluate both bounds; raises ConfigError naming any failed precondition."""
    if variant not in ("main", "split"):
        raise ValueError(f"unknown bound variant {variant!r}")
    config.validate_for_bounds(params)

    bundle = rate_bundle(
        config.data_spectrum,
        config.task_spectrum,
        config.beta_tr,
        config.n1,
        config.n2,
        config.noise_sigma,
        params,
    )
    w = _weights_for(config)
    lam = config.data_spectrum.values
    mu_tr, mu_te, xi, lead = w.mu_train, w.mu_test, w.xi, w.leading_mask
    omega_sq = (config.omega0 - config.theta_star) ** 2
    alpha, T = config.alpha, config.T
    c_val = bundle.c_val
    tr_sig = config.data_spectrum.trace
    denom = 1.0 - alpha * c_val * tr_sig  # > 0, enforced above
    xi_sum = float(xi.sum())

    # SGD-randomness block shared by both bounds: leading 1/(T alpha mu), tail 1.
    sgd_block = float(
        np.sum(np.where(lead, 1.0 / (T * alpha * mu_tr), 1.0) * lam * omega_sq)
    )

    v1 = bundle.f_val
    v2 = 2.0 * c_val * sgd_block

    if variant == "main":
        bias = (2.0 / (alpha**2 * T)) * float(np.sum(xi * omega_sq / mu_tr))
        var_total = (2.0 / denom) * xi_sum * (v1 + v2)
        upper = bias + var_total
    else:
        # Alternative decomposition keeping the initialization error and the
        # cross term separate: upper = 2 E_bias + 2 E_var with
        # E_var = f/denom * sum Xi and E_bias = d2 + d1.
        d2 = float(
            np.sum(
                np.where(lead, 1.0 / (alpha**2 * T**2), mu_tr**2)
                * omega_sq
                * mu_te
                / mu_tr**2
            )
        )
        d1 = (2.0 * c_val / (T * alpha * denom)) * float(
            np.sum(np.where(lead, 1.0 / mu_tr, T * alpha) * lam * omega_sq)
        ) * xi_sum
        bias = 2.0 * (d1 + d2)
        var_total = 2.0 * v1 / denom * xi_sum
        upper = bias + var_total

    lower_bias = (1.0 / (100.0 * alpha**2 * T)) * float(np.sum(xi * omega_sq / mu_tr))
    lower_var = (
        (1.0 / config.n2)
        * (1.0 / denom)
        * xi_sum
        * (bundle.g_val / 100.0 + (params.b1 / 1000.0) * sgd_block)
    )
    lower = lower_bias + lower_var

    remainder = (2.0 / (alpha**2 * T)) * float(np.max(mu_te / mu_tr)) * float(np.sum(omega_sq))

    out = BoundBreakdown(
        bias=bias,
        v1=v1,
        v2=v2,
        var_total=var_total,
        upper=upper,
        lower_bias=lower_bias,
        lower_var=lower_var,
        lower=lower,
        xi_sum=xi_sum,
        remainder=remainder,
        rate_bundle=bundle,
        omega_sq=omega_sq,
        leading_count=int(np.sum(lead)),
        variant=variant,
    )
    if min(bias, v1, v2, var_total, lower_bias, lower_var) < 0:
        raise AssertionError("bound components must be non-negative")
    if lower > upper:
        raise AssertionError("lower bound exceeded upper bound; implementation error")
    return out


def upper_bound(
    config: ProblemConfig, params: BundleParams = GAUSSIAN, variant: str = "main"
) -> BoundBreakdown:
    """Excess-risk upper bound: Bias + Var in the standard form, or the
    split bias/cross-term decomposition when variant="split"."""
    return bound_breakdown(config, params, variant)


def lower_bound(config: ProblemConfig, params: BundleParams = GAUSSIAN) -> BoundBreakdown:
    """Excess-risk lower bound; additionally requires T > 10."""
    if config.T <= 10:
        raise ConfigError("T > 10 (lower bound)")
    return bound_breakdown(config, params)


@dataclass(frozen=True)
class StoppingEnvelope:
    """exp-envelopes bracketing the stopping time on two-block spectra."""

    t_lower: float
    t_upper: float
    U_l: float
    U_t: float
    L_l: float
    L_t: float
    epsilon: float
    p: float


def _two_block_levels(config: ProblemConfig):
    vals = config.data_spectrum.values
    uniq = np.unique(vals)
    if uniq.size != 2:
        raise ParameterDomainError(
            f"stopping-time envelope requires a two-block spectrum, found {uniq.size} distinct levels"
        )
    return float(vals[0]), float(vals[-1])


def _isotropic_level(task_spectrum: TaskSpectrum) -> float:
    vals = task_spectrum.values
    if not np.allclose(vals, vals[0], rtol=1e-12, atol=0.0) or vals[0] <= 0:
        raise ParameterDomainError(
            "default envelope constants need an isotropic task spectrum (eta^2 I); "
            "pass U_l/U_t/L_l/L_t explicitly otherwise"
        )
    return float(vals[0])


def default_envelope_constants(config: ProblemConfig, params: BundleParams = GAUSSIAN):
    """Leading/tail constants with all order prefactors set to one."""
    lam1, lam_d = _two_block_levels(config)
    nu_sq = _isotropic_level(config.task_spectrum)
    s2n = config.noise_sigma**2 / config.n2
    u_scale = 2.0 * params.c1 * nu_sq + s2n
    l_scale = 2.0 * params.b1 * nu_sq / config.n2 + s2n
    return {
        "U_l": u_scale * (1.0 - config.beta_te * lam1) ** 2,
        "U_t": u_scale * (1.0 - config.beta_te * lam_d) ** 2,
        "L_l": l_scale * (1.0 - config.beta_te * lam1) ** 2,
        "L_t": l_scale * (1.0 - config.beta_te * lam_d) ** 2,
    }


def stopping_time_envelope(
    config: ProblemConfig,
    params: BundleParams = GAUSSIAN,
    epsilon: float = 0.1,
    p: float = 1.0,
    U_l: float | None = None,
    U_t: float | None = None,
    L_l: float | None = None,
    L_t: float | None = None,
) -> StoppingEnvelope:
    """Evaluate the exp-envelopes bracketing t_eps for a two-block spectrum."""
    if epsilon <= 0:
        raise ParameterDomainError(f"epsilon must be > 0, got {epsilon}")
    if p <= 0:
        raise ParameterDomainError(f"block parameter p must be > 0, got {p}")
    lam1, lam_d = _two_block_levels(config)
    if None in (U_l, U_t, L_l, L_t):
        defaults = default_envelope_constants(config, params)
        U_l = defaults["U_l"] if U_l is None else U_l
        U_t = defaults["U_t"] if U_t is None else U_t
        L_l = defaults["L_l"] if L_l is None else L_l
        L_t = defaults["L_t"] if L_t is None else L_t
    lead = 1.0 / (1.0 - config.beta_tr * lam1) ** 2
    tail = (1.0 - config.beta_tr * lam_d) ** 2
    t_lo = math.exp(epsilon ** (-1.0 / p) * (L_l * lead + L_t * tail) ** (1.0 / p))
    t_hi = math.exp(epsilon ** (-1.0 / p) * (U_l * lead + U_t * tail) ** (1.0 / p))
    return StoppingEnvelope(
        t_lower=t_lo, t_upper=t_hi, U_l=U_l, U_t=U_t, L_l=L_l, L_t=L_t, epsilon=epsilon, p=p
    )


@dataclass(frozen=True)
class TradeoffPoint:
    beta_tr: float
    bias: float | None
    v1: float | None
    v2: float | None
    upper: float | None
    lower: float | None
    remainder: float | None
    empirical_mean: float | None
    empirical_std: float | None
    error: str | None


def _simulate_final_risk(args) -> float:
    config, rep = args
    rng = derive_rng(config.seed, 1, rep)
    traj = run_maml_sgd(config, [config.T], rng=rng)
    return excess_risk_closed(
        traj.omega_final, config.theta_star, config.data_spectrum, config.m, config.beta_te
    )


def tradeoff_curve(
    config_template: ProblemConfig,
    beta_tr_grid,
    params: BundleParams = GAUSSIAN,
    replications: int = 0,
    jobs=None,
):
    """Bound breakdown (and optional replicated simulation) per beta_tr.

    Per-point bound precondition failures are recorded in the point's
    ``error`` field instead of aborting the sweep; simulation runs
    regardless.  The step size is taken from the template and held fixed
    across the grid.
    """
    lam1 = config_template.data_spectrum.lambda_1
    points = []
    for k, beta in enumerate(beta_tr_grid):
        beta = float(beta)
        if abs(beta) >= 1.0 / lam1:
            raise ConfigError(f"grid value |beta_tr|={abs(beta):.6g} outside (-1/lambda_1, 1/lambda_1)")
        # Common random numbers across the grid: the seed is shared, so
        # neighbouring beta_tr points see the same tasks and datasets.
        config = config_template.replace(beta_tr=beta)

        bias = v1 = v2 = up = lo = rem = None
        err = None
        try:
            bb = bound_breakdown(config, params)
            bias, v1, v2, up, lo, rem = bb.bias, bb.v1, bb.v2, bb.upper, bb.lower, bb.remainder
        except (ConfigError, ParameterDomainError) as exc:
            err = str(exc)

        emp_mean = emp_std = None
        if replications > 0:
            try:
                risks = parallel_map(
                    _simulate_final_risk, [(config, r) for r in range(replications)], jobs
                )
            except DivergedRunError as exc:
                err = str(exc) if err is None else f"{err}; {exc}"
            else:
                arr = np.asarray(risks)
                emp_mean = float(arr.mean())
                emp_std = float(arr.std(ddof=1)) if replications > 1 else 0.0

        points.append(
            TradeoffPoint(
                beta_tr=beta,
                bias=bias,
                v1=v1,
                v2=v2,
                upper=up,
                lower=lo,
                remainder=rem,
                empirical_mean=emp_mean,
                empirical_std=emp_std,
                error=err,
            )
        )
    return points


def write_tradeoff_csv(points, path) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["beta_tr", "bias", "v1", "v2", "upper", "lower", "empirical_mean", "empirical_std"]
        )
        for pt in points:
            writer.writerow(
                [
                    repr(float(pt.beta_tr)),
                    fmt(pt.bias),
                    fmt(pt.v1),
                    fmt(pt.v2),
                    fmt(pt.upper),
                    fmt(pt.lower),
                    fmt(pt.empirical_mean),
                    fmt(pt.empirical_std),
                ]
            )
