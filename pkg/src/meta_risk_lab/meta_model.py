"""Closed-form meta-covariance, rate constants, and effective meta weights.

For Gaussian inputs x = Lambda^{1/2} z the one-step-adapted input covariance

    H(n, beta) = E[(I - (beta/n) X'X) Sigma (I - (beta/n) X'X)]

is diagonal in the data eigenbasis with entries

    mu_i = (1 - beta*lambda_i)^2 * lambda_i
           + (beta^2 / n) * (lambda_i^3 + lambda_i * tr(Sigma^2)),

using the Gaussian fourth-moment identity
E[x x' Sigma x x'] = 2 Sigma^3 + Sigma tr(Sigma^2).

Everything downstream (rates c/f/g, the higher-order constant C, and the
per-direction effective weights Xi_i) is a scalar function of these
eigenvalue vectors.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .spectra import ParameterDomainError, Spectrum, TaskSpectrum

__all__ = [
    "BundleParams",
    "GAUSSIAN",
    "MetaCovariance",
    "MetaCovarianceEstimate",
    "RateBundle",
    "EffectiveWeights",
    "meta_covariance",
    "estimate_meta_covariance_mc",
    "C_gauss",
    "c_rate",
    "f_rate",
    "g_rate",
    "rate_bundle",
    "effective_meta_weights",
]

# prefactor of the closed-form Gaussian higher-order moment bound
_C_GAUSS_PREFACTOR = 210.0


@dataclass(frozen=True)
class BundleParams:
    """Distribution constants entering the rates.

    c1/b1 are the fourth-moment sandwich constants (3 and 2 for Gaussian
    data), sigma_x the sub-Gaussian norm of the whitened input.  C_val
    optionally pins the higher-order constant instead of the default
    closed-form bound, which is loose.
    """

    c1: float = 3.0
    b1: float = 2.0
    sigma_x: float = 1.0
    C_val: float | None = None

    def __post_init__(self):
        if self.c1 <= 0 or self.b1 <= 0 or self.sigma_x <= 0:
            raise ParameterDomainError("c1, b1 and sigma_x must be positive")
        if self.C_val is not None and self.C_val < 1.0:
            raise ParameterDomainError("C_val must be >= 1")


GAUSSIAN = BundleParams()


def _check_beta(sigma: Spectrum, beta: float) -> None:
    if abs(beta) >= 1.0 / sigma.lambda_1:
        raise ParameterDomainError(
            f"|beta| < 1/lambda_1 required: |{beta}| >= {1.0 / sigma.lambda_1:.6g}"
        )


@dataclass(frozen=True)
class MetaCovariance:
    """Eigenvalues mu_i of H(n, beta) in the data eigenbasis."""

    mu: np.ndarray
    n: int
    beta: float

    def __post_init__(self):
        arr = np.asarray(self.mu, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "mu", arr)
        if not np.all(arr > 0):
            raise ParameterDomainError("meta-covariance eigenvalues must be positive")


def meta_covariance(sigma: Spectrum, n: int, beta: float) -> MetaCovariance:
    """Closed-form eigenvalues of H(n, beta) for Gaussian data."""
    if n < 1:
        raise ParameterDomainError(f"sample count n must be >= 1, got {n}")
    _check_beta(sigma, beta)
    lam = sigma.values
    mu = (1.0 - beta * lam) ** 2 * lam + (beta**2 / n) * (lam**3 + lam * sigma.trace_sq)
    return MetaCovariance(mu=mu, n=int(n), beta=float(beta))


@dataclass(frozen=True)
class MetaCovarianceEstimate:
    """Monte-Carlo estimate of diag(H(n, beta)) with per-entry standard errors."""

    mu: np.ndarray
    stderr: np.ndarray
    offdiag_max_abs: float
    reps: int
    n: int
    beta: float


def estimate_meta_covariance_mc(
    sigma: Spectrum,
    n: int,
    beta: float,
    reps: int,
    rng_seed: int,
    chunk: int = 512,
) -> MetaCovarianceEstimate:
    """Estimate H(n, beta) by averaging (I - (beta/n) X'X) Sigma (...) over draws.

    Replications are partitioned into fixed-size chunks, each with its own
    seed stream, so the estimate is identical however the chunks would be
    scheduled.  The off-diagonal of the averaged matrix is returned as a
    max-abs commutativity diagnostic (it tends to 0 with reps).
    """
    if reps < 100:
        raise ParameterDomainError(f"reps must be >= 100, got {reps}")
    if n < 1:
        raise ParameterDomainError(f"sample count n must be >= 1, got {n}")
    _check_beta(sigma, beta)

    if beta == 0.0:
        # the update matrix is the identity for every draw: the estimator is
        # exactly Sigma with zero variance, no sampling needed
        d = sigma.d
        return MetaCovarianceEstimate(
            mu=sigma.values.copy(),
            stderr=np.zeros(d),
            offdiag_max_abs=0.0,
            reps=int(reps),
            n=int(n),
            beta=0.0,
        )

    lam = sigma.values
    d = lam.size
    sqrt_lam = np.sqrt(lam)

    diag_sum = np.zeros(d)
    diag_sumsq = np.zeros(d)
    mat_sum = np.zeros((d, d))

    n_chunks = (reps + chunk - 1) // chunk
    done = 0
    for ci in range(n_chunks):
        c = min(chunk, reps - done)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(ci,)))
        z = rng.standard_normal((c, n, d))
        x = z * sqrt_lam  # rows are Lambda^{1/2} z
        gram = np.matmul(np.transpose(x, (0, 2, 1)), x)  # (c, d, d) = X'X
        a = -(beta / n) * gram
        idx = np.arange(d)
        a[:, idx, idx] += 1.0  # A = I - (beta/n) X'X, symmetric
        # diag(A Sigma A)_i = sum_j lambda_j A_ij^2
        diag = np.einsum("rij,j,rij->ri", a, lam, a)
        diag_sum += diag.sum(axis=0)
        diag_sumsq += (diag**2).sum(axis=0)
        # sum_r (A_r Sigma A_r) via one flattened GEMM
        w = a * sqrt_lam  # scale columns
        mat_sum += np.tensordot(w, w, axes=([0, 2], [0, 2]))
        done += c

    mu_hat = diag_sum / reps
    var = np.maximum(diag_sumsq / reps - mu_hat**2, 0.0)
    stderr = np.sqrt(var / reps)
    mean_mat = mat_sum / reps
    off = mean_mat - np.diag(np.diag(mean_mat))
    return MetaCovarianceEstimate(
        mu=mu_hat,
        stderr=stderr,
        offdiag_max_abs=float(np.max(np.abs(off))) if d > 1 else 0.0,
        reps=int(reps),
        n=int(n),
        beta=float(beta),
    )


def C_gauss(sigma: Spectrum, beta: float) -> float:
    """Higher-order moment constant for Gaussian data.

    Exactly 1 at beta = 0; otherwise the closed-form bound
    210 * (1 + beta^4 tr(Sigma^2)^2 / (1 - beta*lambda_1)^4).  The jump at
    beta = 0 is deliberate: the closed-form bound does not specialize to 1.
    """
    _check_beta(sigma, beta)
    if beta == 0.0:
        return 1.0
    t2 = sigma.trace_sq
    return _C_GAUSS_PREFACTOR * (1.0 + beta**4 * t2**2 / (1.0 - beta * sigma.lambda_1) ** 4)


def _resolve_C(sigma: Spectrum, beta: float, params: BundleParams) -> float:
    return params.C_val if params.C_val is not None else C_gauss(sigma, beta)


def c_rate(sigma: Spectrum, beta: float, params: BundleParams = GAUSSIAN) -> float:
    """Fourth-moment growth rate c(beta, Sigma) of the meta inputs."""
    _check_beta(sigma, beta)
    C = _resolve_C(sigma, beta, params)
    sx2 = params.sigma_x**2
    return params.c1 * (
        1.0
        + 8.0 * abs(beta) * sigma.lambda_1 * math.sqrt(C) * sx2
        + 64.0 * math.sqrt(C) * sx2**2 * beta**2 * sigma.trace_sq
    )


def _check_dims(sigma: Spectrum, task_sigma: TaskSpectrum) -> None:
    if sigma.d != task_sigma.d:
        raise ParameterDomainError(
            f"data and task spectra must share a dimension ({sigma.d} != {task_sigma.d})"
        )


def f_rate(
    sigma: Spectrum,
    task_sigma: TaskSpectrum,
    beta: float,
    n: int,
    noise_sigma: float,
    params: BundleParams = GAUSSIAN,
) -> float:
    """Meta-noise rate f entering the variance of the upper bound."""
    _check_dims(sigma, task_sigma)
    if n < 1:
        raise ParameterDomainError(f"n must be >= 1, got {n}")
    _check_beta(sigma, beta)
    C = _resolve_C(sigma, beta, params)
    tr_ts = float(np.dot(task_sigma.values, sigma.values))  # tr(Sigma_theta Sigma)
    return (
        c_rate(sigma, beta, params) * tr_ts
        + 4.0 * params.c1 * noise_sigma**2 * params.sigma_x**2 * beta**2 * math.sqrt(C) * sigma.trace_sq
        + noise_sigma**2 / n
    )


def g_rate(
    sigma: Spectrum,
    task_sigma: TaskSpectrum,
    beta: float,
    n: int,
    noise_sigma: float,
    params: BundleParams = GAUSSIAN,
) -> float:
    """Meta-noise rate g entering the variance of the lower bound.

    The tr(Sigma^2)/n term only activates for beta <= 0.
    """
    _check_dims(sigma, task_sigma)
    if n < 1:
        raise ParameterDomainError(f"n must be >= 1, got {n}")
    H = meta_covariance(sigma, n, beta)
    tr_th = float(np.dot(task_sigma.values, H.mu))  # tr(Sigma_theta H(n, beta))
    indicator = 1.0 if beta <= 0 else 0.0
    return (
        noise_sigma**2
        + params.b1 * tr_th
        + beta**2 * indicator * params.b1 * sigma.trace_sq / n
    )


@dataclass(frozen=True)
class RateBundle:
    """Evaluated rates for one configuration (f at the outer batch, g at the inner)."""

    c_val: float
    C_val: float
    f_val: float
    g_val: float
    c1: float
    b1: float
    sigma_x: float

    def __post_init__(self):
        if not (self.c_val >= self.c1 > 0):
            raise ParameterDomainError("rate invariant violated: c_val >= c1 > 0")
        if self.C_val < 1.0:
            raise ParameterDomainError("rate invariant violated: C_val >= 1")
        if self.f_val <= 0 or self.g_val <= 0:
            raise ParameterDomainError("rate invariant violated: f_val > 0 and g_val > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def rate_bundle(
    sigma: Spectrum,
    task_sigma: TaskSpectrum,
    beta_tr: float,
    n1: int,
    n2: int,
    noise_sigma: float,
    params: BundleParams = GAUSSIAN,
) -> RateBundle:
    """Evaluate c, C, f (at n2) and g (at n1) for a training configuration."""
    return RateBundle(
        c_val=c_rate(sigma, beta_tr, params),
        C_val=_resolve_C(sigma, beta_tr, params),
        f_val=f_rate(sigma, task_sigma, beta_tr, n2, noise_sigma, params),
        g_val=g_rate(sigma, task_sigma, beta_tr, n1, noise_sigma, params),
        c1=params.c1,
        b1=params.b1,
        sigma_x=params.sigma_x,
    )


@dataclass(frozen=True)
class EffectiveWeights:
    """Per-direction weights Xi_i with the leading/tail split at 1/(alpha*T).

    Leading directions (mu_train >= 1/(alpha*T)) carry
    mu_test / (T * mu_train); tail directions carry
    T * alpha^2 * mu_train * mu_test.  Both branches agree at the threshold.
    """

    xi: np.ndarray
    leading_mask: np.ndarray
    alpha: float
    T: int
    mu_train: np.ndarray
    mu_test: np.ndarray
    lambdas: np.ndarray

    @property
    def xi_sum(self) -> float:
        return float(self.xi.sum())

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha,
                "T": self.T,
                "xi": [float(v) for v in self.xi],
                "leading_mask": [bool(b) for b in self.leading_mask],
            },
            sort_keys=True,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "lambda", "mu_train", "mu_test", "xi", "leading"])
            for i in range(self.xi.size):
                writer.writerow(
                    [
                        i + 1,
                        repr(float(self.lambdas[i])),
                        repr(float(self.mu_train[i])),
                        repr(float(self.mu_test[i])),
                        repr(float(self.xi[i])),
                        int(self.leading_mask[i]),
                    ]
                )


def effective_meta_weights(
    sigma: Spectrum,
    alpha: float,
    T: int,
    n1: int,
    beta_tr: float,
    m: int,
    beta_te: float,
) -> EffectiveWeights:
    """Effective meta weights Xi_i(Sigma, alpha, T)."""
    if alpha <= 0:
        raise ParameterDomainError(f"step size alpha must be > 0, got {alpha}")
    if T < 1:
        raise ParameterDomainError(f"iteration count T must be >= 1, got {T}")
    mu_tr = meta_covariance(sigma, n1, beta_tr).mu
    mu_te = meta_covariance(sigma, m, beta_te).mu
    threshold = 1.0 / (alpha * T)
    leading = mu_tr >= threshold
    xi = np.where(leading, mu_te / (T * mu_tr), T * alpha**2 * mu_tr * mu_te)
    return EffectiveWeights(
        xi=xi,
        leading_mask=leading,
        alpha=float(alpha),
        T=int(T),
        mu_train=mu_tr,
        mu_test=mu_te,
        lambdas=sigma.values,
    )
