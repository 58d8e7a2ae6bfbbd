"""Excess risk: exact quadratic form, Monte-Carlo cross-check, Bayes error.

Conditioned on the learned initialization omega, the excess test risk is
exactly (1/2) ||omega - theta*||^2 weighted by the test meta-covariance
H(m, beta_te); the expectation over SGD randomness is realized by
averaging this quantity across replications.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .maml_sgd import ProblemConfig, Trajectory
from .meta_model import meta_covariance
from .spectra import ParameterDomainError, Spectrum, TaskSpectrum

__all__ = [
    "bayes_error",
    "excess_risk_closed",
    "test_loss_mc",
    "excess_risk_mc",
    "train_bayes_error",
    "train_loss_closed",
    "risk_curve",
    "empirical_stopping_time",
    "RiskReport",
]


def bayes_error(
    task_spectrum: TaskSpectrum,
    data_spectrum: Spectrum,
    m: int,
    beta_te: float,
    noise_sigma: float,
) -> float:
    """Test loss of the optimal initialization theta*:
    tr(Sigma_theta H(m, beta_te))/2 + sigma^2 beta_te^2 / (2m) + sigma^2/2.
    """
    mu = meta_covariance(data_spectrum, m, beta_te).mu
    tr_th = float(np.dot(task_spectrum.values, mu))
    return 0.5 * tr_th + noise_sigma**2 * beta_te**2 / (2.0 * m) + noise_sigma**2 / 2.0


def excess_risk_closed(
    omega_bar: np.ndarray,
    theta_star: np.ndarray,
    data_spectrum: Spectrum,
    m: int,
    beta_te: float,
) -> float:
    """(1/2) sum_i mu_i(H(m, beta_te)) (omega_bar_i - theta*_i)^2."""
    omega_bar = np.asarray(omega_bar, dtype=np.float64)
    theta_star = np.asarray(theta_star, dtype=np.float64)
    if omega_bar.shape != theta_star.shape or omega_bar.shape != (data_spectrum.d,):
        raise ParameterDomainError("omega_bar/theta_star must be d-vectors")
    mu = meta_covariance(data_spectrum, m, beta_te).mu
    return 0.5 * float(np.dot(mu, (omega_bar - theta_star) ** 2))


def _mc_losses(
    omegas,
    config: ProblemConfig,
    num_tasks: int,
    rng: np.random.Generator,
    chunk: int = 2048,
) -> list:
    """Per-task test losses for each candidate initialization, on shared draws.

    For every test task: draw theta, an m-point adaptation set, and one
    query point; adapt each omega with one step at beta_te and score the
    squared-error loss (1/2)(<x, adapted> - y)^2.
    """
    d, m = config.d, config.m
    lam = config.data_spectrum.values
    sqrt_lam = np.sqrt(lam)
    sqrt_nu = np.sqrt(config.task_spectrum.values)
    beta = config.beta_te
    sig = config.noise_sigma

    sums = [np.empty(num_tasks) for _ in omegas]
    done = 0
    while done < num_tasks:
        c = min(chunk, num_tasks - done)
        theta = config.theta_star + sqrt_nu * rng.standard_normal((c, d))
        x_ad = rng.standard_normal((c, m, d)) * sqrt_lam
        y_ad = np.einsum("cmd,cd->cm", x_ad, theta) + sig * rng.standard_normal((c, m))
        x_q = rng.standard_normal((c, d)) * sqrt_lam
        y_q = np.einsum("cd,cd->c", x_q, theta) + sig * rng.standard_normal(c)
        for k, omega in enumerate(omegas):
            resid = y_ad - x_ad @ omega  # (c, m)
            adapted = omega + (beta / m) * np.einsum("cmd,cm->cd", x_ad, resid)
            pred = np.einsum("cd,cd->c", x_q, adapted)
            sums[k][done : done + c] = 0.5 * (pred - y_q) ** 2
        done += c
    return sums


def _mean_se(x: np.ndarray):
    n = x.size
    mean = float(x.mean())
    if n < 2:
        return mean, 0.0
    # jackknife SE of a sample mean reduces to s/sqrt(n)
    se = float(x.std(ddof=1) / np.sqrt(n))
    return mean, se


def test_loss_mc(omega, config: ProblemConfig, num_tasks: int, rng: np.random.Generator):
    """Monte-Carlo population test loss of initialization omega: (mean, stderr)."""
    omega = np.asarray(omega, dtype=np.float64)
    (losses,) = _mc_losses([omega], config, num_tasks, rng)
    return _mean_se(losses)


def excess_risk_mc(omega_bar, config: ProblemConfig, num_test_tasks: int, rng: np.random.Generator):
    """Monte-Carlo excess risk of omega_bar: (estimate, stderr).

    Uses common random numbers: the loss of adapting from theta* (whose
    expectation is the Bayes error) is evaluated on the same draws and
    subtracted per task, so the estimator is unbiased for the loss gap and
    far lower-variance than differencing independent estimates.
    """
    if num_test_tasks < 100:
        raise ParameterDomainError(f"num_test_tasks must be >= 100, got {num_test_tasks}")
    omega_bar = np.asarray(omega_bar, dtype=np.float64)
    loss_omega, loss_star = _mc_losses([omega_bar, config.theta_star], config, num_test_tasks, rng)
    return _mean_se(loss_omega - loss_star)


def train_bayes_error(config: ProblemConfig) -> float:
    """Noise floor of the population meta-training loss (Gaussian closed form)."""
    mu = meta_covariance(config.data_spectrum, config.n1, config.beta_tr).mu
    tr_th = float(np.dot(config.task_spectrum.values, mu))
    sig2 = config.noise_sigma**2
    query = sig2 * config.beta_tr**2 * config.data_spectrum.trace_sq / config.n1
    return 0.5 * (tr_th + sig2 + query)


def train_loss_closed(omega, config: ProblemConfig) -> float:
    """Population meta-training loss at omega (quadratic form plus noise floor)."""
    omega = np.asarray(omega, dtype=np.float64)
    mu = meta_covariance(config.data_spectrum, config.n1, config.beta_tr).mu
    quad = 0.5 * float(np.dot(mu, (omega - config.theta_star) ** 2))
    return quad + train_bayes_error(config)


def risk_curve(trajectory: Trajectory, config: ProblemConfig):
    """Exact excess test risk at every stored checkpoint: [(t, risk), ...]."""
    return [
        (t, excess_risk_closed(vec, config.theta_star, config.data_spectrum, config.m, config.beta_te))
        for t, vec in trajectory.checkpoints
    ]


def empirical_stopping_time(risk_curve_points, epsilon: float):
    """Smallest checkpoint t with risk < epsilon, or None if never attained."""
    if not risk_curve_points:
        raise ValueError("risk curve must be non-empty")
    ts = [t for t, _ in risk_curve_points]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("risk curve checkpoints must be strictly increasing")
    for t, r in risk_curve_points:
        if r < epsilon:
            return t
    return None


@dataclass(frozen=True)
class RiskReport:
    """Replication-aggregated risk curve with Bayes error and stopping times."""

    checkpoints: tuple  # ((t, mean_risk, std_risk), ...)
    bayes_error: float
    stopping_times: dict  # epsilon -> t or None
    n_reps: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "mean_risk", "std_risk", "n_reps"])
            for t, mean, std in self.checkpoints:
                writer.writerow([t, repr(float(mean)), repr(float(std)), self.n_reps])

    def to_json(self) -> str:
        return json.dumps(
            {
                "bayes_error": self.bayes_error,
                "n_reps": self.n_reps,
                "stopping_times": {repr(float(k)): v for k, v in self.stopping_times.items()},
                "checkpoints": [[t, m, s] for t, m, s in self.checkpoints],
            },
            sort_keys=True,
        )


def aggregate_risk_curves(curves, bayes: float, epsilons=(), n_reps=None) -> RiskReport:
    """Mean/std across replication risk curves sharing one checkpoint schedule."""
    if not curves:
        raise ValueError("at least one replication required")
    ts = [t for t, _ in curves[0]]
    for c in curves[1:]:
        if [t for t, _ in c] != ts:
            raise ValueError("replications must share the checkpoint schedule")
    mat = np.array([[r for _, r in c] for c in curves])  # (reps, checkpoints)
    means = mat.mean(axis=0)
    stds = mat.std(axis=0, ddof=1) if mat.shape[0] > 1 else np.zeros(mat.shape[1])
    mean_curve = list(zip(ts, means))
    stops = {float(eps): empirical_stopping_time(mean_curve, eps) for eps in epsilons}
    return RiskReport(
        checkpoints=tuple((t, float(m), float(s)) for t, m, s in zip(ts, means, stds)),
        bayes_error=float(bayes),
        stopping_times=stops,
        n_reps=n_reps if n_reps is not None else len(curves),
    )
