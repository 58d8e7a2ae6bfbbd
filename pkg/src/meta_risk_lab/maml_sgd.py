"""Mixed-linear-regression task sampling and the averaged-SGD outer loop.

One outer iteration draws a fresh task (theta ~ N(theta*, Sigma_theta)),
fresh inner/validation datasets, takes the one-step-adapted validation
gradient at the current initialization, and applies a constant step.  The
returned iterate is the running average of the pre-update iterates
omega_0 .. omega_{T-1}.

Everything is matrix-free: only (n x d) data blocks and matrix-vector
products, never a d x d matrix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .meta_model import BundleParams, GAUSSIAN, c_rate
from .spectra import ParameterDomainError, Spectrum, TaskSpectrum, zero_task_spectrum

__all__ = [
    "ConfigError",
    "DivergedRunError",
    "ProblemConfig",
    "TaskBatch",
    "Trajectory",
    "derive_rng",
    "sample_task",
    "sample_dataset",
    "inner_adapt",
    "meta_gradient",
    "run_maml_sgd",
    "run_single_task_sgd",
    "geometric_schedule",
]

DIVERGENCE_FACTOR = 1.0e6


class ConfigError(ValueError):
    """A configuration invariant is violated; the message names it."""


class DivergedRunError(RuntimeError):
    """SGD produced a non-finite or runaway iterate."""

    def __init__(self, t: int, norm: float):
        self.t = t
        self.norm = norm
        super().__init__(f"iterate diverged at t={t} (|omega| = {norm:.3e})")

    def __reduce__(self):
        return (DivergedRunError, (self.t, self.norm))


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic child stream: same (seed, path) -> same stream, any scheduling."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(path)))


@dataclass(frozen=True)
class ProblemConfig:
    """Full description of one simulation/bound-evaluation problem."""

    d: int
    T: int
    n1: int
    n2: int
    m: int
    alpha: float
    beta_tr: float
    beta_te: float
    noise_sigma: float
    data_spectrum: Spectrum
    task_spectrum: TaskSpectrum
    theta_star: np.ndarray
    omega0: np.ndarray
    seed: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta_star, dtype=np.float64)
        omega = np.asarray(self.omega0, dtype=np.float64)
        theta.flags.writeable = False
        omega.flags.writeable = False
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "omega0", omega)

    def validate(self) -> None:
        """Check the simulation invariants; raises ConfigError naming the violation."""
        if self.d < 1:
            raise ConfigError("d >= 1")
        for name in ("T", "n1", "n2", "m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} >= 1")
        if self.data_spectrum.d != self.d:
            raise ConfigError("data_spectrum dimension equals d")
        if self.task_spectrum.d != self.d:
            raise ConfigError("task_spectrum dimension equals d")
        if self.theta_star.shape != (self.d,):
            raise ConfigError("theta_star is a d-vector")
        if self.omega0.shape != (self.d,):
            raise ConfigError("omega0 is a d-vector")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma >= 0")
        lam1 = self.data_spectrum.lambda_1
        if abs(self.beta_tr) >= 1.0 / lam1:
            raise ConfigError(f"|beta_tr| < 1/lambda_1 (= {1.0 / lam1:.6g})")
        if abs(self.beta_te) >= 1.0 / lam1:
            raise ConfigError(f"|beta_te| < 1/lambda_1 (= {1.0 / lam1:.6g})")
        if self.alpha <= 0:
            raise ConfigError("alpha > 0")

    def stability_threshold(self, params: BundleParams = GAUSSIAN) -> float:
        """1 / (c(beta_tr, Sigma) tr(Sigma)): bounds require alpha strictly below."""
        return 1.0 / (c_rate(self.data_spectrum, self.beta_tr, params) * self.data_spectrum.trace)

    def validate_for_bounds(self, params: BundleParams = GAUSSIAN) -> None:
        """Additionally require the step-size condition of bound evaluation."""
        self.validate()
        thr = self.stability_threshold(params)
        if not self.alpha < thr:
            raise ConfigError(f"alpha < 1/(c(beta_tr, Sigma) tr(Sigma)) (= {thr:.6g})")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "T": self.T,
            "n1": self.n1,
            "n2": self.n2,
            "m": self.m,
            "alpha": self.alpha,
            "beta_tr": self.beta_tr,
            "beta_te": self.beta_te,
            "noise_sigma": self.noise_sigma,
            "data_spectrum": [float(v) for v in self.data_spectrum.values],
            "task_spectrum": [float(v) for v in self.task_spectrum.values],
            "theta_star": [float(v) for v in self.theta_star],
            "omega0": [float(v) for v in self.omega0],
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def replace(self, **changes) -> "ProblemConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TaskBatch:
    """One task's parameter and its inner/validation datasets."""

    theta: np.ndarray
    x_in: np.ndarray
    y_in: np.ndarray
    x_out: np.ndarray
    y_out: np.ndarray


def sample_task(task_mean: np.ndarray, task_spectrum: TaskSpectrum, rng: np.random.Generator) -> np.ndarray:
    """theta = theta* + Sigma_theta^{1/2} z with standard normal z."""
    if task_mean.shape != (task_spectrum.d,):
        raise ConfigError("task mean dimension matches task spectrum")
    z = rng.standard_normal(task_spectrum.d)
    return task_mean + np.sqrt(task_spectrum.values) * z


def sample_dataset(
    theta: np.ndarray,
    data_spectrum: Spectrum,
    n: int,
    noise_sigma: float,
    rng: np.random.Generator,
):
    """n rows x_j = Lambda^{1/2} z_j and labels y_j = <x_j, theta> + N(0, sigma^2)."""
    if n < 1:
        raise ParameterDomainError(f"n must be >= 1, got {n}")
    z = rng.standard_normal((n, data_spectrum.d))
    x = z * np.sqrt(data_spectrum.values)
    y = x @ theta + noise_sigma * rng.standard_normal(n)
    return x, y


def draw_task_batch(config: ProblemConfig, rng: np.random.Generator) -> TaskBatch:
    theta = sample_task(config.theta_star, config.task_spectrum, rng)
    x_in, y_in = sample_dataset(theta, config.data_spectrum, config.n1, config.noise_sigma, rng)
    x_out, y_out = sample_dataset(theta, config.data_spectrum, config.n2, config.noise_sigma, rng)
    return TaskBatch(theta=theta, x_in=x_in, y_in=y_in, x_out=x_out, y_out=y_out)


def inner_adapt(omega: np.ndarray, beta: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One gradient step on the task loss: omega + (beta/n) X'(y - X omega)."""
    if beta == 0.0:
        return omega.copy()
    n = x.shape[0]
    return omega + (beta / n) * (x.T @ (y - x @ omega))


def meta_gradient(omega: np.ndarray, beta_tr: float, task: TaskBatch) -> np.ndarray:
    """Gradient of the adapted validation loss at omega, matrix-free.

    Equals J' u where J = I - (beta_tr/n1) X_in' X_in is the adaptation
    Jacobian and u the validation-loss gradient at the adapted point.
    """
    adapted = inner_adapt(omega, beta_tr, task.x_in, task.y_in)
    n2 = task.x_out.shape[0]
    u = task.x_out.T @ (task.x_out @ adapted - task.y_out) / n2
    if beta_tr == 0.0:
        return u
    n1 = task.x_in.shape[0]
    return u - (beta_tr / n1) * (task.x_in.T @ (task.x_in @ u))


@dataclass(frozen=True)
class Trajectory:
    """Averaged iterates at requested checkpoints; the last equals omega_bar_T."""

    checkpoints: tuple
    omega_final: np.ndarray
    config_fingerprint: str

    @property
    def times(self):
        return [t for t, _ in self.checkpoints]

    def to_csv(self, path) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["t", "coordinate", "value"])
            for t, vec in self.checkpoints:
                for i, v in enumerate(vec):
                    writer.writerow([t, i, repr(float(v))])

    def to_json(self) -> str:
        return json.dumps(
            {
                "config_fingerprint": self.config_fingerprint,
                "checkpoints": [[t, [float(v) for v in vec]] for t, vec in self.checkpoints],
            }
        )


def _normalize_schedule(schedule, T: int):
    pts = sorted({int(t) for t in schedule if 1 <= int(t) <= T} | {T})
    if not pts:
        raise ConfigError("checkpoint schedule non-empty")
    return pts


def geometric_schedule(T: int, ratio: float = 1.3):
    """All t <= 10 plus ceil(ratio^k), deduplicated, capped at T."""
    pts = set(range(1, min(10, T) + 1))
    x = 1.0
    while True:
        x *= ratio
        t = int(np.ceil(x))
        if t > T:
            break
        pts.add(t)
    pts.add(T)
    return sorted(pts)


def run_maml_sgd(config: ProblemConfig, checkpoint_schedule=None, rng=None) -> Trajectory:
    """Algorithm: T outer steps, one fresh task per step, averaged iterates.

    Deterministic given (config, rng seed); the checkpoint schedule never
    influences the random stream.
    """
    config.validate()
    schedule = _normalize_schedule(checkpoint_schedule or [config.T], config.T)
    if rng is None:
        rng = derive_rng(config.seed)

    omega = config.omega0.astype(np.float64).copy()
    running_sum = np.zeros_like(omega)
    guard = DIVERGENCE_FACTOR * (float(np.linalg.norm(config.theta_star)) + 1.0)

    checkpoints = []
    want = iter(schedule)
    next_t = next(want)
    for t in range(1, config.T + 1):
        running_sum += omega
        if t == next_t:
            checkpoints.append((t, running_sum / t))
            next_t = next(want, None)
        task = draw_task_batch(config, rng)
        omega = omega - config.alpha * meta_gradient(omega, config.beta_tr, task)
        norm = float(np.linalg.norm(omega))
        if not np.isfinite(norm) or norm > guard:
            raise DivergedRunError(t, norm)

    return Trajectory(
        checkpoints=tuple(checkpoints),
        omega_final=checkpoints[-1][1],
        config_fingerprint=config.fingerprint(),
    )


def run_single_task_sgd(config: ProblemConfig, checkpoint_schedule=None, rng=None) -> Trajectory:
    """Single-task control: every task parameter is exactly theta*, beta_tr = 0.

    Implemented as the meta loop under a degenerate task spectrum so that the
    random stream (and hence the trajectory, bitwise) coincides with
    run_maml_sgd whenever that run already has Sigma_theta = 0 and
    beta_tr = 0.
    """
    degenerate = config.replace(task_spectrum=zero_task_spectrum(config.d), beta_tr=0.0)
    return run_maml_sgd(degenerate, checkpoint_schedule, rng)
