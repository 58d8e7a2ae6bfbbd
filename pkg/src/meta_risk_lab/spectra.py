"""Covariance spectra in the shared diagonal eigenbasis.

Every covariance in this package (data, task, meta) is simultaneously
diagonalizable, so a covariance is just its ordered eigenvalue vector.
Data spectra must be non-increasing; task spectra may grow with the index
(task diversity can concentrate on tail data directions), so they only
need to be non-negative.

All logarithms are natural.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParameterDomainError",
    "Spectrum",
    "TaskSpectrum",
    "log_decay_spectrum",
    "poly_spectrum",
    "exp_spectrum",
    "two_block_spectrum",
    "log_growth_task_spectrum",
    "isotropic_task_spectrum",
    "zero_task_spectrum",
]


class ParameterDomainError(ValueError):
    """A constructor argument lies outside its admissible domain."""


def _as_vector(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ParameterDomainError("spectrum must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError("spectrum entries must be finite")
    return arr


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues lambda_1 >= ... >= lambda_d > 0 of a data covariance."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_vector(self.values)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if not np.all(arr > 0):
            raise ParameterDomainError("data spectrum entries must be positive")
        if np.any(np.diff(arr) > 0):
            raise ParameterDomainError("data spectrum must be non-increasing")

    @property
    def d(self) -> int:
        return int(self.values.size)

    @property
    def trace(self) -> float:
        return float(self.values.sum())

    @property
    def trace_sq(self) -> float:
        """tr(Sigma^2) = sum of squared eigenvalues."""
        return float(np.sum(self.values**2))

    @property
    def lambda_1(self) -> float:
        return float(self.values[0])

    @property
    def lambda_d(self) -> float:
        return float(self.values[-1])

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.values])

    @classmethod
    def from_json(cls, text: str) -> "Spectrum":
        return cls(np.asarray(json.loads(text), dtype=np.float64))

    def to_csv(self, path) -> None:
        _write_spectrum_csv(path, self.values)

    @classmethod
    def from_csv(cls, path) -> "Spectrum":
        return cls(_read_spectrum_csv(path))


@dataclass(frozen=True)
class TaskSpectrum:
    """Eigenvalues nu_i >= 0 of a task covariance; order unconstrained."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_vector(self.values)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if not np.all(arr >= 0):
            raise ParameterDomainError("task spectrum entries must be non-negative")

    @property
    def d(self) -> int:
        return int(self.values.size)

    @property
    def trace(self) -> float:
        return float(self.values.sum())

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.values])

    @classmethod
    def from_json(cls, text: str) -> "TaskSpectrum":
        return cls(np.asarray(json.loads(text), dtype=np.float64))

    def to_csv(self, path) -> None:
        _write_spectrum_csv(path, self.values)

    @classmethod
    def from_csv(cls, path) -> "TaskSpectrum":
        return cls(_read_spectrum_csv(path))


def _write_spectrum_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda"])
        for v in values:
            writer.writerow([repr(float(v))])


def _read_spectrum_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["lambda"]:
            raise ValueError(f"expected single-column header ['lambda'], got {header}")
        vals = [float(row[0]) for row in reader if row]
    return np.asarray(vals, dtype=np.float64)


def _check_dim(d: int) -> None:
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ParameterDomainError(f"dimension must be a positive integer, got {d!r}")


def log_decay_spectrum(d: int, p: float) -> Spectrum:
    """lambda_k = k^-1 * log^-p(k+1), the slow log-decay data spectrum."""
    _check_dim(d)
    if p <= 0:
        raise ParameterDomainError(f"log-decay exponent p must be > 0, got {p}")
    k = np.arange(1, d + 1, dtype=np.float64)
    return Spectrum(1.0 / (k * np.log(k + 1.0) ** p))


def poly_spectrum(d: int, q: float) -> Spectrum:
    """lambda_k = k^-q with q > 1 (summable polynomial decay)."""
    _check_dim(d)
    if q <= 1:
        raise ParameterDomainError(f"polynomial exponent q must be > 1, got {q}")
    k = np.arange(1, d + 1, dtype=np.float64)
    return Spectrum(k**-q)


def exp_spectrum(d: int) -> Spectrum:
    """lambda_k = e^-k."""
    _check_dim(d)
    k = np.arange(1, d + 1, dtype=np.float64)
    return Spectrum(np.exp(-k))


def two_block_spectrum(d: int, s: int) -> Spectrum:
    """First s eigenvalues equal 1/s, remaining d-s equal 1/(d-s); trace = 2.

    Requires d >= 2s so the block levels are non-increasing.
    """
    _check_dim(d)
    if not isinstance(s, (int, np.integer)) or s < 1:
        raise ParameterDomainError(f"block size s must be a positive integer, got {s!r}")
    if s >= d:
        raise ParameterDomainError(f"block size s={s} must be < d={d}")
    if d < 2 * s:
        raise ParameterDomainError(
            f"need d >= 2s for a non-increasing two-block spectrum (d={d}, s={s})"
        )
    values = np.empty(d, dtype=np.float64)
    values[:s] = 1.0 / s
    values[s:] = 1.0 / (d - s)
    return Spectrum(values)


def log_growth_task_spectrum(d: int, r: float, scale: float = 1.0) -> TaskSpectrum:
    """nu_k = scale * log^r(k+1): task diversity growing into tail directions."""
    _check_dim(d)
    if r <= 0:
        raise ParameterDomainError(f"log-growth exponent r must be > 0, got {r}")
    if scale <= 0:
        raise ParameterDomainError(f"scale must be > 0, got {scale}")
    k = np.arange(1, d + 1, dtype=np.float64)
    return TaskSpectrum(scale * np.log(k + 1.0) ** r)


def isotropic_task_spectrum(d: int, eta_sq: float) -> TaskSpectrum:
    """nu_k = eta_sq for all k (isotropic task covariance eta^2 * I)."""
    _check_dim(d)
    if eta_sq <= 0:
        raise ParameterDomainError(f"eta_sq must be > 0, got {eta_sq}")
    return TaskSpectrum(np.full(d, float(eta_sq)))


def zero_task_spectrum(d: int) -> TaskSpectrum:
    """Degenerate task covariance: every task equals the task mean."""
    _check_dim(d)
    return TaskSpectrum(np.zeros(d))
