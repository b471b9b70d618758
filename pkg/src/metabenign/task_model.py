"""Synthetic multi-task linear regression data.

Task ``m`` has covariance ``Q_m = V_m diag(lambda_m) V_m^T``, inputs
``x = V_m diag(lambda_m)^{1/2} z`` with unit-variance independent entries in
``z``, a ground-truth vector ``theta_star_m`` and labels
``y = x^T theta_star_m + eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

from .linalg import Spectral, haar_orthogonal
from .streams import RandomStream

FAMILIES = ("gaussian", "rademacher", "uniform")


class ConfigError(ValueError):
    """A configuration violates a modelling assumption."""


@dataclass(frozen=True)
class SpikedIdentity:
    d1: int
    beta: float


@dataclass(frozen=True)
class ScaledSpiked:
    """``|1 + omega_m| * diag(I_d1, beta I)``, with ``omega_m ~ N(0, sigma_omega^2)`` per task."""

    d1: int
    beta: float
    sigma_omega: float


@dataclass(frozen=True)
class ExplicitSpectrum:
    lambdas: tuple[float, ...]


@dataclass(frozen=True)
class Rotated:
    """Rotate ``base`` by a Haar matrix.

    With ``per_task=False`` every task shares the rotation keyed by
    ``rotation_seed``; otherwise each task draws its own.
    """

    base: "Pattern"
    rotation_seed: int = 0
    per_task: bool = False


Pattern = Union[SpikedIdentity, ScaledSpiked, ExplicitSpectrum, Rotated]


@dataclass(frozen=True)
class CovarianceSpec:
    dim: int
    pattern: Pattern

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        _validate_pattern(self.pattern, self.dim)

    @property
    def shared_basis(self) -> bool:
        """True when all tasks share eigenvectors (needed by analytic expectations)."""
        p = self.pattern
        while isinstance(p, Rotated):
            if p.per_task:
                return False
            p = p.base
        return True

    @property
    def random_scale(self) -> bool:
        return isinstance(_base_pattern(self.pattern), ScaledSpiked)


def _base_pattern(p: Pattern) -> Pattern:
    while isinstance(p, Rotated):
        p = p.base
    return p


def _validate_pattern(p: Pattern, d: int) -> None:
    if isinstance(p, Rotated):
        _validate_pattern(p.base, d)
    elif isinstance(p, (SpikedIdentity, ScaledSpiked)):
        if not 0 <= p.d1 <= d:
            raise ConfigError(f"d1={p.d1} outside [0, {d}]")
        if p.beta <= 0 and p.d1 < d:
            raise ConfigError(f"beta must be > 0 (all eigenvalues positive), got {p.beta}")
        if isinstance(p, ScaledSpiked) and p.sigma_omega < 0:
            raise ConfigError("sigma_omega must be non-negative")
    elif isinstance(p, ExplicitSpectrum):
        lam = np.asarray(p.lambdas, dtype=float)
        if lam.shape != (d,):
            raise ConfigError(f"explicit spectrum has {lam.size} values, expected {d}")
        if np.any(lam <= 0):
            raise ConfigError("explicit spectrum must be strictly positive")
        if np.any(np.diff(lam) > 0):
            raise ConfigError("explicit spectrum must be non-increasing")
    else:
        raise ConfigError(f"unknown covariance pattern {p!r}")


def benign_spectrum(d: int) -> tuple[float, ...]:
    """``lambda_i = 1 / (i log^2(i + 1))``: bounded trace, tail effective ranks growing with ``d``."""
    return tuple(1.0 / (i * math.log(i + 1.0) ** 2) for i in range(1, d + 1))


def base_spectrum(spec: CovarianceSpec) -> np.ndarray:
    """Spectrum before any per-task random scaling."""
    p = _base_pattern(spec.pattern)
    if isinstance(p, (SpikedIdentity, ScaledSpiked)):
        return np.concatenate([np.ones(p.d1), np.full(spec.dim - p.d1, float(p.beta))])
    return np.asarray(p.lambdas, dtype=float)


def _rotation(p: Pattern, d: int, stream: RandomStream) -> np.ndarray | None:
    if not isinstance(p, Rotated):
        return None
    inner = _rotation(p.base, d, stream)
    if p.per_task:
        rng = stream.child("rotation").generator()
    else:
        rng = RandomStream(p.rotation_seed).child("rotation").generator()
    v = haar_orthogonal(d, rng)
    return v if inner is None else v @ inner


def build_covariance(spec: CovarianceSpec, task_stream: RandomStream) -> Spectral:
    """Population covariance of one task, spectrum non-increasing."""
    scale = float(draw_scales(spec, task_stream.child("omega").generator()))
    if not scale > 0:
        raise ConfigError("sampled |1 + omega| is zero; covariance not positive definite")
    return Spectral(scale * base_spectrum(spec), _rotation(spec.pattern, spec.dim, task_stream))


def draw_scales(spec: CovarianceSpec, rng: np.random.Generator, size=None):
    """Per-task spectrum multipliers ``|1 + omega|`` (all ones for unscaled patterns)."""
    p = _base_pattern(spec.pattern)
    if not isinstance(p, ScaledSpiked):
        return np.ones(size) if size is not None else 1.0
    return np.abs(1.0 + p.sigma_omega * rng.standard_normal(size))


def draw_unit(family: str, rng: np.random.Generator, size) -> np.ndarray:
    """Centered, unit-variance sub-Gaussian draws."""
    if family == "gaussian":
        return rng.standard_normal(size)
    if family == "rademacher":
        return rng.integers(0, 2, size=size) * 2.0 - 1.0
    if family == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=size)
    raise ConfigError(f"unknown sub-Gaussian family {family!r}")


@dataclass(frozen=True)
class TaskEnvironment:
    cov: CovarianceSpec
    R: float = 1.0
    theta_mean: np.ndarray | None = None
    sigma_noise: float = 1.0
    family: str = "gaussian"
    split: float = 0.5

    def __post_init__(self):
        if self.R < 0:
            raise ConfigError("R must be non-negative")
        if self.sigma_noise < 0:
            raise ConfigError("sigma_noise must be non-negative")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must lie in (0, 1), got {self.split}")
        if self.theta_mean is not None:
            mean = np.asarray(self.theta_mean, dtype=float)
            if mean.shape != (self.cov.dim,):
                raise ConfigError("theta_mean must be a d-vector")
            object.__setattr__(self, "theta_mean", mean)

    @property
    def dim(self) -> int:
        return self.cov.dim

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.dim) if self.theta_mean is None else self.theta_mean

    def split_sizes(self, n: int) -> tuple[int, int]:
        """``(N_tr, N_va)`` with ``N_tr = round(s N)``, ties rounded up."""
        n_tr = int(math.floor(self.split * n + 0.5))
        n_va = n - n_tr
        if n < 2 or n_tr < 1 or n_va < 1:
            raise ConfigError(f"N={n} with split {self.split} leaves an empty train or validation set")
        return n_tr, n_va


def sample_theta_star(env: TaskEnvironment, stream: RandomStream) -> np.ndarray:
    rng = stream.generator()
    scale = env.R / math.sqrt(env.dim)
    return env.mean + scale * draw_unit(env.family, rng, env.dim)


def sample_inputs(env: TaskEnvironment, cov: Spectral, n: int, rng: np.random.Generator) -> np.ndarray:
    z = draw_unit(env.family, rng, (n, env.dim))
    x = z * np.sqrt(cov.eigvals)
    return x if cov.basis is None else x @ cov.basis.T


@dataclass(frozen=True, eq=False)
class TaskData:
    theta_star: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    cov: Spectral = field(repr=False)
    stream: RandomStream | None = None

    @property
    def dim(self) -> int:
        return self.theta_star.shape[0]

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_val(self) -> int:
        return self.x_val.shape[0]

    @cached_property
    def q_train(self) -> np.ndarray:
        return self.x_train.T @ self.x_train / self.n_train

    @cached_property
    def q_val(self) -> np.ndarray:
        return self.x_val.T @ self.x_val / self.n_val


def sample_task(env: TaskEnvironment, n: int, stream: RandomStream) -> TaskData:
    n_tr, _ = env.split_sizes(n)
    cov = build_covariance(env.cov, stream.child("cov"))
    theta = sample_theta_star(env, stream.child("theta"))
    x = sample_inputs(env, cov, n, stream.child("x").generator())
    noise = env.sigma_noise * draw_unit(env.family, stream.child("noise").generator(), n)
    y = x @ theta + noise
    return TaskData(
        theta_star=theta,
        x_train=x[:n_tr],
        y_train=y[:n_tr],
        x_val=x[n_tr:],
        y_val=y[n_tr:],
        cov=cov,
        stream=stream,
    )


@dataclass(frozen=True, eq=False)
class MetaDataset:
    tasks: list[TaskData]
    env: TaskEnvironment
    n_per_task: int

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("a meta dataset needs at least one task")
        if any(t.dim != self.env.dim for t in self.tasks):
            raise ConfigError("all tasks must share the model dimension")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.env.dim

    @property
    def total_samples(self) -> int:
        return self.num_tasks * self.n_per_task

    @property
    def overparameterized(self) -> bool:
        return self.total_samples < self.dim


def sample_meta_dataset(env: TaskEnvironment, M: int, N: int, seed: int | RandomStream) -> MetaDataset:
    """Task ``m`` always uses the substream ``(seed, m)``, so growing ``M`` keeps earlier tasks."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    root = seed if isinstance(seed, RandomStream) else RandomStream(int(seed))
    tasks = [sample_task(env, N, root.child("task", m)) for m in range(M)]
    return MetaDataset(tasks=tasks, env=env, n_per_task=N)
