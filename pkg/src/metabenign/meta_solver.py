"""Minimum-norm empirical meta solution and the population-optimal initialization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .adaptation import EffectiveDesign, MetaMethod, effective_design, eig_map
from .linalg import Spectral
from .streams import RandomStream
from .task_model import (
    ConfigError,
    MetaDataset,
    ScaledSpiked,
    TaskEnvironment,
    _base_pattern,
    base_spectrum,
    build_covariance,
    draw_scales,
    draw_unit,
    sample_theta_star,
)

DEFAULT_RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MinNormSolution:
    theta0_hat: np.ndarray
    rank: int
    train_loss: float
    residual_norm: float
    degenerate: bool = False
    design: EffectiveDesign | None = field(default=None, repr=False)
    svd: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def pinv_apply(self, v: np.ndarray) -> np.ndarray:
        """``X_tilde^+ @ v`` from the stored thin SVD (``v`` may be a matrix of columns)."""
        u, s, vt = self.svd
        c = u.T @ v
        c = c / (s[:, None] if c.ndim > 1 else s)
        return vt.T @ c


def min_norm_solve(method: MetaMethod, dataset: MetaDataset, tol: float = DEFAULT_RANK_TOL) -> MinNormSolution:
    """``theta0_hat = X_tilde^+ b`` with singular values below ``tol * s_max`` dropped."""
    design = effective_design(method, dataset)
    u, s, vt = np.linalg.svd(design.x_tilde, full_matrices=False)
    rows = design.rows
    if s.size == 0 or s[0] == 0.0:
        d = dataset.dim
        empty = (u[:, :0], s[:0], vt[:0])
        b2 = float(design.b @ design.b)
        return MinNormSolution(np.zeros(d), 0, b2 / rows, math.sqrt(b2), True, design, empty)
    keep = s > tol * s[0]
    u, s, vt = u[:, keep], s[keep], vt[keep]
    theta = vt.T @ ((u.T @ design.b) / s)
    resid = design.x_tilde @ theta - design.b
    r2 = float(resid @ resid)
    return MinNormSolution(
        theta0_hat=theta,
        rank=int(keep.sum()),
        train_loss=r2 / rows,
        residual_norm=math.sqrt(r2),
        design=design,
        svd=(u, s, vt),
    )


@dataclass(frozen=True)
class Analytic:
    """Closed-form expectation over the task distribution (shared eigenbasis only)."""


@dataclass(frozen=True)
class MonteCarlo:
    num_tasks: int = 10_000
    seed: int = 0


@dataclass(frozen=True, eq=False)
class PopulationSolution:
    theta0_star: np.ndarray
    weight: Spectral
    method: MetaMethod
    env: TaskEnvironment
    estimator: object
    weight_stderr: np.ndarray | None = None

    @property
    def mean_weight(self) -> np.ndarray:
        return self.weight.matrix()


def _scale_expectation(fn, sigma_omega: float, peaks=()) -> float:
    """``E[fn(|1 + omega|)]`` for ``omega ~ N(0, sigma_omega^2)``.

    Integrates ``fn(s)`` against the folded-normal density of ``s = |1 + omega|``
    on ``[0, 1 + 40 sigma]``; the fold makes the integrand in ``omega`` non-smooth,
    which ruins Gauss-Hermite accuracy once ``sigma_omega`` is of order one.
    """
    if sigma_omega == 0:
        return float(fn(1.0))
    sig = sigma_omega
    norm = 1.0 / (sig * math.sqrt(2.0 * math.pi))

    def integrand(s):
        dens = norm * (math.exp(-0.5 * ((s - 1.0) / sig) ** 2) + math.exp(-0.5 * ((s + 1.0) / sig) ** 2))
        return float(fn(s)) * dens

    upper = 1.0 + 40.0 * sig
    points = sorted({1.0, *(p for p in peaks if 0.0 < p < upper)})
    value, _ = quad(integrand, 0.0, upper, points=points, limit=500, epsabs=0.0, epsrel=1e-12)
    return float(value)


def _map_peaks(method: MetaMethod, lam: float) -> tuple[float, ...]:
    """Scale factors where ``eig_map(method, s * lam)`` has a stationary point."""
    if method.kind == "imaml":
        return (method.gamma / lam,)
    if method.kind == "maml" and method.alpha > 0:
        return (1.0 / (3.0 * method.alpha * lam), 1.0 / (method.alpha * lam))
    return ()


def analytic_weight(method: MetaMethod, env: TaskEnvironment) -> Spectral:
    spec = env.cov
    if not spec.shared_basis:
        raise ConfigError("analytic expectations need a shared eigenbasis; use MonteCarlo")
    basis = build_covariance(spec, RandomStream(0)).basis
    lam = base_spectrum(spec)
    p = _base_pattern(spec.pattern)
    if isinstance(p, ScaledSpiked) and p.sigma_omega > 0:
        # the spectrum takes only the distinct values of the base pattern
        values = np.unique(lam)
        mapped = {
            v: _scale_expectation(lambda s, v=v: eig_map(method, s * v), p.sigma_omega, _map_peaks(method, v))
            for v in values
        }
        return Spectral(np.array([mapped[v] for v in lam]), basis)
    return Spectral(eig_map(method, lam), basis)


def population_draws(method: MetaMethod, env: TaskEnvironment, stream: RandomStream, num: int, chunk: int = 4096):
    """Yield ``(weights, thetas)`` for ``num`` fresh tasks, in blocks of at most ``chunk``.

    With a shared eigenbasis ``weights`` is a ``(k, d)`` array of ``W_m`` eigenvalues and
    ``thetas`` holds ``theta_m`` in that basis. Otherwise ``weights`` is a list of
    :class:`Spectral` and ``thetas`` is in standard coordinates.
    """
    d = env.dim
    if env.cov.shared_basis:
        basis = build_covariance(env.cov, stream).basis
        lam = base_spectrum(env.cov)
        scale = env.R / math.sqrt(d)
        for block, start in enumerate(range(0, num, chunk)):
            k = min(chunk, num - start)
            rng = stream.child("block", block).generator()
            s = draw_scales(env.cov, rng, k)
            w = eig_map(method, s[:, None] * lam[None, :])
            theta = env.mean[None, :] + scale * draw_unit(env.family, rng, (k, d))
            if basis is not None:
                theta = theta @ basis
            yield w, theta
        return
    for start in range(0, num, chunk):
        ws, thetas = [], []
        for k in range(start, min(num, start + chunk)):
            task = stream.child("task", k)
            cov = build_covariance(env.cov, task.child("cov"))
            ws.append(cov.map(lambda lam: eig_map(method, lam)))
            thetas.append(sample_theta_star(env, task.child("theta")))
        yield ws, np.array(thetas)


def _monte_carlo(method: MetaMethod, env: TaskEnvironment, est: MonteCarlo):
    """Average ``W_m`` and ``W_m theta_m`` over fresh task draws."""
    stream = RandomStream(est.seed).child("population")
    d = env.dim
    n = est.num_tasks
    if env.cov.shared_basis:
        basis = build_covariance(env.cov, stream).basis
        acc, acc_sq, acc_wt = np.zeros(d), np.zeros(d), np.zeros(d)
        for w, theta in population_draws(method, env, stream, n):
            acc += w.sum(axis=0)
            acc_sq += (w**2).sum(axis=0)
            acc_wt += (w * theta).sum(axis=0)
        mean = acc / n
        stderr = np.sqrt(np.maximum(acc_sq / n - mean**2, 0.0) / n)
        wt = acc_wt / n
        return Spectral(mean, basis), (wt if basis is None else basis @ wt), stderr
    acc, acc_wt = np.zeros((d, d)), np.zeros(d)
    for ws, thetas in population_draws(method, env, stream, n):
        for w, theta in zip(ws, thetas):
            acc += w.matrix()
            acc_wt += w.apply(theta)
    return Spectral.from_matrix(acc / n), acc_wt / n, None


def mean_weight(method: MetaMethod, env: TaskEnvironment, estimator=Analytic()) -> np.ndarray:
    return population_solution(method, env, estimator).mean_weight


def population_solution(method: MetaMethod, env: TaskEnvironment, estimator=Analytic()) -> PopulationSolution:
    """``theta0 = E[W_m]^{-1} E[W_m theta_m]``."""
    if isinstance(estimator, MonteCarlo):
        weight, wt, stderr = _monte_carlo(method, env, estimator)
    elif isinstance(estimator, Analytic):
        weight = analytic_weight(method, env)
        # theta_m is drawn independently of the covariance, so E[W theta] = W E[theta]
        wt, stderr = weight.apply(env.mean), None
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    lam = weight.eigvals
    if np.any(lam <= 1e-14 * max(float(np.max(np.abs(lam))), 1e-300)):
        raise ConfigError("mean weight matrix is singular; all covariance eigenvalues must be positive")
    theta0 = weight.solve(wt)
    return PopulationSolution(theta0, weight, method, env, estimator, stderr)
