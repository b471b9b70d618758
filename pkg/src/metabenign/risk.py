"""Population risk, excess risk, its three-way decomposition and the effective-rank bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adaptation import MetaMethod, adapt
from .meta_solver import (
    Analytic,
    MinNormSolution,
    MonteCarlo,
    PopulationSolution,
    analytic_weight,
    min_norm_solve,
    population_draws,
)
from .spectrum import SpectrumReport, _first_qualifying
from .streams import RandomStream
from .task_model import (
    ConfigError,
    MetaDataset,
    TaskData,
    TaskEnvironment,
    build_covariance,
    draw_unit,
    sample_inputs,
    sample_theta_star,
)


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int


@dataclass(frozen=True)
class RiskReport:
    population_risk: float
    excess_risk: float
    excess_via_quadratic: float
    excess_via_mc: float
    mc_stderr: float

    @property
    def mc_z(self) -> float:
        """Discrepancy between the two excess-risk routes in standard errors."""
        gap = self.excess_via_quadratic - self.excess_via_mc
        return gap / self.mc_stderr if self.mc_stderr > 0 else (0.0 if gap == 0 else math.inf)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Split of ``||theta0_hat - theta0||_W^2``.

    ``cross_task_variance`` and ``bias`` are realized on the sampled tasks;
    ``per_task_variance`` is the expectation over label noise. ``components``
    holds the three vectors whose sum is ``theta0_hat - theta0``.
    """

    cross_task_variance: float
    bias: float
    per_task_variance: float
    trace_c1: float
    trace_c2: float
    realized_noise: float
    components: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)
    matrices: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return self.cross_task_variance + self.bias + self.per_task_variance


@dataclass(frozen=True)
class BoundReport:
    bias_term: float
    variance_term: float
    heterogeneity_factor: float
    total: float
    k_star: int | None

    @property
    def finite(self) -> bool:
        return self.k_star is not None


def _check_dim(theta: np.ndarray, env: TaskEnvironment) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (env.dim,):
        raise ConfigError(f"theta has shape {theta.shape}, expected ({env.dim},)")
    return theta


def _quad_draws(method: MetaMethod, env: TaskEnvironment, est: MonteCarlo, vectors: list[np.ndarray], tag: str):
    """Per-draw ``(v - theta_m)^T W_m (v - theta_m)`` for each ``v``, on one shared set of draws."""
    stream = RandomStream(est.seed).child(tag)
    out = [[] for _ in vectors]
    if env.cov.shared_basis:
        basis = build_covariance(env.cov, stream).basis
        coords = [v if basis is None else basis.T @ v for v in vectors]
        for w, theta in population_draws(method, env, stream, est.num_tasks):
            for acc, c in zip(out, coords):
                diff = c[None, :] - theta
                acc.append(np.sum(w * diff * diff, axis=1))
    else:
        for ws, thetas in population_draws(method, env, stream, est.num_tasks):
            for acc, v in zip(out, vectors):
                acc.append(np.array([w.quad(v - t) for w, t in zip(ws, thetas)]))
    return [np.concatenate(acc) for acc in out]


def _summary(values: np.ndarray) -> Estimate:
    n = values.size
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return Estimate(float(np.mean(values)), sd / math.sqrt(n), n)


def population_risk_estimate(theta, method: MetaMethod, env: TaskEnvironment, estimator=Analytic()) -> Estimate:
    theta = _check_dim(theta, env)
    if isinstance(estimator, Analytic):
        w = analytic_weight(method, env)
        # theta_m = mean + (R / sqrt d) z with independent unit-variance z
        value = w.quad(theta - env.mean) + env.R**2 / env.dim * float(np.sum(w.eigvals))
        return Estimate(value, 0.0, 0)
    if isinstance(estimator, MonteCarlo):
        (draws,) = _quad_draws(method, env, estimator, [theta], "risk")
        return _summary(draws)
    raise ConfigError(f"unknown estimator {estimator!r}")


def population_risk(theta, method: MetaMethod, env: TaskEnvironment, estimator=Analytic()) -> float:
    """``E_m[(theta - theta_m)^T W_m (theta - theta_m)]``, without noise floor or finite-sample terms."""
    return population_risk_estimate(theta, method, env, estimator).mean


def excess_risk(
    solution: MinNormSolution,
    pop: PopulationSolution,
    mc: MonteCarlo = MonteCarlo(num_tasks=20_000, seed=1),
) -> RiskReport:
    theta_hat = _check_dim(solution.theta0_hat, pop.env)
    quadratic = pop.weight.quad(theta_hat - pop.theta0_star)
    risk_hat, risk_opt = _quad_draws(pop.method, pop.env, mc, [theta_hat, pop.theta0_star], "excess")
    diff = _summary(risk_hat - risk_opt)
    if isinstance(pop.estimator, Analytic) and pop.env.cov.shared_basis:
        level = population_risk(theta_hat, pop.method, pop.env)
    else:
        level = float(np.mean(risk_hat))
    return RiskReport(level, quadratic, quadratic, diff.mean, diff.stderr)


def _task_noise(task: TaskData) -> tuple[np.ndarray, np.ndarray]:
    return task.y_train - task.x_train @ task.theta_star, task.y_val - task.x_val @ task.theta_star


def decompose(
    dataset: MetaDataset,
    method: MetaMethod,
    pop: PopulationSolution,
    solution: MinNormSolution | None = None,
    keep_matrices: bool = False,
) -> Decomposition:
    """Cross-task variance, bias and expected per-task variance of the min-norm solution.

    Pseudo-inverses are used throughout, so rank-deficient designs are handled
    the same way as full-row-rank ones.
    """
    if solution is None:
        solution = min_norm_solve(method, dataset)
    design = solution.design
    u, s, vt = solution.svd
    w = pop.weight
    theta0 = pop.theta0_star
    d = dataset.dim

    signal = np.empty(design.rows)
    noise = np.empty(design.rows)
    for task, sl, g in zip(dataset.tasks, design.slices, design.noise_maps):
        block = design.x_tilde[sl]
        signal[sl] = block @ (task.theta_star - theta0)
        e_tr, e_va = _task_noise(task)
        if method.kind == "erm":
            noise[sl] = np.concatenate([e_tr, e_va]) if method.pool else e_va
        else:
            noise[sl] = e_va + g @ e_tr

    if s.size == 0:
        cross_vec, noise_vec = np.zeros(d), np.zeros(d)
        pinv = np.zeros((d, design.rows))
    else:
        cross_vec = solution.pinv_apply(signal)
        noise_vec = solution.pinv_apply(noise)
        pinv = vt.T @ (u.T / s[:, None])
    bias_vec = vt.T @ (vt @ theta0) - theta0

    trace_c1 = w.trace_quad(pinv)
    trace_c2 = 0.0
    for sl, g in zip(design.slices, design.noise_maps):
        if g is not None:
            trace_c2 += w.trace_quad(pinv[:, sl] @ g)
    sigma2 = dataset.env.sigma_noise**2

    matrices = None
    if keep_matrices:
        proj = vt.T @ vt - np.eye(d)
        wm = w.matrix()
        matrices = {"B": proj @ wm @ proj, "C1": pinv.T @ wm @ pinv, "pinv": pinv}
    return Decomposition(
        cross_task_variance=w.quad(cross_vec),
        bias=w.quad(bias_vec),
        per_task_variance=sigma2 * (trace_c1 + trace_c2),
        trace_c1=trace_c1,
        trace_c2=trace_c2,
        realized_noise=w.quad(noise_vec),
        components=(cross_vec, bias_vec, noise_vec),
        matrices=matrices,
    )


def theorem_bound(
    report: SpectrumReport,
    norm_mean_theta: float,
    sigma: float,
    NM: int,
    heterogeneity: float | None = None,
) -> BoundReport:
    """Evaluate the effective-rank excess-risk bound with every universal constant equal to 1."""
    v = heterogeneity if heterogeneity is not None else (report.heterogeneity or 0.0)
    k_star = report.k_star if NM == report.NM else _first_qualifying(report.r, report.c1 * NM)
    bias_term = norm_mean_theta**2 * report.op_norm * math.sqrt(report.r0 / NM)
    if k_star is None or not report.R[k_star] > 0:
        return BoundReport(bias_term, math.inf, v, math.inf, None)
    variance_term = sigma**2 * (k_star / NM + NM / float(report.R[k_star]))
    return BoundReport(bias_term, variance_term, v, bias_term + variance_term * (1.0 + v), k_star)


def _adaptation_task(env: TaskEnvironment, n: int, stream: RandomStream) -> TaskData:
    cov = build_covariance(env.cov, stream.child("cov"))
    theta = sample_theta_star(env, stream.child("theta"))
    x = sample_inputs(env, cov, n, stream.child("x").generator())
    y = x @ theta + env.sigma_noise * draw_unit(env.family, stream.child("noise").generator(), n)
    empty = np.empty((0, env.dim))
    return TaskData(theta, x, y, empty, np.empty(0), cov, stream)


def finite_adaptation_estimate(
    method: MetaMethod,
    theta,
    env: TaskEnvironment,
    N_adapt: int,
    estimator: MonteCarlo = MonteCarlo(num_tasks=2000, seed=0),
) -> Estimate:
    """Test error after adapting ``theta`` on ``N_adapt`` fresh samples of a fresh task.

    The expectation over the test point is taken in closed form given the task
    (``||theta_m_hat - theta_m||_Q^2 + sigma^2``); tasks and adaptation samples are
    drawn, so higher moments of the inputs enter only through sampling.
    """
    theta = _check_dim(theta, env)
    if N_adapt < 1:
        raise ConfigError("N_adapt must be >= 1")
    root = RandomStream(estimator.seed).child("adapt", N_adapt)
    values = np.empty(estimator.num_tasks)
    for m in range(estimator.num_tasks):
        task = _adaptation_task(env, N_adapt, root.child("task", m))
        err = adapt(method, theta, task) - task.theta_star
        values[m] = task.cov.quad(err) + env.sigma_noise**2
    return _summary(values)


def finite_adaptation_risk(method, theta, env, N_adapt, estimator: MonteCarlo = MonteCarlo(num_tasks=2000, seed=0)) -> float:
    return finite_adaptation_estimate(method, theta, env, N_adapt, estimator).mean
