"""Inner-level adaptation (ERM / MAML / iMAML) and the per-task weight matrices.

Gradient convention: the per-task loss is ``(1/2N) ||X theta - y||^2`` so that
its gradient is ``Q_hat theta - X^T y / N``; the factor 2 is absorbed into the
step size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Spectral, spd_solve
from .task_model import ConfigError, MetaDataset, TaskData

KINDS = ("erm", "maml", "imaml")


@dataclass(frozen=True)
class MetaMethod:
    kind: str
    alpha: float = 0.0
    gamma: float = 1.0
    pool: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"method kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "imaml" and not self.gamma > 0:
            raise ConfigError(f"iMAML requires gamma > 0, got {self.gamma}")
        if self.pool and self.kind != "erm":
            raise ConfigError("train/validation pooling only applies to ERM")

    @classmethod
    def erm(cls, pool: bool = False) -> MetaMethod:
        return cls("erm", pool=pool)

    @classmethod
    def maml(cls, alpha: float) -> MetaMethod:
        return cls("maml", alpha=float(alpha))

    @classmethod
    def imaml(cls, gamma: float) -> MetaMethod:
        return cls("imaml", gamma=float(gamma))

    @property
    def hyper(self) -> float:
        return {"erm": 0.0, "maml": self.alpha, "imaml": self.gamma}[self.kind]

    @property
    def label(self) -> str:
        if self.kind == "maml":
            return f"maml(alpha={self.alpha:g})"
        if self.kind == "imaml":
            return f"imaml(gamma={self.gamma:g})"
        return "erm(pooled)" if self.pool else "erm"


def eig_map(method: MetaMethod, lam):
    """Eigenvalue of the population weight matrix for a covariance eigenvalue ``lam``."""
    lam = np.asarray(lam, dtype=float)
    if method.kind == "maml":
        return lam * (1.0 - method.alpha * lam) ** 2
    if method.kind == "imaml":
        return lam / (1.0 + lam / method.gamma) ** 2
    return lam


def _imaml_shrink(task: TaskData, gamma: float, rhs: np.ndarray) -> np.ndarray:
    """``(I + Q_tr / gamma)^{-1} rhs``."""
    a = np.eye(task.dim) + task.q_train / gamma
    return spd_solve(a, rhs)


def adapt(method: MetaMethod, theta0: np.ndarray, task: TaskData) -> np.ndarray:
    if theta0.shape != (task.dim,):
        raise ConfigError("theta0 dimension does not match the task")
    if method.kind == "erm":
        return theta0.copy()
    xty = task.x_train.T @ task.y_train / task.n_train
    if method.kind == "maml":
        return theta0 - method.alpha * (task.q_train @ theta0 - xty)
    a = task.q_train + method.gamma * np.eye(task.dim)
    return spd_solve(a, xty + method.gamma * theta0)


def _erm_rows(method: MetaMethod, task: TaskData) -> tuple[np.ndarray, np.ndarray]:
    if method.pool:
        return np.vstack([task.x_train, task.x_val]), np.concatenate([task.y_train, task.y_val])
    return task.x_val, task.y_val


def empirical_weight(method: MetaMethod, task: TaskData) -> np.ndarray:
    if method.kind == "erm":
        x, _ = _erm_rows(method, task)
        return x.T @ x / x.shape[0]
    if method.kind == "maml":
        p = np.eye(task.dim) - method.alpha * task.q_train
        w = p @ task.q_val @ p
    else:
        s = _imaml_shrink(task, method.gamma, np.eye(task.dim))
        w = s @ task.q_val @ s.T
    return 0.5 * (w + w.T)


def population_weight(method: MetaMethod, cov: Spectral) -> Spectral:
    """Same eigenvectors as ``cov``; eigenvalues mapped by :func:`eig_map`."""
    return cov.map(lambda lam: eig_map(method, lam))


@dataclass(frozen=True, eq=False)
class EffectiveDesign:
    """Stacked least-squares system ``x_tilde theta0 ~ b`` equivalent to the meta objective.

    ``noise_maps[m]`` is the ``(n_val, n_train)`` matrix ``G_m`` through which
    training-label noise enters ``b_m``: ``b_m = x_tilde_m theta_m + e_va + G_m e_tr``.
    """

    x_tilde: np.ndarray
    b: np.ndarray
    slices: list[slice]
    noise_maps: list[np.ndarray | None]
    rows_per_task: int

    @property
    def rows(self) -> int:
        return self.x_tilde.shape[0]


def _task_block(method: MetaMethod, task: TaskData):
    if method.kind == "erm":
        x, y = _erm_rows(method, task)
        return x, y, None
    xv, yv = task.x_val, task.y_val
    xt, yt, n_tr = task.x_train, task.y_train, task.n_train
    if method.kind == "maml":
        p = np.eye(task.dim) - method.alpha * task.q_train
        xt_block = xv @ p
        g = -(method.alpha / n_tr) * (xv @ xt.T)
        return xt_block, yv + g @ yt, g
    xt_block = _imaml_shrink(task, method.gamma, xv.T).T
    # X_va (Q_tr + gamma I)^{-1} X_tr^T / N_tr == X~_m X_tr^T / (gamma N_tr)
    g = -(xt_block @ xt.T) / (method.gamma * n_tr)
    return xt_block, yv + g @ yt, g


def effective_design(method: MetaMethod, dataset: MetaDataset) -> EffectiveDesign:
    blocks, targets, maps, slices = [], [], [], []
    start = 0
    for task in dataset.tasks:
        x, b, g = _task_block(method, task)
        blocks.append(x)
        targets.append(b)
        maps.append(g)
        slices.append(slice(start, start + x.shape[0]))
        start += x.shape[0]
    return EffectiveDesign(
        x_tilde=np.vstack(blocks),
        b=np.concatenate(targets),
        slices=slices,
        noise_maps=maps,
        rows_per_task=blocks[0].shape[0],
    )


def meta_objective(method: MetaMethod, theta0: np.ndarray, dataset: MetaDataset) -> float:
    """Average validation loss after adaptation, evaluated task by task through :func:`adapt`."""
    total, count = 0.0, 0
    for task in dataset.tasks:
        theta = adapt(method, theta0, task)
        if method.kind == "erm":
            x, y = _erm_rows(method, task)
        else:
            x, y = task.x_val, task.y_val
        r = x @ theta - y
        total += float(r @ r)
        count += x.shape[0]
    return total / count
