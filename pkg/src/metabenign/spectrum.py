"""Effective ranks, effective dimension, heterogeneity and benign-overfitting checks."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .adaptation import MetaMethod, eig_map

__all__ = [
    "BenignDiagnostic",
    "BenignPoint",
    "ScalePoint",
    "SpectrumReport",
    "benign_scan",
    "effective_dimension",
    "effective_ranks",
    "eig_map",
    "heterogeneity",
    "hyperparameter_safe",
    "order_preserved",
    "rank_profile",
    "read_spectrum_csv",
    "spectrum_report",
    "write_spectrum_csv",
]


class SpectrumError(ValueError):
    pass


def _two_square(a: float) -> tuple[float, float]:
    """``a*a == hi + lo`` exactly (Dekker split; no fma on 3.10)."""
    p = a * a
    c = 134217729.0 * a
    hi = c - (c - a)
    lo = a - hi
    return p, ((hi * hi - p) + 2.0 * hi * lo) + lo * lo


class _ExactSum:
    """Shewchuk's non-overlapping partials; ``value()`` is the correctly rounded sum."""

    def __init__(self):
        self.partials: list[float] = []

    def add(self, x: float) -> None:
        i = 0
        for y in self.partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                self.partials[i] = lo
                i += 1
            x = hi
        self.partials[i:] = [x]

    def value(self) -> float:
        return math.fsum(self.partials)

    def exact(self) -> Fraction:
        return sum(map(Fraction, self.partials), Fraction(0))


def _as_descending(eigvals) -> np.ndarray:
    mu = np.asarray(eigvals, dtype=float).ravel()
    if mu.size == 0:
        raise SpectrumError("empty spectrum")
    if not np.all(np.isfinite(mu)):
        raise SpectrumError("eigenvalues must be finite")
    if np.any(mu < 0):
        raise SpectrumError("eigenvalues must be non-negative")
    if np.any(np.diff(mu) > 0):
        raise SpectrumError("eigenvalues must be in non-increasing order")
    return mu


def _ratios(s: Fraction, sq: Fraction, head: float) -> tuple[float, float]:
    """Correctly rounded ``s / head`` and ``s^2 / sq`` from exact tail sums."""
    r = float(s / Fraction(head)) if head > 0 else math.nan
    return r, (float(s * s / sq) if sq > 0 else math.nan)


def _tail_sums(mu: np.ndarray, k: int) -> tuple[Fraction, Fraction]:
    acc, sq = _ExactSum(), _ExactSum()
    for x in mu[k:].tolist():
        acc.add(x)
        hi, lo = _two_square(x)
        sq.add(hi)
        sq.add(lo)
    return acc.exact(), sq.exact()


def effective_ranks(eigvals, k: int) -> tuple[float, float]:
    """``(r_k, R_k)``: tail trace over the next eigenvalue, and squared tail trace over tail Frobenius mass.

    ``r_k`` is NaN when eigenvalue ``k + 1`` is zero; ``R_k`` is NaN when the whole tail is.
    """
    mu = _as_descending(eigvals)
    if not 0 <= k < mu.size:
        raise SpectrumError(f"k={k} outside [0, {mu.size})")
    return _ratios(*_tail_sums(mu, k), float(mu[k]))


def rank_profile(eigvals) -> tuple[np.ndarray, np.ndarray]:
    """``r_k`` and ``R_k`` for every ``k`` in ``[0, d)``; NaN where undefined."""
    mu = _as_descending(eigvals)
    d = mu.size
    r, big_r = np.empty(d), np.empty(d)
    acc, acc_sq = _ExactSum(), _ExactSum()
    values = mu.tolist()
    for k in range(d - 1, -1, -1):
        acc.add(values[k])
        hi, lo = _two_square(values[k])
        acc_sq.add(hi)
        acc_sq.add(lo)
        r[k], big_r[k] = _ratios(acc.exact(), acc_sq.exact(), values[k])
    return r, big_r


def _first_qualifying(r: np.ndarray, threshold: float) -> int | None:
    # r_k is not monotone in general, so no early exit on a decrease
    for k, value in enumerate(r):
        if math.isnan(value):
            return None
        if value >= threshold:
            return k
    return None


def effective_dimension(eigvals, NM: int, c1: float = 1.0) -> int | None:
    """Smallest ``k`` with ``r_k >= c1 * NM``, or None."""
    if c1 < 1:
        raise SpectrumError("c1 must be >= 1")
    r, _ = rank_profile(eigvals)
    return _first_qualifying(r, c1 * NM)


def heterogeneity(spectra) -> float:
    """Largest relative deviation of a task spectrum from the task-averaged spectrum.

    Rows of ``spectra`` must be aligned to a common eigenbasis (index ``i`` is
    the same eigenvector in every row).
    """
    lam = np.asarray(spectra, dtype=float)
    if lam.ndim != 2:
        try:
            lam = np.vstack([np.asarray(s, dtype=float) for s in spectra])
        except ValueError as exc:
            raise SpectrumError("spectra have mismatched dimensions") from exc
    mean = np.array([math.fsum(col) for col in lam.T.tolist()]) / lam.shape[0]
    if np.any(mean <= 0):
        raise SpectrumError("task-averaged eigenvalues must be positive")
    dev = np.abs(mean[None, :] - lam) / mean[None, :]
    # columns shared by every task deviate by exactly zero, whatever the rounding of the mean
    dev[:, np.all(lam == lam[0], axis=0)] = 0.0
    return float(np.max(dev))


def order_preserved(method: MetaMethod, eigvals) -> bool:
    """Whether the weight eigenvalue map is non-decreasing on ``[0, lambda_1]``."""
    lam1 = float(np.max(eigvals))
    if method.kind == "maml":
        # derivative (1 - a l)(1 - 3 a l) first turns negative at l = 1 / (3a)
        return method.alpha <= 0 or 3.0 * method.alpha * lam1 <= 1.0
    if method.kind == "imaml":
        return method.gamma >= lam1
    return True


def hyperparameter_safe(method: MetaMethod, lambda1: float) -> bool:
    """Sufficient condition under which MAML/iMAML keep ERM's benign behaviour."""
    if lambda1 <= 0:
        raise SpectrumError("lambda1 must be positive")
    if method.kind == "maml":
        return 0.0 < method.alpha and 3.0 * method.alpha * lambda1 <= 1.0
    if method.kind == "imaml":
        return method.gamma >= lambda1
    return True


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    eigvals: np.ndarray
    r: np.ndarray
    R: np.ndarray
    k_star: int | None
    op_norm: float
    trace: float
    NM: int
    c1: float = 1.0
    heterogeneity: float | None = None

    def r_k(self, k: int) -> float:
        return float(self.r[k])

    def R_k(self, k: int) -> float:
        return float(self.R[k])

    @property
    def r0(self) -> float:
        return float(self.r[0])

    @property
    def R_kstar(self) -> float:
        return math.nan if self.k_star is None else float(self.R[self.k_star])

    @property
    def ratios(self) -> tuple[float, float, float]:
        """``(r_0/NM, k*/NM, NM/R_k*)``; NaN entries when ``k*`` does not exist."""
        if self.k_star is None:
            return self.r0 / self.NM, math.nan, math.nan
        return self.r0 / self.NM, self.k_star / self.NM, self.NM / self.R_kstar


def spectrum_report(eigvals, NM: int, c1: float = 1.0, heterogeneity: float | None = None) -> SpectrumReport:
    mu = np.sort(np.asarray(eigvals, dtype=float))[::-1]
    # eigensolver round-off can leave tiny negatives on PSD input
    mu = np.where(mu < 0, 0.0, mu)
    r, big_r = rank_profile(mu)
    return SpectrumReport(
        eigvals=mu,
        r=r,
        R=big_r,
        k_star=_first_qualifying(r, c1 * NM),
        op_norm=float(mu[0]),
        trace=math.fsum(mu.tolist()),
        NM=int(NM),
        c1=c1,
        heterogeneity=heterogeneity,
    )


@dataclass(frozen=True)
class ScalePoint:
    """One step of a scaling sequence: sizes plus the spectrum of the mean weight matrix."""

    d: int
    N: int
    M: int
    eigvals: Sequence[float]


@dataclass(frozen=True)
class BenignPoint:
    d: int
    N: int
    M: int
    ratio_r0: float
    ratio_kstar: float
    ratio_R: float


@dataclass(frozen=True)
class BenignDiagnostic:
    points: list[BenignPoint]
    verdict: str
    rho: dict[str, float] = field(default_factory=dict)
    slopes: dict[str, float] = field(default_factory=dict)
    excluded: list[ScalePoint] = field(default_factory=list)


def _trend(values: np.ndarray, nm: np.ndarray) -> tuple[float, float, bool]:
    if np.all(values == 0):
        return -1.0, -math.inf, True
    if np.all(values == values[0]):
        return 0.0, 0.0, False
    rho = spearmanr(np.arange(values.size), values).statistic
    rho = float(rho) if rho is not None else math.nan
    pos = values > 0
    slope = math.nan
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(nm[pos]), np.log(values[pos]), 1)[0])
    return rho, slope, bool(rho <= -0.8)


def benign_scan(points: Iterable[ScalePoint], method: MetaMethod | None = None, c1: float = 1.0) -> BenignDiagnostic:
    """Evaluate the three benign ratios along a scaling sequence and judge their trend.

    When ``method`` is given, each point's spectrum is read as covariance
    eigenvalues and mapped to the method's weight eigenvalues first.
    """
    points = list(points)
    if len(points) < 4:
        raise SpectrumError("a scaling sequence needs at least 4 points")
    kept, excluded = [], []
    for p in points:
        if p.N * p.M >= p.d:
            warnings.warn(f"scale point d={p.d}, NM={p.N * p.M} is not overparameterized; excluded")
            excluded.append(p)
        else:
            kept.append(p)
    rows = []
    degenerate = False
    for p in kept:
        lam = np.asarray(p.eigvals, dtype=float)
        if method is not None:
            lam = eig_map(method, lam)
        rep = spectrum_report(lam, p.N * p.M, c1)
        r0, ks, rr = rep.ratios
        if rep.k_star is None or not math.isfinite(rr):
            degenerate = True
        rows.append(BenignPoint(p.d, p.N, p.M, r0, ks, rr))
    if degenerate or len(rows) < 4:
        return BenignDiagnostic(rows, "Inconclusive", excluded=excluded)
    nm = np.array([p.N * p.M for p in rows], dtype=float)
    rho, slopes, ok = {}, {}, []
    for name in ("ratio_r0", "ratio_kstar", "ratio_R"):
        values = np.array([getattr(p, name) for p in rows])
        rho[name], slopes[name], dec = _trend(values, nm)
        ok.append(dec)
    verdict = "TrendingBenign" if all(ok) else "NotBenign"
    return BenignDiagnostic(rows, verdict, rho, slopes, excluded)


def read_spectrum_csv(path) -> np.ndarray:
    """One eigenvalue per line, descending; ``#`` comments and blank lines are skipped."""
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                values.append(float(row[0]))
            except ValueError as exc:
                raise SpectrumError(f"line {lineno}: cannot parse {row[0]!r} as a number") from exc
            if len(row) > 1 and any(cell.strip() for cell in row[1:]):
                raise SpectrumError(f"line {lineno}: expected one value per line")
    if not values:
        raise SpectrumError("spectrum file holds no values")
    lam = np.array(values)
    if np.any(np.diff(lam) > 0):
        raise SpectrumError("spectrum must be listed in descending order")
    return lam


def write_spectrum_csv(path, eigvals) -> None:
    mu = np.sort(np.asarray(eigvals, dtype=float))[::-1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for x in mu:
            fh.write(f"{x:.17g}\n")
