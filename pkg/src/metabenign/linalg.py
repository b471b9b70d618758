"""Small linear-algebra helpers shared across modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class Spectral:
    """Symmetric matrix held as ``basis @ diag(eigvals) @ basis.T``.

    ``basis=None`` means the standard basis, which lets diagonal matrices skip
    every O(d^2) product. ``eigvals`` is not required to be sorted.
    """

    eigvals: np.ndarray
    basis: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.eigvals.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.basis is None

    def rotation(self) -> np.ndarray:
        return np.eye(self.dim) if self.basis is None else self.basis

    def matrix(self) -> np.ndarray:
        if self.basis is None:
            return np.diag(self.eigvals)
        return (self.basis * self.eigvals) @ self.basis.T

    def coords(self, v: np.ndarray) -> np.ndarray:
        return v if self.basis is None else self.basis.T @ v

    def quad(self, v: np.ndarray) -> float:
        """Return ``v.T @ A @ v``."""
        c = self.coords(v)
        return float(np.dot(c * self.eigvals, c))

    def trace_quad(self, k: np.ndarray) -> float:
        """Return ``trace(k.T @ A @ k)`` for a ``(d, n)`` matrix ``k``."""
        c = k if self.basis is None else self.basis.T @ k
        return float(np.sum(self.eigvals[:, None] * c * c))

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return self.eigvals * v
        return self.basis @ (self.eigvals * (self.basis.T @ v))

    def solve(self, v: np.ndarray) -> np.ndarray:
        c = self.coords(v) / self.eigvals
        return c if self.basis is None else self.basis @ c

    def map(self, fn) -> Spectral:
        return Spectral(np.asarray(fn(self.eigvals), dtype=float), self.basis)

    def descending(self) -> np.ndarray:
        return np.sort(self.eigvals)[::-1]

    @classmethod
    def from_matrix(cls, a: np.ndarray) -> Spectral:
        a = 0.5 * (a + a.T)
        w, v = np.linalg.eigh(a)
        return cls(w, v)


def haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR with the sign of diag(R) fixed."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` via Cholesky."""
    factor = cho_factor(a, lower=True, check_finite=False)
    return cho_solve(factor, b, check_finite=False)
