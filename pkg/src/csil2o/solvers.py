"""Non-learned LASSO solvers: soft-thresholding, ISTA and FISTA.

All routines are plain numpy and operate on single problem instances.  The
FISTA-based :func:`solve_oracle` is the ground truth for convergence checks
of the learned decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NonConvergenceError


def lipschitz(W, max_iter=100, tol=1e-10):
    """Largest eigenvalue of ``W.T @ W`` by power iteration."""
    W = np.asarray(W, dtype=np.float64)
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    L = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        L_new = float(np.linalg.norm(w))
        if L_new == 0.0:
            return 0.0
        v = w / L_new
        if abs(L_new - L) <= tol * L_new:
            L = L_new
            break
        L = L_new
    return L


@dataclass
class LassoProblem:
    W: np.ndarray
    s: np.ndarray
    lam: float
    alpha: float | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.W.ndim != 2 or self.s.shape != (self.W.shape[0],):
            raise DimensionError(f"W {self.W.shape} and s {self.s.shape} are inconsistent")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.alpha is None:
            self.alpha = self.safe_step()
        elif self.alpha <= 0:
            raise ContractError("step size must be positive")

    @property
    def n(self):
        return self.W.shape[1]

    def lipschitz(self):
        return lipschitz(self.W)

    def safe_step(self):
        # Power iteration approaches L from below; the 1e-9 margin keeps
        # alpha <= 1/L despite the residual error.
        return 1.0 / (self.lipschitz() * (1.0 + 1e-9))


def soft_threshold(x, theta):
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise ContractError("soft_threshold: theta must be non-negative")
    if theta.ndim and theta.shape != x.shape:
        raise DimensionError(f"theta shape {theta.shape} does not match x {x.shape}")
    return np.sign(x) * np.maximum(0.0, np.abs(x) - theta)


def _check_x(p, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.n,):
        raise DimensionError(f"x has shape {x.shape}, problem expects ({p.n},)")
    return x


def objective(p, x):
    x = _check_x(p, x)
    r = p.s - p.W @ x
    return 0.5 * float(r @ r) + p.lam * float(np.abs(x).sum())


def ista_step(p, x):
    x = _check_x(p, x)
    u = x - p.alpha * (p.W.T @ (p.W @ x - p.s))
    return soft_threshold(u, p.alpha * p.lam)


def ista(p, T, x0=None):
    """Run ``T`` ISTA steps from ``x0`` (zeros by default); returns (x, objectives)."""
    x = np.zeros(p.n) if x0 is None else _check_x(p, x0).copy()
    objs = [objective(p, x)]
    for _ in range(T):
        x = ista_step(p, x)
        objs.append(objective(p, x))
    return x, np.array(objs)


def fista(p, T, x0=None):
    x = np.zeros(p.n) if x0 is None else _check_x(p, x0).copy()
    y, tk = x.copy(), 1.0
    for _ in range(T):
        x_new = ista_step(p, y)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = x_new + ((tk - 1.0) / t_new) * (x_new - x)
        x, tk = x_new, t_new
    return x


def solve_oracle(p, tol=1e-12, max_iter=1_000_000):
    """High-accuracy LASSO solution by FISTA with step 1/L.

    Stops once successive iterates differ by less than ``tol`` in max norm.
    Raises :class:`NonConvergenceError` (carrying the last iterate) at the cap.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    q = LassoProblem(p.W, p.s, p.lam)
    x = np.zeros(p.n)
    y, tk = x.copy(), 1.0
    for _ in range(max_iter):
        x_new = ista_step(q, y)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = x_new + ((tk - 1.0) / t_new) * (x_new - x)
        delta = float(np.max(np.abs(x_new - x)))
        x, tk = x_new, t_new
        if delta < tol:
            return x
    residual = float(np.max(np.abs(ista_step(q, x) - x)))
    raise NonConvergenceError(
        f"FISTA did not reach tol={tol} in {max_iter} iterations (fixed-point residual {residual:.3e})",
        iterate=x,
        residual=residual,
    )


def gaussian_matrix(M, n, seed):
    """Fixed Gaussian sampling matrix with entries N(0, 1/M)."""
    return np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(M), size=(M, n))


def ista_batch(W, S, lam, T, alpha=None, X0=None):
    """ISTA on many observations sharing one ``W``; ``S`` is (batch, M)."""
    W = np.asarray(W, dtype=np.float64)
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    alpha = 1.0 / (lipschitz(W) * (1.0 + 1e-9)) if alpha is None else alpha
    X = np.zeros((S.shape[0], W.shape[1])) if X0 is None else np.array(X0, dtype=np.float64)
    for _ in range(T):
        U = X - alpha * ((X @ W.T - S) @ W)
        X = np.sign(U) * np.maximum(0.0, np.abs(U) - alpha * lam)
    return X
