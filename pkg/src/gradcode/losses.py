"""Synthetic convex tasks with exact gradients and a known optimum.

Losses are sums over samples, so the full gradient is exactly the sum of
per-partition gradients. The L2 term is spread evenly over samples
(``lambda_reg / (2 m)`` each) so that it splits across partitions too.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .rng import make_rng

LossKind = Literal["quadratic", "ridge", "logistic"]


def _log1pexp(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class LossModel:
    """A dataset ``(X, y)`` with a loss kind; caches curvature bounds and the optimum.

    ``strong_convexity`` and ``smoothness`` are the moduli the convergence
    bounds are stated in. For least-squares kinds they are the extreme
    Hessian eigenvalues. For logistic loss they are global bounds:
    ``lambda_reg`` and ``max eig(X^T X) / 4 + lambda_reg``.
    """

    kind: str
    X: np.ndarray
    y: np.ndarray
    lambda_reg: float = 0.0
    strong_convexity: float = field(init=False)
    smoothness: float = field(init=False)
    beta_star: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("quadratic", "ridge", "logistic"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be m x l with one target per row")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.kind == "quadratic" and self.lambda_reg != 0:
            raise ValueError("the quadratic task has no regulariser; use kind='ridge'")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        gram = X.T @ X
        eig = np.linalg.eigvalsh(gram)
        if self.kind == "logistic":
            lam = self.lambda_reg
            mu = eig[-1] / 4.0 + self.lambda_reg
        else:
            lam = eig[0] + self.lambda_reg
            mu = eig[-1] + self.lambda_reg
        object.__setattr__(self, "strong_convexity", float(lam))
        object.__setattr__(self, "smoothness", float(mu))
        object.__setattr__(self, "beta_star", self._solve_optimum())

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _reg_weight(self, rows: slice | np.ndarray) -> float:
        count = len(range(self.m)[rows]) if isinstance(rows, slice) else len(rows)
        return self.lambda_reg * count / self.m

    def loss(self, beta: np.ndarray, rows: slice | np.ndarray = slice(None)) -> float:
        X, y = self.X[rows], self.y[rows]
        z = X @ beta
        if self.kind == "logistic":
            data = float(np.sum(_log1pexp(z) - y * z))
        else:
            r = z - y
            data = 0.5 * float(r @ r)
        return data + 0.5 * self._reg_weight(rows) * float(beta @ beta)

    def gradient(self, beta: np.ndarray, rows: slice | np.ndarray = slice(None)) -> np.ndarray:
        X, y = self.X[rows], self.y[rows]
        z = X @ beta
        resid = _sigmoid(z) - y if self.kind == "logistic" else z - y
        return X.T @ resid + self._reg_weight(rows) * beta

    def block_gradients(self, beta: np.ndarray, parts: "list[slice]") -> np.ndarray:
        """Gradients of contiguous, covering row blocks stacked as an ``(n, l)`` matrix."""
        z = self.X @ beta
        resid = _sigmoid(z) - self.y if self.kind == "logistic" else z - self.y
        starts = np.array([p.start for p in parts])
        counts = np.array([p.stop - p.start for p in parts], dtype=float)
        G = np.add.reduceat(self.X * resid[:, None], starts, axis=0)
        return G + np.outer(self.lambda_reg * counts / self.m, beta)

    def hessian(self, beta: np.ndarray) -> np.ndarray:
        if self.kind == "logistic":
            s = _sigmoid(self.X @ beta)
            H = (self.X * (s * (1 - s))[:, None]).T @ self.X
        else:
            H = self.X.T @ self.X
        return H + self.lambda_reg * np.eye(self.dim)

    def _solve_optimum(self) -> np.ndarray:
        if self.kind != "logistic":
            H = self.X.T @ self.X + self.lambda_reg * np.eye(self.dim)
            return np.linalg.solve(H, self.X.T @ self.y)
        if self.lambda_reg <= 0:
            raise ValueError("logistic tasks need lambda_reg > 0 for a unique optimum")
        beta = np.zeros(self.dim)
        for _ in range(200):
            g = self.gradient(beta)
            if np.linalg.norm(g) <= 1e-12 * max(1.0, self.m):
                break
            step = np.linalg.solve(self.hessian(beta), g)
            t, f0 = 1.0, self.loss(beta)
            if float(g @ step) <= 1e-15 * max(1.0, abs(f0)):
                # the decrease is below rounding, so a line search cannot see it;
                # inside the quadratic region the full step is safe
                beta = beta - step
                break
            # backtracking keeps Newton globally convergent
            while self.loss(beta - t * step) > f0 - 0.25 * t * float(g @ step) and t > 1e-10:
                t *= 0.5
            beta = beta - t * step
        else:
            raise RuntimeError("Newton iteration for the logistic optimum did not converge")
        return beta


def make_ridge_task(m: int = 200, dim: int = 10, lambda_reg: float = 1.0, noise: float = 0.5, seed: int = 0) -> LossModel:
    rng = make_rng(seed, "ridge-task")
    X = rng.standard_normal((m, dim))
    beta_true = rng.standard_normal(dim)
    y = X @ beta_true + noise * rng.standard_normal(m)
    return LossModel("ridge", X, y, lambda_reg)


def make_quadratic_task(m: int = 50, dim: int = 5, seed: int = 0) -> LossModel:
    rng = make_rng(seed, "quadratic-task")
    X = rng.standard_normal((m, dim))
    y = X @ rng.standard_normal(dim) + 0.1 * rng.standard_normal(m)
    return LossModel("quadratic", X, y, 0.0)


def make_logistic_task(
    m: int = 400,
    dim: int = 5,
    lambda_reg: float = 1e-2,
    scale: float = 0.05,
    clusters: int = 0,
    seed: int = 0,
) -> LossModel:
    """Labels from a noisy linear model; features are ``scale``-shrunk Gaussians.

    With ``clusters > 0`` the samples come in that many contiguous groups with
    distinct feature means, so contiguous partitions carry different data.
    """
    rng = make_rng(seed, "logistic-task")
    X = rng.standard_normal((m, dim))
    if clusters:
        centers = 2.0 * rng.standard_normal((clusters, dim))
        owner = np.repeat(np.arange(clusters), -(-m // clusters))[:m]
        X = X + centers[owner]
    beta_true = 2.0 * rng.standard_normal(dim)
    logits = X @ beta_true
    y = (rng.random(m) < _sigmoid(logits)).astype(float)
    return LossModel("logistic", scale * X, y, lambda_reg)


def make_task(kind: str, seed: int = 0, **kwargs) -> LossModel:
    if kind == "ridge":
        return make_ridge_task(seed=seed, **kwargs)
    if kind == "quadratic":
        return make_quadratic_task(seed=seed, **kwargs)
    if kind == "logistic":
        return make_logistic_task(seed=seed, **kwargs)
    raise ValueError(f"unknown task kind {kind!r}")
