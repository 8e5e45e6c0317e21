"""Verification layer: Monte Carlo estimator statistics, an independent
numeric solver for the residual-minimisation problem, optimality gaps and
cross-method comparison tables.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codebook import (
    STRUCT_TOL,
    AlphaMatrix,
    GradientCode,
    analytic_residual_error,
    decoding_weights,
    is_unbiased,
    lemma1_bound,
    worker_messages,
)
from .rng import make_rng
from .schemes import computation_load
from .simulator import TrainTrace
from .straggler import StragglerProfile, sample_indicator_matrix

CI_SIGMAS = 4.0
COMPARISON_COLUMNS = ("method", "d", "unbiased", "mean_final_loss", "mean_resid", "bound_resid", "pass")
CURVE_COLUMNS = ("method", "t", "d_t", "mean_loss", "mean_dist_sq_opt", "mean_resid_sq")
MC_COLUMNS = ("trials", "empirical_resid", "analytic_resid", "resid_se", "max_abs_mean_error", "max_ci_halfwidth", "mean_within_ci")


@dataclass(frozen=True)
class MonteCarloReport:
    trials: int
    empirical_mean_error: np.ndarray
    empirical_resid: float
    analytic_resid: Optional[float]
    ci_halfwidth: np.ndarray
    resid_se: float

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")

    @property
    def mean_within_ci(self) -> bool:
        return bool(np.all(np.abs(self.empirical_mean_error) <= self.ci_halfwidth))

    @property
    def resid_relative_error(self) -> float:
        if self.analytic_resid is None:
            return math.nan
        if self.analytic_resid == 0:
            return 0.0 if self.empirical_resid == 0 else math.inf
        return abs(self.empirical_resid - self.analytic_resid) / self.analytic_resid

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MC_COLUMNS)
        writer.writerow([
            self.trials,
            repr(self.empirical_resid),
            "" if self.analytic_resid is None else repr(self.analytic_resid),
            repr(self.resid_se),
            repr(float(np.max(np.abs(self.empirical_mean_error)))),
            repr(float(np.max(self.ci_halfwidth))),
            self.mean_within_ci,
        ])
        return buf.getvalue()


def monte_carlo(
    code: GradientCode,
    gradients: np.ndarray,
    trials: int = 100_000,
    seed: int = 0,
    profile: Optional[StragglerProfile] = None,
    chunk: int = 20_000,
) -> MonteCarloReport:
    """Sample ``trials`` straggler patterns and summarise ``g_hat`` against ``g = sum_j g_j``.

    Trials run in fixed-size chunks, each from its own stream, and are reduced
    in chunk order, so the report depends only on ``(seed, trials)``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if trials < 1000:
        warnings.warn("fewer than 1000 trials; confidence intervals are unreliable", stacklevel=2)
    profile = code.profile if profile is None else profile
    G = np.asarray(gradients, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    g = G.sum(axis=0)
    f = worker_messages(code.A, G)
    total = np.zeros_like(g)
    total_sq = np.zeros_like(g)
    resid_sum = 0.0
    resid_sq_sum = 0.0
    for c, start in enumerate(range(0, trials, chunk)):
        size = min(chunk, trials - start)
        ind = sample_indicator_matrix(profile, make_rng(seed, "monte-carlo", c), size)
        est = decoding_weights(code, ind) @ f
        err = est - g
        total += est.sum(axis=0)
        total_sq += np.sum((est - g) ** 2, axis=0)
        r = np.sum(err * err, axis=1)
        resid_sum += float(r.sum())
        resid_sq_sum += float(r @ r)
    mean = total / trials
    mean_err = mean - g
    # sample variance per component, from the second moment about g
    var = np.maximum(total_sq / trials - mean_err**2, 0.0)
    half = CI_SIGMAS * np.sqrt(var / max(trials - 1, 1))
    emp = resid_sum / trials
    resid_var = max(resid_sq_sum / trials - emp**2, 0.0)
    analytic = None
    if not code.adaptive and is_unbiased(code):
        analytic = analytic_residual_error(code, G)
    return MonteCarloReport(
        trials=trials,
        empirical_mean_error=mean_err,
        empirical_resid=emp,
        analytic_resid=analytic,
        ci_halfwidth=half,
        resid_se=math.sqrt(resid_var / trials),
    )


def empirical_unbiasedness_residuals(code: GradientCode, trials: int = 20_000, seed: int = 0) -> np.ndarray:
    """Monte Carlo estimate of ``E[sum_i I_i w_i a[i, j]] - 1`` per partition.

    Works for adaptive decoders, where the expectation has no closed form.
    """
    ind = sample_indicator_matrix(code.profile, make_rng(seed, "bias-check"), trials)
    W = decoding_weights(code, ind)
    return (W @ code.A).mean(axis=0) - 1.0


# -- the residual-minimisation problem, solved numerically ------------------


@dataclass(frozen=True)
class P3Result:
    alpha: AlphaMatrix
    objective: float
    iterations: int
    converged: bool


def p3_objective(alpha: np.ndarray, profile: StragglerProfile) -> float:
    rows = np.asarray(alpha).sum(axis=1)
    return float(np.sum(profile.delta * rows**2))


def p3_numeric_solve(profile: StragglerProfile, n: int, max_iters: int = 200_000, tol: float = 1e-15) -> P3Result:
    """Projected gradient descent on ``sum_i delta_i (sum_j alpha[i, j])^2`` subject to unit column sums.

    Starts from the uniform feasible point ``1 / k`` and uses the fixed step
    ``1 / (2 n max_i delta_i)``. The objective gradient ``2 delta_i r_i`` is
    constant along each row, so its projection is too; the iterate therefore
    stays of the form ``alpha_0 + x 1^T`` and is stored as the per-row shift
    ``x``. Stops once the relative objective decrease drops below ``tol``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    k = profile.k
    dl = profile.delta
    step = 1.0 / (2.0 * n * float(dl.max()))
    base = np.full((k, n), 1.0 / k)
    shift = np.zeros(k)
    rows = base.sum(axis=1)
    obj = float(np.sum(dl * rows**2))
    converged = k == 1
    it = 0
    while not converged and it < max_iters:
        it += 1
        grad_row = 2.0 * dl * rows
        # projection onto {column sums = 1}: subtract each column's mean gradient
        move = -step * (grad_row - grad_row.mean())
        shift += move
        rows = rows + n * move
        new_obj = float(np.sum(dl * rows**2))
        if obj - new_obj <= tol * obj:
            converged = True
        obj = new_obj
    if not converged:
        warnings.warn(f"projected gradient did not converge within {max_iters} iterations", stacklevel=2)
    alpha = AlphaMatrix(base + shift[:, None])
    return P3Result(alpha, p3_objective(alpha.entries, profile), it, converged)


def optimality_gap(alpha: AlphaMatrix, profile: StragglerProfile, tol: float = STRUCT_TOL) -> float:
    """``sum_i delta_i r_i^2 - n^2 / S``; defined only for column-valid ``alpha``."""
    if alpha.k != profile.k:
        raise ValueError("alpha and profile disagree on k")
    dev = float(np.max(np.abs(alpha.col_sums() - 1.0)))
    if dev > tol:
        raise ValueError(f"alpha is not column-valid (max |colsum - 1| = {dev:.3g})")
    n = alpha.n
    S = float(profile.delta_inv.sum())
    return p3_objective(alpha.entries, profile) - n * n / S


# -- method comparison -------------------------------------------------------


@dataclass(frozen=True)
class MethodResult:
    method: str
    d: float
    unbiased: bool
    mean_final_loss: float
    mean_resid: float
    bound_resid: Optional[float]

    @property
    def passed(self) -> bool:
        """An unbiased method whose mean residual stays under its analytic ceiling."""
        if self.method == "gd":
            return self.mean_resid == 0.0
        return self.unbiased and self.bound_resid is not None and self.mean_resid <= self.bound_resid

    def row(self) -> list:
        bound = "" if self.bound_resid is None else repr(self.bound_resid)
        return [self.method, repr(self.d), self.unbiased, repr(self.mean_final_loss), repr(self.mean_resid), bound, self.passed]


def summarize_method(method: str, code: Optional[GradientCode], traces: Sequence[TrainTrace], C: float) -> MethodResult:
    final = float(np.mean([tr.loss[-1] for tr in traces]))
    resid = float(np.mean([tr.resid_sq.mean() for tr in traces]))
    if code is None:
        return MethodResult(method, 1.0, True, final, resid, 0.0)
    d = float(computation_load(AlphaMatrix(code.A)))
    unbiased = is_unbiased(code)
    bound = lemma1_bound(code, C) if unbiased else None
    return MethodResult(method, d, unbiased, final, resid, bound)


def bound_report(results: Sequence[MethodResult]) -> str:
    """Comparison table as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for res in results:
        writer.writerow(res.row())
    return buf.getvalue()


def curves_csv(curves: Sequence[tuple[str, float, Sequence[TrainTrace]]]) -> str:
    """Run-averaged curves per method, indexed both by iteration and by ``d * iteration``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for method, d, traces in curves:
        loss = np.mean([tr.loss for tr in traces], axis=0)
        dist = np.mean([tr.dist_sq_opt for tr in traces], axis=0)
        resid = np.mean([tr.resid_sq for tr in traces], axis=0)
        for t in range(len(loss)):
            writer.writerow([method, t + 1, repr(d * (t + 1)), repr(float(loss[t])), repr(float(dist[t])), repr(float(resid[t]))])
    return buf.getvalue()
