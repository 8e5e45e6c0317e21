"""Gradient codes: combined-coefficient matrices, encoding/decoding, and error formulas.

The design object is the ``k x n`` matrix ``alpha`` with
``alpha[i, j] = (1 - p_i) * w_i * a[i, j]``. Column sums of one make the
aggregated gradient unbiased; the residual error is then governed by the
row sums, which are optimal when they equal the row targets ``Y``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .straggler import StragglerProfile

#: absolute tolerance for structural checks (column sums, row sums, unbiasedness)
STRUCT_TOL = 1e-9
#: entries with magnitude at or below this are treated as zero when deriving a support
SUPPORT_EPS = 1e-12


@dataclass(frozen=True)
class RowTargets:
    """Optimal row sums ``Y_i = delta_i^{-1} * n / S`` with ``S = sum_j delta_j^{-1}``."""

    Y: np.ndarray
    S: float
    n: int

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 1 or Y.size == 0 or not np.all(np.isfinite(Y)) or np.any(Y <= 0):
            raise ValueError("row targets must be a non-empty vector of positive finite numbers")

    @property
    def k(self) -> int:
        return len(self.Y)


def row_targets(profile: StragglerProfile, n: int) -> RowTargets:
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    dinv = profile.delta_inv
    S = float(dinv.sum())
    Y = dinv * (n / S)
    Y.setflags(write=False)
    return RowTargets(Y=Y, S=S, n=n)


def _support_from_entries(entries: np.ndarray) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(j) for j in np.flatnonzero(np.abs(row) > SUPPORT_EPS)) for row in entries)


@dataclass(frozen=True, eq=False)
class AlphaMatrix:
    """Dense ``alpha`` plus the per-row partition lists that define each worker's batch.

    When ``support`` is given it is the data allocation, which may contain
    entries whose coefficient happens to be zero. Omitting it derives the
    support from the nonzero pattern.
    """

    entries: np.ndarray
    support: tuple[tuple[int, ...], ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2:
            raise ValueError(f"alpha must be a 2-D matrix, got shape {entries.shape}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        if self.support is None:
            support = _support_from_entries(entries)
        else:
            support = tuple(tuple(sorted(int(j) for j in row)) for row in self.support)
            if len(support) != entries.shape[0]:
                raise ValueError("support needs one index list per row")
            mask = np.zeros(entries.shape, dtype=bool)
            for i, row in enumerate(support):
                if row and (row[0] < 0 or row[-1] >= entries.shape[1]):
                    raise ValueError(f"support of row {i} has out-of-range partition indices")
                mask[i, list(row)] = True
            stray = np.abs(entries[~mask]) > SUPPORT_EPS
            if np.any(stray):
                raise ValueError("alpha has nonzero entries outside the declared support")
        object.__setattr__(self, "support", support)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def support_mask(self) -> np.ndarray:
        mask = np.zeros(self.entries.shape, dtype=bool)
        for i, row in enumerate(self.support):
            mask[i, list(row)] = True
        return mask

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "n": self.n,
            "alpha": self.entries.tolist(),
            "support": [list(r) for r in self.support],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AlphaMatrix":
        entries = np.asarray(data["alpha"], dtype=float)
        if "k" in data and entries.shape[0] != int(data["k"]):
            raise ValueError("alpha row count does not match k")
        if "n" in data and entries.shape[1] != int(data["n"]):
            raise ValueError("alpha column count does not match n")
        return cls(entries, data.get("support"))


@dataclass(frozen=True)
class StructureReport:
    max_col_dev: float
    max_row_dev: float
    tol: float

    @property
    def col_ok(self) -> bool:
        return self.max_col_dev <= self.tol

    @property
    def row_ok(self) -> bool:
        return self.max_row_dev <= self.tol

    @property
    def passed(self) -> bool:
        return self.col_ok and self.row_ok

    def rows(self) -> list[tuple[str, float, float, bool]]:
        return [
            ("column_sums", self.max_col_dev, self.tol, self.col_ok),
            ("row_sums", self.max_row_dev, self.tol, self.row_ok),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["check", "max_deviation", "tol", "pass"])
        for check, dev, tol, ok in self.rows():
            writer.writerow([check, repr(dev), repr(tol), str(ok).lower()])
        return buf.getvalue()


def verify_optimal_structure(alpha: AlphaMatrix, targets: RowTargets, tol: float = STRUCT_TOL) -> StructureReport:
    """Compare column sums against 1 and row sums against the targets ``Y``."""
    if alpha.k != targets.k or alpha.n != targets.n:
        raise ValueError(
            f"alpha is {alpha.k}x{alpha.n} but targets describe k={targets.k}, n={targets.n}"
        )
    col_dev = float(np.max(np.abs(alpha.col_sums() - 1.0)))
    row_dev = float(np.max(np.abs(alpha.row_sums() - targets.Y)))
    return StructureReport(max_col_dev=col_dev, max_row_dev=row_dev, tol=tol)


@dataclass(frozen=True, eq=False)
class GradientCode:
    """Encoding matrix ``A`` and decoding vector ``w`` for a given profile.

    ``w`` is ``None`` for codes whose decoder is recomputed every iteration
    from the surviving workers (see :func:`gradcode.baselines.od_decode`).
    ``w_tilde`` is only set for codes extracted from an ``alpha`` matrix.
    """

    A: np.ndarray
    w: Optional[np.ndarray]
    profile: StragglerProfile
    w_tilde: Optional[np.ndarray] = None
    name: str = "code"
    alpha: Optional[AlphaMatrix] = field(default=None, repr=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2:
            raise ValueError(f"A must be a 2-D matrix, got shape {A.shape}")
        if A.shape[0] != self.profile.k:
            raise ValueError(f"A has {A.shape[0]} rows but the profile has {self.profile.k} workers")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        for attr in ("w", "w_tilde"):
            val = getattr(self, attr)
            if val is not None:
                val = np.array(val, dtype=float).ravel()
                if val.shape != (A.shape[0],):
                    raise ValueError(f"{attr} must have length {A.shape[0]}")
                val.setflags(write=False)
                object.__setattr__(self, attr, val)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def adaptive(self) -> bool:
        return self.w is None

    def effective_weights(self) -> np.ndarray:
        """``(1 - p_i) * w_i * a[i, j]``: the expected contribution of partition ``j`` via worker ``i``."""
        if self.w is None:
            raise ValueError(f"{self.name} decodes adaptively; effective weights are not static")
        return ((1.0 - self.profile.probs) * self.w)[:, None] * self.A

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "k": self.k, "n": self.n}
        if self.alpha is not None:
            out["alpha"] = self.alpha.entries.tolist()
            out["support"] = [list(r) for r in self.alpha.support]
        out["w_tilde"] = None if self.w_tilde is None else self.w_tilde.tolist()
        out["A"] = self.A.tolist()
        out["w"] = None if self.w is None else self.w.tolist()
        out["profile"] = self.profile.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any], profile: Optional[StragglerProfile] = None) -> "GradientCode":
        if profile is None:
            if "profile" not in data:
                raise ValueError("code file carries no profile and none was supplied")
            profile = StragglerProfile.from_dict(data["profile"])
        alpha = None
        if data.get("alpha") is not None:
            alpha = AlphaMatrix(np.asarray(data["alpha"], dtype=float), data.get("support"))
        A = np.asarray(data["A"], dtype=float)
        if "k" in data and A.shape[0] != int(data["k"]):
            raise ValueError("A row count does not match k")
        if "n" in data and A.shape[1] != int(data["n"]):
            raise ValueError("A column count does not match n")
        return cls(
            A=A,
            w=data.get("w"),
            profile=profile,
            w_tilde=data.get("w_tilde"),
            name=data.get("name", "code"),
            alpha=alpha,
        )


def random_w_tilde(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``[0.5, 2]`` scalings, used to exercise the scaling invariance of extracted codes."""
    return rng.uniform(0.5, 2.0, size=k)


def extract_code(
    alpha: AlphaMatrix,
    profile: StragglerProfile,
    w_tilde: Optional[Sequence[float]] = None,
    name: str = "code",
) -> GradientCode:
    """Split ``alpha`` into ``a = alpha / w_tilde`` and ``w = w_tilde / (1 - p)``.

    The product ``(1 - p_i) w_i a[i, j]`` reproduces ``alpha`` for any nonzero
    ``w_tilde``; the default of all ones keeps the result deterministic.
    """
    if alpha.k != profile.k:
        raise ValueError(f"alpha has {alpha.k} rows but the profile has {profile.k} workers")
    wt = np.ones(alpha.k) if w_tilde is None else np.asarray(w_tilde, dtype=float).ravel()
    if wt.shape != (alpha.k,):
        raise ValueError(f"w_tilde must have length {alpha.k}")
    if np.any(wt == 0):
        raise ValueError("w_tilde entries must be nonzero")
    A = alpha.entries / wt[:, None]
    w = wt / (1.0 - profile.probs)
    return GradientCode(A=A, w=w, profile=profile, w_tilde=wt, name=name, alpha=alpha)


def worker_messages(A: np.ndarray, partial_gradients: np.ndarray) -> np.ndarray:
    """``f_i = sum_j a[i, j] g_j`` for every worker, shape ``(k, l)``."""
    G = np.asarray(partial_gradients, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] != A.shape[1]:
        raise ValueError(f"expected {A.shape[1]} partial gradients, got {G.shape[0]}")
    return A @ G


def decoding_weights(code: GradientCode, indicators: np.ndarray) -> np.ndarray:
    """Per-worker multipliers ``I_i * w_i`` for one realisation (or a batch of realisations)."""
    ind = np.asarray(indicators)
    if ind.shape[-1] != code.k:
        raise ValueError(f"indicator vectors must have length {code.k}")
    if code.w is not None:
        return ind * code.w
    from .baselines import od_decode

    if ind.ndim == 1:
        return od_decode(code.A, ind)
    return np.stack([od_decode(code.A, row) for row in ind])


def estimate(code: GradientCode, indicators: np.ndarray, partial_gradients: np.ndarray) -> np.ndarray:
    """Aggregated gradient ``sum_i I_i w_i f_i`` seen by the master."""
    f = worker_messages(code.A, partial_gradients)
    ind = np.asarray(indicators)
    if ind.ndim != 1:
        raise ValueError("estimate takes a single indicator vector")
    out = decoding_weights(code, ind) @ f
    G = np.asarray(partial_gradients)
    return out if G.ndim > 1 else out[0]


def unbiasedness_residuals(code: GradientCode) -> np.ndarray:
    """``sum_i (1 - p_i) w_i a[i, j] - 1`` per partition; all zero iff the code is unbiased."""
    return code.effective_weights().sum(axis=0) - 1.0


def is_unbiased(code: GradientCode, tol: float = STRUCT_TOL) -> bool:
    if code.adaptive:
        return False
    return bool(np.max(np.abs(unbiasedness_residuals(code))) <= tol)


def _require_unbiased(code: GradientCode, tol: float) -> None:
    if code.adaptive:
        raise ValueError(f"{code.name} decodes adaptively; the variance identity does not apply")
    worst = float(np.max(np.abs(unbiasedness_residuals(code))))
    if worst > tol:
        raise ValueError(f"{code.name} is biased (max |residual| = {worst:.3g}); the variance identity needs unbiasedness")


def analytic_residual_error(code: GradientCode, partial_gradients: np.ndarray, tol: float = STRUCT_TOL) -> float:
    """Exact ``E||g - g_hat||^2`` for an unbiased code: ``sum_i p_i (1 - p_i) w_i^2 ||f_i||^2``."""
    _require_unbiased(code, tol)
    f = worker_messages(code.A, partial_gradients)
    p = code.profile.probs
    return float(np.sum(p * (1.0 - p) * code.w**2 * np.sum(f * f, axis=1)))


def lemma1_bound(code: GradientCode, C: float, tol: float = STRUCT_TOL) -> float:
    """Residual-error ceiling ``C * sum_i p_i (1 - p_i) w_i^2 (sum_j a[i, j])^2`` when ``||g_j||^2 <= C``."""
    _require_unbiased(code, tol)
    p = code.profile.probs
    rows = code.A.sum(axis=1)
    return float(C * np.sum(p * (1.0 - p) * code.w**2 * rows**2))


def lemma2_bounds(targets: RowTargets, C: float) -> tuple[float, float]:
    """``(n^2 C / S, n^2 C (1 + 1/S))``: residual and squared-norm ceilings for optimal codes."""
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    n2c = targets.n**2 * C
    return n2c / targets.S, n2c * (1.0 + 1.0 / targets.S)
