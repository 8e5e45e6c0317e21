"""Comparison codes: ignore-stragglers SGD, Bernoulli coding, fractional repetition,
optimal-decoding random codes, and stochastic gradient coding.

All constructors return a :class:`~gradcode.codebook.GradientCode` whose rows
follow the (sorted) worker order of the profile. The exact-gradient GD
reference has no code at all; the simulator handles it directly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .codebook import GradientCode
from .rng import make_rng
from .straggler import StragglerProfile

BaselineKind = Literal["gd", "issgd", "bgc", "ehd", "od", "sgc"]
BASELINE_KINDS: tuple[str, ...] = ("gd", "issgd", "bgc", "ehd", "od", "sgc")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    d: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; choose from {', '.join(BASELINE_KINDS)}")
        if self.d < 1:
            raise ValueError(f"computation load d must be >= 1, got {self.d}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "seed": self.seed}


def contiguous_blocks(n: int, parts: int) -> list[range]:
    """Split ``range(n)`` into ``parts`` contiguous blocks, the first ``n % parts`` one longer."""
    if parts < 1 or parts > n:
        raise ValueError(f"cannot split {n} items into {parts} non-empty blocks")
    q, r = divmod(n, parts)
    blocks, start = [], 0
    for g in range(parts):
        size = q + (1 if g < r else 0)
        blocks.append(range(start, start + size))
        start += size
    return blocks


def is_sgd_code(profile: StragglerProfile, n: int) -> GradientCode:
    """Disjoint near-equal blocks, unit coefficients; stragglers are simply dropped."""
    k = profile.k
    if k > n:
        raise ValueError(f"IS-SGD needs k <= n, got k={k}, n={n}")
    A = np.zeros((k, n))
    for i, block in enumerate(contiguous_blocks(n, k)):
        A[i, block.start : block.stop] = 1.0
    return GradientCode(A=A, w=np.ones(k), profile=profile, name="issgd")


def _bernoulli_matrix(k: int, n: int, d: float, seed: int) -> np.ndarray:
    q = d / k
    if not 0 < q <= 1:
        raise ValueError(f"need 0 < d/k <= 1, got d={d}, k={k}")
    if q < 1.0 / (k * n):
        raise ValueError(f"d/k = {q:.3g} is below the floor 1/(k n) = {1.0 / (k * n):.3g}")
    rng = make_rng(seed, "bernoulli-code")
    return (rng.random((k, n)) < q).astype(float)


def bgc_code(profile: StragglerProfile, n: int, d: float = 2.0, seed: int = 0) -> GradientCode:
    """``a[i, j] ~ Bernoulli(d / k)`` i.i.d., unit decoding weights."""
    A = _bernoulli_matrix(profile.k, n, d, seed)
    return GradientCode(A=A, w=np.ones(profile.k), profile=profile, name="bgc")


def fr_code(profile: StragglerProfile, n: int, d: int = 2) -> GradientCode:
    """Fractional repetition: ``k / d`` worker groups, each fully replicating one partition block."""
    k = profile.k
    if int(d) != d or d < 1:
        raise ValueError(f"FR codes need an integer replication factor, got d={d}")
    d = int(d)
    if k % d:
        raise ValueError(f"FR codes need d to divide k, got k={k}, d={d}")
    groups = k // d
    if groups > n:
        raise ValueError(f"FR code needs at least k/d = {groups} partitions, got n={n}")
    A = np.zeros((k, n))
    for g, block in enumerate(contiguous_blocks(n, groups)):
        A[g * d : (g + 1) * d, block.start : block.stop] = 1.0
    return GradientCode(A=A, w=np.ones(k), profile=profile, name="ehd")


def balanced_assignment(k: int, n: int, d: int, seed: int) -> np.ndarray:
    """Boolean ``k x n`` matrix with exactly ``d`` workers per partition and row counts within one.

    Copies are dealt round-robin (partition ``j`` takes slots ``j d .. j d + d - 1``
    modulo ``k``), then workers and partitions are relabelled by seeded
    permutations.
    """
    if not 1 <= d <= k:
        raise ValueError(f"need 1 <= d <= k, got d={d}, k={k}")
    rng = make_rng(seed, "balanced-assignment")
    worker_perm = rng.permutation(k)
    part_perm = rng.permutation(n)
    M = np.zeros((k, n), dtype=bool)
    for j in range(n):
        slots = (j * d + np.arange(d)) % k
        M[worker_perm[slots], part_perm[j]] = True
    return M


def sgc_code(profile: StragglerProfile, n: int, d: int = 2, seed: int = 0) -> GradientCode:
    """Each partition on ``d`` workers with ``a[i, j] = 1 / (d (1 - p_i))`` and ``w = 1``; unbiased."""
    if int(d) != d:
        raise ValueError(f"SGC needs an integer replication factor, got d={d}")
    d = int(d)
    k = profile.k
    M = balanced_assignment(k, n, d, seed)
    counts = M.sum(axis=1)
    if counts.max() - counts.min() > 2:
        warnings.warn("SGC assignment is unbalanced beyond +/-2 partitions per worker", stacklevel=2)
    A = np.where(M, 1.0 / (d * (1.0 - profile.probs))[:, None], 0.0)
    return GradientCode(A=A, w=np.ones(k), profile=profile, name="sgc")


def od_code(profile: StragglerProfile, n: int, d: float = 2.0, seed: int = 0) -> GradientCode:
    """Same random binary encoder as BGC; decoding is solved per iteration by :func:`od_decode`."""
    A = _bernoulli_matrix(profile.k, n, d, seed)
    return GradientCode(A=A, w=None, profile=profile, name="od")


def od_decode(A: np.ndarray, indicators: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares decoder over the surviving workers.

    Minimises ``||1 - A_S^T w_S||`` where ``S`` is the set of arrived workers;
    singular values below ``rcond * sigma_max`` are truncated. Stragglers get
    weight zero, and an all-straggler round returns all zeros.
    """
    A = np.asarray(A, dtype=float)
    ind = np.asarray(indicators).astype(bool)
    w = np.zeros(A.shape[0])
    if not ind.any():
        return w
    sol, *_ = np.linalg.lstsq(A[ind].T, np.ones(A.shape[1]), rcond=rcond)
    w[ind] = sol
    return w


def od_residual(A: np.ndarray, indicators: np.ndarray, w: np.ndarray) -> float:
    ind = np.asarray(indicators).astype(bool)
    return float(np.linalg.norm(np.ones(A.shape[1]) - A[ind].T @ np.asarray(w)[ind]))


def build_baseline(spec: BaselineSpec, profile: StragglerProfile, n: int) -> Optional[GradientCode]:
    """Construct the code for ``spec``; the GD reference returns ``None``."""
    if spec.kind == "gd":
        return None
    if spec.kind == "issgd":
        return is_sgd_code(profile, n)
    if spec.kind == "bgc":
        return bgc_code(profile, n, spec.d, spec.seed)
    if spec.kind == "ehd":
        return fr_code(profile, n, spec.d)
    if spec.kind == "od":
        return od_code(profile, n, spec.d, spec.seed)
    if spec.kind == "sgc":
        return sgc_code(profile, n, spec.d, spec.seed)
    raise ValueError(f"unknown baseline {spec.kind!r}")
