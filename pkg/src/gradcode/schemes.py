"""Closed-form constructions of optimally structured codes.

Workers are indexed in ascending order of straggle probability, partitions
``0..n-1``. Both schemes hand worker ``i`` ``b_i`` partitions with
``sum(b) = n + k - 1``, so the allocation graph is a spanning tree and the
computation load is ``1 + (k - 1) / n``.

* Scheme I: partition 0 is shared by every worker, all others are exclusive.
* Scheme II: consecutive workers share exactly one partition (a chain).

The sparse construction first splits the workers into groups whose row
targets sum to integers and builds an independent chain per group.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Optional, Sequence

import numpy as np

from .codebook import STRUCT_TOL, AlphaMatrix, RowTargets

SchemeKind = Literal["I", "II", "sparse"]

#: exhaustive subset search in the sparse split is capped at this many workers
SPARSE_MAX_K = 20


@dataclass(frozen=True)
class BatchAllocation:
    b: tuple[int, ...]
    batches: tuple[tuple[int, ...], ...]
    scheme: SchemeKind
    n: int

    @property
    def k(self) -> int:
        return len(self.b)

    @property
    def max_load(self) -> int:
        return max(self.b)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "b": list(self.b), "batches": [list(x) for x in self.batches]}


@dataclass(frozen=True)
class SparsePartition:
    """Worker groups ``rows[l]`` paired with the consecutive partition block ``cols[l]``."""

    rows: tuple[tuple[int, ...], ...]
    cols: tuple[tuple[int, ...], ...]

    @property
    def count(self) -> int:
        return len(self.rows)

    def to_list(self) -> list[dict]:
        return [{"workers": list(r), "partitions": list(c)} for r, c in zip(self.rows, self.cols)]


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quotas = total * weights / weights.sum()
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    frac = quotas - base
    # stable sort on -frac breaks ties by lower index
    for idx in np.argsort(-frac, kind="stable")[:short]:
        base[idx] += 1
    return base


def default_batch_sizes(targets: RowTargets, k: Optional[int] = None, n: Optional[int] = None) -> tuple[int, ...]:
    """Reliability-proportional batch sizes satisfying both schemes' constraints.

    ``b_k = 1``; the remaining ``n + k - 2`` partitions go to workers
    ``1..k-1`` by largest remainder on ``Y``. Every worker but the last then
    gets at least two partitions (needed by Scheme II's middle links), paid
    for one unit at a time by the currently largest entry.
    """
    k = targets.k if k is None else k
    n = targets.n if n is None else n
    if k != targets.k or n != targets.n:
        raise ValueError("k and n must match the row targets")
    if k > n:
        raise ValueError(f"schemes need k <= n, got k={k}, n={n}")
    if k == 1:
        return (n,)
    budget = n + k - 2
    head = _largest_remainder(budget, np.asarray(targets.Y[: k - 1], dtype=float))
    floor = 2 if k > 2 else 1
    while True:
        low = np.flatnonzero(head < floor)
        if low.size == 0:
            break
        donor = int(np.argmax(head))  # first index among ties
        head[donor] -= 1
        head[low[0]] += 1
    b = sorted((int(x) for x in head), reverse=True) + [1]
    return tuple(b)


def _check_b(b: Sequence[int], n: int, k: int) -> tuple[int, ...]:
    b = tuple(int(x) for x in b)
    if len(b) != k:
        raise ValueError(f"b must have {k} entries, got {len(b)}")
    if any(x < 1 for x in b):
        raise ValueError(f"batch sizes must be positive, got {b}")
    if sum(b) != n + k - 1:
        raise ValueError(f"batch sizes must sum to n + k - 1 = {n + k - 1}, got {sum(b)}")
    if any(b[i] < b[i + 1] for i in range(k - 1)):
        raise ValueError(f"batch sizes must be non-increasing, got {b}")
    if k > 1 and b[-1] != 1:
        raise ValueError(f"the last worker must hold exactly one partition, got b_k={b[-1]}")
    return b


def scheme1_allocate(b: Sequence[int], n: int, k: int) -> BatchAllocation:
    b = _check_b(b, n, k)
    if k == 1:
        return BatchAllocation(b, (tuple(range(n)),), "I", n)
    batches = [tuple(range(b[0]))]
    start = b[0]  # first exclusive partition of worker 2
    for i in range(1, k - 1):
        batches.append((0,) + tuple(range(start, start + b[i] - 1)))
        start += b[i] - 1
    batches.append((0,))
    return BatchAllocation(b, tuple(batches), "I", n)


def scheme1_alpha(allocation: BatchAllocation, targets: RowTargets) -> AlphaMatrix:
    """Shared column gets ``Y_i - b_i + 1``; every exclusive partition gets 1."""
    if allocation.scheme != "I":
        raise ValueError(f"expected a Scheme I allocation, got scheme {allocation.scheme}")
    k, n = allocation.k, allocation.n
    if targets.k != k or targets.n != n:
        raise ValueError("allocation and targets disagree on k or n")
    alpha = np.zeros((k, n))
    for i, batch in enumerate(allocation.batches):
        alpha[i, list(batch)] = 1.0
        alpha[i, 0] = targets.Y[i] - allocation.b[i] + 1
    return AlphaMatrix(alpha, allocation.batches)


def scheme2_allocate(b: Sequence[int], n: int, k: int) -> BatchAllocation:
    b = _check_b(b, n, k)
    if any(x < 2 for x in b[1 : k - 1]):
        raise ValueError(f"Scheme II needs b_i >= 2 for every middle worker, got {b}")
    batches = []
    start = 0
    for i in range(k):
        batches.append(tuple(range(start, start + b[i])))
        start += b[i] - 1
    return BatchAllocation(b, tuple(batches), "II", n)


def _scheme2_entries(allocation: BatchAllocation, targets: RowTargets) -> tuple[np.ndarray, float]:
    k, n = allocation.k, allocation.n
    b, Y = allocation.b, targets.Y
    alpha = np.zeros((k, n))
    if k == 1:
        alpha[0, :] = 1.0
        alpha[0, -1] = Y[0] - b[0] + 1
        return alpha, alpha[0, -1]
    first = allocation.batches[0]
    alpha[0, list(first[:-1])] = 1.0
    alpha[0, first[-1]] = Y[0] - b[0] + 1
    for i in range(1, k - 1):
        batch = allocation.batches[i]
        head, tail = batch[0], batch[-1]
        alpha[i, head] = 1.0 - alpha[i - 1, head]
        alpha[i, list(batch[1:-1])] = 1.0
        alpha[i, tail] = Y[i] + alpha[i - 1, head] - b[i] + 1
    closing = 1.0 - alpha[k - 2, n - 1]
    alpha[k - 1, n - 1] = Y[k - 1]
    return alpha, closing


def scheme2_alpha(allocation: BatchAllocation, targets: RowTargets) -> AlphaMatrix:
    """Chain construction, filled row by row; the last worker takes ``Y_k`` on partition ``n``."""
    if allocation.scheme != "II":
        raise ValueError(f"expected a Scheme II allocation, got scheme {allocation.scheme}")
    if targets.k != allocation.k or targets.n != allocation.n:
        raise ValueError("allocation and targets disagree on k or n")
    alpha, _ = _scheme2_entries(allocation, targets)
    return AlphaMatrix(alpha, allocation.batches)


def scheme2_closure(allocation: BatchAllocation, targets: RowTargets) -> float:
    """Entry the recursion itself implies for the last worker (``1 - alpha[k-1, n]``).

    Equals ``Y_k`` whenever ``sum(Y) = n``.
    """
    _, closing = _scheme2_entries(allocation, targets)
    return closing


def computation_load(alpha: AlphaMatrix) -> Fraction:
    """Average number of workers holding each partition."""
    return Fraction(sum(len(row) for row in alpha.support), alpha.n)


def build_scheme(targets: RowTargets, scheme: Literal["I", "II"], b: Optional[Sequence[int]] = None) -> tuple[AlphaMatrix, BatchAllocation]:
    b = default_batch_sizes(targets) if b is None else b
    if scheme == "I":
        alloc = scheme1_allocate(b, targets.n, targets.k)
        return scheme1_alpha(alloc, targets), alloc
    if scheme == "II":
        alloc = scheme2_allocate(b, targets.n, targets.k)
        return scheme2_alpha(alloc, targets), alloc
    raise ValueError(f"unknown scheme {scheme!r}")


def _is_positive_integer(x: float, tol: float) -> bool:
    r = round(x)
    return r >= 1 and abs(x - r) <= tol


def _best_split(Y: np.ndarray, tol: float) -> Optional[np.ndarray]:
    """Bitmask (over positions in ``Y``) of the preferred side of a valid split, or None."""
    m = len(Y)
    if m < 2:
        return None
    sums = np.zeros(1)
    for y in Y:
        sums = np.concatenate([sums, sums + y])
    total = float(np.sum(Y))
    masks = np.arange(1 << m, dtype=np.int64)
    rest = total - sums
    ok = (np.abs(sums - np.round(sums)) <= tol) & (np.round(sums) >= 1)
    ok &= (np.abs(rest - np.round(rest)) <= tol) & (np.round(rest) >= 1)
    ok[0] = ok[-1] = False
    cand = masks[ok]
    if cand.size == 0:
        return None
    bits = ((cand[:, None] >> np.arange(m)) & 1).astype(bool)
    size = bits.sum(axis=1)
    # keep each split once, represented by its smaller side (lexicographic tie-break)
    comp_bits = ~bits
    keys = _lex_keys(bits)
    comp_keys = _lex_keys(comp_bits)
    smaller_is_self = (size < m - size) | ((size == m - size) & _lex_less_or_equal(keys, comp_keys))
    cand_bits = bits[smaller_is_self]
    cand_keys = keys[smaller_is_self]
    order = np.lexsort(cand_keys.T[::-1])
    return cand_bits[order[0]]


def _lex_keys(bits: np.ndarray) -> np.ndarray:
    """Sorted index tuples padded with -1, so row order equals tuple order."""
    m = bits.shape[1]
    keys = np.sort(np.where(bits, np.arange(m), m), axis=1)
    keys[keys == m] = -1
    return keys


def _lex_less_or_equal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a != b
    has = diff.any(axis=1)
    first = np.argmax(diff, axis=1)
    rows = np.arange(a.shape[0])
    return ~has | (a[rows, first] < b[rows, first])


def partition_row_targets(targets: RowTargets, tol: float = STRUCT_TOL) -> SparsePartition:
    """Recursively split the workers into groups whose target sums are positive integers.

    A group is split into two parts whenever both sides sum to positive
    integers; among candidate splits the one whose smaller side has the
    lexicographically smallest worker-index tuple wins. Groups are then
    ordered by their smallest worker and given consecutive partition blocks.
    """
    k = targets.k
    if k > SPARSE_MAX_K:
        raise ValueError(f"sparse construction searches subsets exhaustively; k={k} exceeds {SPARSE_MAX_K}")
    Y = np.asarray(targets.Y, dtype=float)
    pending = [tuple(range(k))]
    final: list[tuple[int, ...]] = []
    while pending:
        group = pending.pop()
        side = _best_split(Y[list(group)], tol)
        if side is None:
            final.append(group)
            continue
        left = tuple(g for g, s in zip(group, side) if s)
        right = tuple(g for g, s in zip(group, side) if not s)
        pending.extend([right, left])
    final.sort(key=min)
    cols = []
    start = 0
    for group in final:
        size = int(round(float(Y[list(group)].sum())))
        cols.append(tuple(range(start, start + size)))
        start += size
    if start != targets.n:
        raise ValueError(f"group sizes add to {start}, expected n={targets.n}")
    return SparsePartition(rows=tuple(final), cols=tuple(cols))


def sparse_construct(
    targets: RowTargets,
    partition: Optional[SparsePartition] = None,
    inner: Literal["I", "II"] = "II",
) -> AlphaMatrix:
    """Block-diagonal ``alpha`` with one spanning-tree code per worker group.

    A group with more workers than partitions cannot host a chain; it falls
    back to Scheme I with ``b = (n_l, 1, ..., 1)``, which is valid for any
    sizes and keeps the group's load at ``|R_l| + |C_l| - 1``.
    """
    partition = partition_row_targets(targets) if partition is None else partition
    k, n = targets.k, targets.n
    seen_rows = sorted(i for r in partition.rows for i in r)
    seen_cols = sorted(j for c in partition.cols for j in c)
    if seen_rows != list(range(k)) or seen_cols != list(range(n)):
        raise ValueError("partition must cover every worker and every partition exactly once")
    alpha = np.zeros((k, n))
    support: list[tuple[int, ...]] = [()] * k
    for rows, cols in zip(partition.rows, partition.cols):
        Ysub = np.asarray(targets.Y)[list(rows)]
        if abs(Ysub.sum() - len(cols)) > STRUCT_TOL * max(1, len(cols)):
            raise ValueError(f"group {rows} has target sum {Ysub.sum()} but {len(cols)} partitions")
        sub = RowTargets(Y=Ysub, S=math.nan, n=len(cols))
        kl, nl = len(rows), len(cols)
        if kl <= nl:
            sub_alpha, _ = build_scheme(sub, inner)
        else:
            sub_b = (nl,) + (1,) * (kl - 1)
            alloc = scheme1_allocate(sub_b, nl, kl)
            sub_alpha = scheme1_alpha(alloc, sub)
        alpha[np.ix_(list(rows), list(cols))] = sub_alpha.entries
        for local_i, i in enumerate(rows):
            support[i] = tuple(cols[j] for j in sub_alpha.support[local_i])
    return AlphaMatrix(alpha, tuple(support))


def sparse_load_formula(partition: SparsePartition, n: int) -> Fraction:
    return Fraction(sum(len(r) + len(c) - 1 for r, c in zip(partition.rows, partition.cols)), n)


def minibatch_dense_alpha(targets_or_profile, n: Optional[int] = None) -> AlphaMatrix:
    """Fully replicated optimum for mini-batch sampling: every column equals ``delta^{-1} / S``."""
    from .straggler import StragglerProfile

    if isinstance(targets_or_profile, StragglerProfile):
        if n is None:
            raise ValueError("n is required when passing a profile")
        dinv = targets_or_profile.delta_inv
    else:
        n = targets_or_profile.n
        dinv = np.asarray(targets_or_profile.Y, dtype=float)
    col = dinv / dinv.sum()
    alpha = np.repeat(col[:, None], n, axis=1)
    return AlphaMatrix(alpha, tuple(tuple(range(n)) for _ in range(len(col))))
