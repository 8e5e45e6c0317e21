"""Heterogeneous straggler model.

Worker ``i`` misses the iteration deadline independently with probability
``p_i``. Under the shifted-exponential delay model the probability of
exceeding a deadline ``tau_th`` is ``exp(-psi_i * (tau_th - 1))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .rng import make_rng

#: Smallest straggle probability callers should use for a "reliable" worker.
P_FLOOR = 1e-9


def straggler_probability(psi: float, tau_th: float) -> float:
    """Probability that a worker with straggling parameter ``psi`` misses ``tau_th``."""
    if not psi > 0:
        raise ValueError(f"psi must be positive, got {psi}")
    if not tau_th >= 1:
        raise ValueError(f"tau_th must be >= 1, got {tau_th}")
    return math.exp(-psi * (tau_th - 1.0))


def delta_inverse(p: float) -> float:
    """Reliability odds ``(1 - p) / p``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"straggle probability must lie in (0, 1), got {p}")
    return (1.0 - p) / p


def delta(p: float) -> float:
    """Straggling odds ``p / (1 - p)``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"straggle probability must lie in (0, 1), got {p}")
    return p / (1.0 - p)


def _as_tuple(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class StragglerProfile:
    """Per-worker straggle probabilities, stored sorted so that ``p[0] <= p[1] <= ...``.

    ``order[s]`` is the original worker id that occupies sorted slot ``s``.
    Build instances with :meth:`from_probabilities` or :func:`sample_profile`
    rather than the raw constructor.
    """

    p: tuple[float, ...]
    order: tuple[int, ...]
    psi: Optional[tuple[float, ...]] = None
    tau_th: Optional[float] = None
    seed: Optional[int] = None
    _arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.p) < 1:
            raise ValueError("a profile needs at least one worker")
        arr = np.asarray(self.p, dtype=float)
        if not np.all((arr > 0.0) & (arr < 1.0)):
            raise ValueError(f"all straggle probabilities must lie in (0, 1), got {list(self.p)}")
        if np.any(np.diff(arr) < 0):
            raise ValueError("profile probabilities must be sorted ascending")
        if sorted(self.order) != list(range(len(self.p))):
            raise ValueError("order must be a permutation of worker ids")
        if self.psi is not None and len(self.psi) != len(self.p):
            raise ValueError("psi must have one entry per worker")
        arr.setflags(write=False)
        object.__setattr__(self, "_arr", arr)

    @classmethod
    def from_probabilities(cls, p, psi=None, tau_th=None, seed=None) -> "StragglerProfile":
        p = np.asarray(p, dtype=float).ravel()
        order = np.argsort(p, kind="stable")
        psi_sorted = None if psi is None else _as_tuple(np.asarray(psi, dtype=float)[order])
        return cls(
            p=_as_tuple(p[order]),
            order=tuple(int(i) for i in order),
            psi=psi_sorted,
            tau_th=None if tau_th is None else float(tau_th),
            seed=seed,
        )

    @property
    def k(self) -> int:
        return len(self.p)

    @property
    def probs(self) -> np.ndarray:
        return self._arr

    @property
    def delta(self) -> np.ndarray:
        return self._arr / (1.0 - self._arr)

    @property
    def delta_inv(self) -> np.ndarray:
        return (1.0 - self._arr) / self._arr

    def to_original(self, values) -> np.ndarray:
        """Reorder a per-worker vector (or matrix rows) from sorted slots to original ids."""
        values = np.asarray(values)
        out = np.empty_like(values)
        out[list(self.order)] = values
        return out

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"k": self.k, "p": list(self.p), "order": list(self.order)}
        if self.psi is not None:
            out["psi"] = list(self.psi)
        if self.tau_th is not None:
            out["tau_th"] = self.tau_th
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StragglerProfile":
        p = np.asarray(data["p"], dtype=float)
        if "k" in data and int(data["k"]) != len(p):
            raise ValueError(f"profile says k={data['k']} but lists {len(p)} probabilities")
        psi = data.get("psi")
        order = data.get("order")
        if order is not None:
            # stored p is in sorted-slot order; rebuild the original worker layout
            orig = np.empty_like(p)
            orig[list(order)] = p
            p = orig
            if psi is not None:
                orig_psi = np.empty(len(psi))
                orig_psi[list(order)] = psi
                psi = orig_psi
        return cls.from_probabilities(p, psi=psi, tau_th=data.get("tau_th"), seed=data.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "StragglerProfile":
        return cls.from_dict(json.loads(text))


def sample_profile(k: int, psi_min: float, psi_max: float, tau_th: float, seed: int) -> StragglerProfile:
    """Draw ``psi_i ~ Uniform(psi_min, psi_max)`` and map each through the delay model."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not psi_min > 0:
        raise ValueError(f"psi_min must be positive, got {psi_min}")
    if psi_max < psi_min:
        raise ValueError(f"psi_max ({psi_max}) must be >= psi_min ({psi_min})")
    if not tau_th >= 1:
        raise ValueError(f"tau_th must be >= 1, got {tau_th}")
    rng = make_rng(seed, "profile")
    psi = rng.uniform(psi_min, psi_max, size=k)
    p = np.array([straggler_probability(s, tau_th) for s in psi])
    if np.any(p >= 1.0) or np.any(p <= 0.0):
        raise ValueError(
            f"(psi in [{psi_min}, {psi_max}], tau_th={tau_th}) gives straggle probabilities "
            "outside (0, 1); tau_th = 1 makes every worker always straggle"
        )
    return StragglerProfile.from_probabilities(p, psi=psi, tau_th=tau_th, seed=seed)


def sample_indicators(profile: StragglerProfile, rng: np.random.Generator) -> np.ndarray:
    """One iteration of arrival indicators: 1 if the worker responds, 0 if it straggles."""
    return (rng.random(profile.k) >= profile.probs).astype(np.int8)


def sample_indicator_matrix(profile: StragglerProfile, rng: np.random.Generator, trials: int) -> np.ndarray:
    """``trials`` independent indicator vectors stacked as rows."""
    return (rng.random((trials, profile.k)) >= profile.probs).astype(np.int8)
