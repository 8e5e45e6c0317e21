"""Coded distributed gradient descent under random stragglers.

Each iteration draws arrival indicators, computes clipped partition
gradients, forms worker messages ``f_i = sum_j a[i, j] g_j`` and updates
``beta <- beta - gamma_t * sum_i I_i w_i f_i``.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codebook import (
    GradientCode,
    RowTargets,
    decoding_weights,
    is_unbiased,
    worker_messages,
)
from .losses import LossModel
from .rng import make_rng
from .schemes import minibatch_dense_alpha  # noqa: F401  (re-exported)
from .straggler import StragglerProfile, sample_indicators

TRACE_COLUMNS = ("run", "t", "loss", "dist_sq_opt", "resid_sq", "gamma", "n_stragglers")


def partition_dataset(loss: LossModel, n: int) -> list[slice]:
    """Contiguous sample blocks, the first ``m % n`` one sample longer."""
    m = loss.m
    if not 1 <= n <= m:
        raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
    q, r = divmod(m, n)
    out, start = [], 0
    for j in range(n):
        size = q + (1 if j < r else 0)
        out.append(slice(start, start + size))
        start += size
    return out


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Rescale ``g`` onto the ball ``||g||^2 <= C``."""
    sq = float(g @ g)
    if sq > C:
        return g * math.sqrt(C / sq)
    return g


def local_gradient(loss: LossModel, part: slice, beta: np.ndarray, C: Optional[float] = None) -> np.ndarray:
    g = loss.gradient(beta, part)
    return g if C is None else clip(g, C)


def clip_rows(G: np.ndarray, C: float) -> np.ndarray:
    """Row-wise :func:`clip`, returning a new array."""
    G = np.array(G, dtype=float)
    sq = np.sum(G * G, axis=1)
    over = sq > C
    G[over] *= np.sqrt(C / sq[over])[:, None]
    return G


def partition_gradients(loss: LossModel, parts: Sequence[slice], beta: np.ndarray, C: Optional[float] = None) -> np.ndarray:
    """Stacked ``(n, l)`` matrix of (clipped) partition gradients."""
    G = loss.block_gradients(beta, list(parts))
    return G if C is None else clip_rows(G, C)


def default_clip_bound(loss: LossModel, parts: Sequence[slice], beta0: np.ndarray) -> float:
    """Four times the largest squared partition-gradient norm at the starting point."""
    G = partition_gradients(loss, parts, beta0)
    return 4.0 * float(np.max(np.sum(G * G, axis=1)))


# -- learning-rate schedules ------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """``const`` (fixed ``value``), ``inv-lambda-t`` (``1 / (lambda t)``),
    ``inv-sqrt-total`` (``1 / sqrt(T + 1)``) or ``inv-sqrt-t`` (``1 / sqrt(t + 1)``).

    ``t`` counts updates from 1 for ``inv-lambda-t`` and from 0 for ``inv-sqrt-t``.
    """

    kind: str
    value: float = 0.0

    KINDS = ("const", "inv-lambda-t", "inv-sqrt-total", "inv-sqrt-t")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; choose from {', '.join(self.KINDS)}")
        if self.kind == "const" and not self.value > 0:
            raise ValueError("a constant schedule needs a positive rate")

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse ``const:0.01``, ``inv-lambda-t``, ``inv-sqrt-total`` or ``inv-sqrt-t``."""
        if text.startswith("const"):
            _, _, val = text.partition(":")
            if not val:
                raise ValueError("constant schedule needs a rate, e.g. const:0.01")
            return cls("const", float(val))
        return cls(text)

    def __str__(self) -> str:
        return f"const:{self.value}" if self.kind == "const" else self.kind

    def rates(self, T: int, strong_convexity: Optional[float] = None) -> np.ndarray:
        t = np.arange(T, dtype=float)
        if self.kind == "const":
            return np.full(T, self.value)
        if self.kind == "inv-lambda-t":
            if not strong_convexity or strong_convexity <= 0:
                raise ValueError("the 1/(lambda t) schedule needs a known strong-convexity modulus")
            return 1.0 / (strong_convexity * (t + 1.0))
        if self.kind == "inv-sqrt-total":
            return np.full(T, 1.0 / math.sqrt(T + 1.0))
        return 1.0 / np.sqrt(t + 1.0)


# -- two-track decoding for adaptive optimisers ------------------------------


def two_track_decoder(code: GradientCode, profile: Optional[StragglerProfile] = None, Lambda: float = 1.0) -> np.ndarray:
    """Second-moment decoder trading a little bias for lower variance.

    ``v_i = n Lambda / (p_i r_i (1 + Lambda S))`` with ``r_i`` the row sums of
    ``A`` and ``S = sum_m delta_m^{-1}``; it minimises
    ``Lambda * (sum_j (1 - sum_i (1 - p_i) v_i a[i, j]))^2 + sum_i p_i (1 - p_i) v_i^2 r_i^2``.
    """
    profile = code.profile if profile is None else profile
    if Lambda < 0:
        raise ValueError("Lambda must be non-negative")
    rows = code.A.sum(axis=1)
    if np.any(rows == 0):
        raise ValueError("two-track decoding needs every row of A to have a nonzero sum")
    p = profile.probs
    S = float(profile.delta_inv.sum())
    return code.n * Lambda / (p * rows * (1.0 + Lambda * S))


def two_track_objective(v: np.ndarray, code: GradientCode, Lambda: float) -> float:
    p = code.profile.probs
    rows = code.A.sum(axis=1)
    bias = float(np.sum(1.0 - ((1.0 - p) * v) @ code.A))
    return Lambda * bias**2 + float(np.sum(p * (1.0 - p) * v**2 * rows**2))


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    Lambda: float = 1.0


@dataclass(frozen=True)
class AdamState:
    beta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, beta0: np.ndarray) -> "AdamState":
        z = np.zeros_like(beta0, dtype=float)
        return cls(np.array(beta0, dtype=float), z, z.copy(), 0)


def adam_two_track_step(state: AdamState, g_first: np.ndarray, g_second: np.ndarray, hyper: AdamHyper) -> AdamState:
    """Adam update whose first moment tracks ``g_first`` and second moment ``g_second ** 2``."""
    g_first = np.asarray(g_first, dtype=float)
    g_second = np.asarray(g_second, dtype=float)
    if g_first.shape != g_second.shape:
        raise ValueError("both estimates must have the same shape")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * g_first
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * g_second**2
    m_hat = m / (1 - hyper.beta1**t)
    v_hat = v / (1 - hyper.beta2**t)
    beta = state.beta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return AdamState(beta, m, v, t)


def minibatch_residual_bound(targets: RowTargets, C: float, sigma2: float) -> float:
    """``n^2 C / S + n sigma^2 (1 + n / S)``."""
    if not C > 0:
        raise ValueError("C must be positive")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    n, S = targets.n, targets.S
    return n * n * C / S + n * sigma2 * (1.0 + n / S)


# -- training loop ------------------------------------------------------------


@dataclass
class TrainConfig:
    """One training experiment. ``code=None`` trains with the exact full gradient."""

    loss: LossModel
    n: int
    profile: StragglerProfile
    code: Optional[GradientCode]
    schedule: Schedule
    T: int
    C: float
    runs: int = 10
    seed: int = 0
    optimizer: str = "gd"
    adam: AdamHyper = field(default_factory=AdamHyper)
    beta0: Optional[np.ndarray] = None
    minibatch: Optional[int] = None
    method: str = ""
    n_jobs: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.optimizer not in ("gd", "adam", "adam-two-track"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.code is not None and (self.code.k != self.profile.k or self.code.n != self.n):
            raise ValueError("code dimensions do not match the profile and n")
        if self.optimizer == "adam-two-track" and (self.code is None or self.code.adaptive):
            raise ValueError("two-track Adam needs a static code")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch must be positive")
        if not self.method:
            self.method = "gd" if self.code is None else self.code.name


@dataclass
class TrainTrace:
    run: int
    loss: np.ndarray
    dist_sq_opt: np.ndarray
    resid_sq: np.ndarray
    gamma: np.ndarray
    stragglers: np.ndarray
    grad_sq: np.ndarray
    beta: np.ndarray
    all_straggle_events: int = 0
    sigma2_est: float = 0.0

    @property
    def T(self) -> int:
        return len(self.loss)

    @property
    def n_stragglers(self) -> np.ndarray:
        return self.stragglers.sum(axis=1)

    def rows(self):
        for t in range(self.T):
            yield (
                self.run,
                t + 1,
                float(self.loss[t]),
                float(self.dist_sq_opt[t]),
                float(self.resid_sq[t]),
                float(self.gamma[t]),
                int(self.stragglers[t].sum()),
            )


def traces_to_csv(traces: Sequence[TrainTrace]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for trace in traces:
        for row in trace.rows():
            writer.writerow([row[0], row[1], *(repr(x) for x in row[2:6]), row[6]])
    return buf.getvalue()


def _minibatch_gradients(loss, parts, beta, C, size, rng):
    G = np.empty((len(parts), loss.dim))
    for j, part in enumerate(parts):
        idx = np.arange(part.start, part.stop)
        take = min(size, idx.size)
        pick = rng.choice(idx, size=take, replace=False)
        # rescaling keeps the partition gradient unbiased, regulariser included
        g = (idx.size / take) * loss.gradient(beta, pick)
        G[j] = g if C is None else clip(g, C)
    return G


def _run_once(config: TrainConfig, parts: list[slice], run: int) -> TrainTrace:
    loss, code, T = config.loss, config.code, config.T
    rng = make_rng(config.seed, "train", run)
    batch_rng = make_rng(config.seed, "minibatch", run)
    gammas = config.schedule.rates(T, loss.strong_convexity)
    beta = np.zeros(loss.dim) if config.beta0 is None else np.array(config.beta0, dtype=float)
    k = config.profile.k
    out_loss = np.empty(T)
    out_dist = np.empty(T)
    out_resid = np.empty(T)
    out_gsq = np.empty(T)
    stragglers = np.zeros((T, k), dtype=bool)
    all_straggle = 0
    sampling_err = np.zeros(config.n)
    adam_state = AdamState.init(beta) if config.optimizer != "gd" else None
    v_dec = two_track_decoder(code, Lambda=config.adam.Lambda) if config.optimizer == "adam-two-track" else None

    for t in range(T):
        raw = loss.block_gradients(beta, parts)
        full = raw.sum(axis=0)
        out_gsq[t] = float(full @ full)
        G = clip_rows(raw, config.C)
        g_true = G.sum(axis=0)
        if config.minibatch is not None:
            G_used = _minibatch_gradients(loss, parts, beta, config.C, config.minibatch, batch_rng)
            sampling_err += np.sum((G_used - G) ** 2, axis=1)
        else:
            G_used = G
        if code is None:
            g_hat = G_used.sum(axis=0)
            ind = np.ones(k, dtype=np.int8)
            f = None
        else:
            ind = sample_indicators(config.profile, rng)
            f = worker_messages(code.A, G_used)
            g_hat = decoding_weights(code, ind) @ f
            if not ind.any():
                all_straggle += 1
        stragglers[t] = ind == 0
        diff = g_true - g_hat
        out_resid[t] = float(diff @ diff)
        if config.optimizer == "gd":
            beta = beta - gammas[t] * g_hat
        else:
            g_second = g_hat if v_dec is None else (ind * v_dec) @ f
            adam_state = adam_two_track_step(adam_state, g_hat, g_second, AdamHyper(
                lr=gammas[t], beta1=config.adam.beta1, beta2=config.adam.beta2,
                eps=config.adam.eps, Lambda=config.adam.Lambda))
            beta = adam_state.beta
        out_loss[t] = loss.loss(beta)
        d = beta - loss.beta_star
        out_dist[t] = float(d @ d)
    sigma2 = float(np.max(sampling_err) / T) if config.minibatch is not None else 0.0
    return TrainTrace(
        run=run,
        loss=out_loss,
        dist_sq_opt=out_dist,
        resid_sq=out_resid,
        gamma=gammas,
        stragglers=stragglers,
        grad_sq=out_gsq,
        beta=beta,
        all_straggle_events=all_straggle,
        sigma2_est=sigma2,
    )


def train(config: TrainConfig) -> list[TrainTrace]:
    """Run ``config.runs`` independent repetitions; traces come back ordered by run index."""
    if config.code is not None and config.optimizer == "gd" and not config.code.adaptive and not is_unbiased(config.code):
        warnings.warn(f"{config.method}: training with a biased gradient code", stacklevel=2)
    parts = partition_dataset(config.loss, config.n)
    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            return list(pool.map(lambda r: _run_once(config, parts, r), range(config.runs)))
    return [_run_once(config, parts, r) for r in range(config.runs)]
