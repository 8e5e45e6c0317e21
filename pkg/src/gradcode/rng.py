"""Seed handling.

Every random stream in the package comes from a counter-based Philox
generator keyed by a ``SeedSequence``. Streams for sub-tasks are derived
from a root seed plus integer or string labels, so that Monte Carlo trials
and training runs never share generator state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise ValueError(f"labels must be non-negative, got {label}")
    return int(label)


def make_rng(seed: int, *labels: int | str) -> np.random.Generator:
    """Generator for ``seed`` split by ``labels`` (e.g. ``make_rng(7, "bgc", 3)``)."""
    entropy = [int(seed)] + [_label_key(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *labels: int | str) -> int:
    """Stable 32-bit child seed, used where a plain integer must be stored."""
    entropy = [int(seed)] + [_label_key(lab) for lab in labels]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
