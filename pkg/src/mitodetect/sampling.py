"""Batch composition for both tracks.

Track 1 uses :func:`plan_fraction_batches`, which guarantees a minimum
fraction of mitosis-bearing patches in every batch. Track 2 draws ids with
probability proportional to :func:`inverse_frequency_weights`.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np


@dataclass
class BatchPlan:
    batches: list[list[str]]
    batch_size: int
    min_positive_fraction: float

    @property
    def min_positives(self) -> int:
        return math.ceil(self.min_positive_fraction * self.batch_size - 1e-9)

    def check(self, positives: set[str]) -> None:
        need = self.min_positives
        for i, b in enumerate(self.batches):
            if len(b) != self.batch_size:
                raise AssertionError(f"batch {i} has {len(b)} ids, expected {self.batch_size}")
            got = sum(pid in positives for pid in b)
            if got < need:
                raise AssertionError(f"batch {i} has {got} positives, needs >= {need}")

    def dumps(self) -> str:
        return json.dumps(
            {"batch_size": self.batch_size, "min_positive_fraction": self.min_positive_fraction,
             "batches": self.batches}
        )


class _Stream:
    """Each id once in shuffled order, then uniform draws with replacement."""

    def __init__(self, ids: Sequence[str], rng: np.random.Generator):
        self.ids = list(ids)
        self.rng = rng
        self.first_pass = [self.ids[i] for i in rng.permutation(len(self.ids))]

    def take(self, n: int) -> list[str]:
        out = self.first_pass[:n]
        del self.first_pass[:n]
        if len(out) < n:
            extra = self.rng.integers(0, len(self.ids), n - len(out))
            out.extend(self.ids[i] for i in extra)
        return out


def plan_fraction_batches(
    ids_with_flags: Sequence[tuple[str, bool]],
    batch_size: int = 8,
    min_positive_fraction: float = 0.4,
    seed: int = 0,
) -> BatchPlan:
    """One epoch of fixed-size batches, each with at least
    ``ceil(min_positive_fraction * batch_size)`` positives.

    The epoch has ``ceil(N / batch_size)`` batches. Per-batch positive counts
    start from a plain shuffle of all ids and are raised to the quota where
    needed, so a fraction of 0 reduces to ordinary shuffled batching.
    """
    if not 0.0 <= min_positive_fraction <= 1.0:
        raise ValueError(f"min_positive_fraction must be in [0, 1], got {min_positive_fraction}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pos = [pid for pid, flag in ids_with_flags if flag]
    neg = [pid for pid, flag in ids_with_flags if not flag]
    if not pos:
        raise ValueError("plan_fraction_batches needs at least one positive record")

    rng = np.random.default_rng(seed)
    n = len(ids_with_flags)
    n_batches = math.ceil(n / batch_size)
    quota = math.ceil(min_positive_fraction * batch_size - 1e-9)

    natural = rng.permutation(np.array([flag for _, flag in ids_with_flags], dtype=bool))
    pos_stream, neg_stream = _Stream(pos, rng), _Stream(neg, rng) if neg else None

    batches = []
    for b in range(n_batches):
        n_pos = max(quota, int(natural[b * batch_size:(b + 1) * batch_size].sum()))
        if neg_stream is None:
            n_pos = batch_size
        batch = pos_stream.take(n_pos)
        if n_pos < batch_size:
            batch += neg_stream.take(batch_size - n_pos)
        batches.append([batch[i] for i in rng.permutation(batch_size)])
    return BatchPlan(batches, batch_size, min_positive_fraction)


@dataclass
class SampleWeights:
    weights: dict[str, float]

    def as_arrays(self) -> tuple[list[str], np.ndarray]:
        ids = sorted(self.weights)
        return ids, np.array([self.weights[i] for i in ids], dtype=np.float64)


def inverse_frequency_weights(
    labels: Mapping[str, Hashable], classes: Sequence[Hashable] | None = None
) -> SampleWeights:
    """Weight every id by ``1 / count(its class)``.

    If ``classes`` is given, each listed class must own at least one id.
    """
    if not labels:
        raise ValueError("no labels given")
    counts = Counter(labels.values())
    empty = [c for c in (classes or ()) if counts[c] == 0]
    if empty:
        raise ValueError(f"classes without records: {empty}")
    return SampleWeights({pid: 1.0 / counts[c] for pid, c in labels.items()})


def weighted_draws(weights: SampleWeights, num_samples: int, seed: int = 0) -> list[str]:
    """Draw ids with replacement, proportionally to their weights."""
    ids, w = weights.as_arrays()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=num_samples, replace=True, p=w / w.sum())
    return [ids[i] for i in picks]
