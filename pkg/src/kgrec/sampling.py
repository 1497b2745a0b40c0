"""Popularity-inverse negative sampling.

Negative items are drawn with probability proportional to the reciprocal of
their training interaction count, so rare items appear as negatives more
often than popular ones. Items with zero interactions are treated as count
1, keeping every catalog item reachable. Draws use a Walker alias table
(O(1) per draw); negatives that collide with the user's training positives
are rejected and redrawn.
"""

from __future__ import annotations

import numpy as np

from .data import InteractionStore

MAX_REJECTIONS = 100


class AliasTable:
    """Walker alias method for O(1) categorical sampling."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) == 0:
            raise ValueError("probs must be a non-empty 1-d array")
        if (probs < 0).any():
            raise ValueError("negative probability")
        total = probs.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError("probabilities must sum to a positive finite value")
        n = len(probs)
        scaled = probs * (n / total)
        self.prob = np.ones(n, dtype=np.float64)
        self.alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] = scaled[l] - (1.0 - scaled[s])
            (small if scaled[l] < 1.0 else large).append(l)
        for i in small + large:
            self.prob[i] = 1.0
            self.alias[i] = i

    def __len__(self) -> int:
        return len(self.prob)

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray | int:
        """Sample indices from the table; scalar when size is None."""
        n = len(self.prob)
        if size is None:
            k = int(rng.integers(n))
            return k if rng.random() < self.prob[k] else int(self.alias[k])
        ks = rng.integers(n, size=size)
        accept = rng.random(size=size) < self.prob[ks]
        return np.where(accept, ks, self.alias[ks]).astype(np.int64)


class ReciprocalSampler:
    """Negative sampler with weights 1 / max(train_count, 1)."""

    def __init__(self, num_items: int, train_counts: np.ndarray, train_sets: tuple):
        if num_items <= 0:
            raise ValueError("num_items must be positive")
        counts = np.asarray(train_counts, dtype=np.int64)
        if counts.shape != (num_items,):
            raise ValueError("train_counts must have one entry per item")
        self.num_items = num_items
        self.counts = counts
        self.weights = 1.0 / np.maximum(counts, 1).astype(np.float64)
        self.probs = self.weights / self.weights.sum()
        self.table = AliasTable(self.probs)
        self._train_sets = train_sets

    def draw(self, rng: np.random.Generator, size: int | None = None):
        """Raw popularity-inverse draw, no positive filtering."""
        return self.table.draw(rng, size=size)

    def sample_negative(self, rng: np.random.Generator, user: int) -> int:
        """One negative for `user`: redraw on collision with the user's
        train positives, falling back to a uniform pick over non-positive
        items if rejection keeps failing."""
        positives = self._train_sets[user]
        for _ in range(MAX_REJECTIONS):
            cand = int(self.table.draw(rng))
            if cand not in positives:
                return cand
        candidates = np.setdiff1d(
            np.arange(self.num_items, dtype=np.int64),
            np.fromiter(positives, dtype=np.int64, count=len(positives)),
            assume_unique=True,
        )
        if len(candidates) == 0:
            raise ValueError(f"user {user} has every item as a positive; no negative exists")
        return int(candidates[rng.integers(len(candidates))])

    def sample_negatives(self, rng: np.random.Generator, users: np.ndarray) -> np.ndarray:
        return np.array([self.sample_negative(rng, int(u)) for u in users], dtype=np.int64)


def build_sampler(store: InteractionStore) -> ReciprocalSampler:
    counts = np.zeros(store.num_items, dtype=np.int64)
    for u in range(store.num_users):
        counts[store.train[u]] += 1
    train_sets = tuple(frozenset(int(i) for i in store.train[u]) for u in range(store.num_users))
    return ReciprocalSampler(store.num_items, counts, train_sets)
