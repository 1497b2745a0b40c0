"""Full-catalog top-K evaluation: Recall, ndcg, HitRatio.

Every item is scored for every evaluated user (no sampled candidates);
seen items are masked out of the ranking; ties break toward the smaller
item id. Users whose test list for the chosen split is empty are skipped
and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetBundle, DatasetError
from .model import (
    KmpnParams,
    cold_start_user,
    entity_forward,
    preference_embeddings,
    prefix_aggregates,
)
from .numeric import softmax_rows

DEFAULT_KS = (20, 60, 100)


def rank_items(user_emb: np.ndarray, item_embs: np.ndarray, mask, k: int):
    """Top-k item ids by dot-product score, masked items excluded.

    Returns (ids, exhausted) where exhausted flags k exceeding the unmasked
    catalog (all unmasked ids are returned in that case).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = item_embs @ np.asarray(user_emb, dtype=np.float64)
    n = len(scores)
    mask_arr = np.zeros(n, dtype=bool)
    mask_ids = np.asarray(list(mask), dtype=np.int64) if mask is not None else None
    if mask_ids is not None and len(mask_ids):
        mask_arr[mask_ids] = True
    avail = int(n - mask_arr.sum())
    scores = np.where(mask_arr, -np.inf, scores)
    order = np.lexsort((np.arange(n), -scores))  # score desc, id asc
    take = min(k, avail)
    return order[:take], k > avail


def recall_at_k(topk, test) -> float:
    test = set(int(t) for t in test)
    if not test:
        raise ValueError("empty test set")
    hits = sum(1 for i in topk if int(i) in test)
    return hits / len(test)


def ndcg_at_k(topk, test, k: int) -> float:
    test = set(int(t) for t in test)
    if not test:
        raise ValueError("empty test set")
    dcg = 0.0
    for rank, i in enumerate(topk[:k], start=1):
        if int(i) in test:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(test)) + 1))
    return float(dcg / ideal)


def hit_ratio_at_k(topk, test) -> float:
    test = set(int(t) for t in test)
    if not test:
        raise ValueError("empty test set")
    return 1.0 if any(int(i) in test for i in topk) else 0.0


@dataclass(frozen=True)
class MetricsReport:
    split: str
    ks: tuple
    recall: dict
    ndcg: dict
    hit: dict
    users_evaluated: int
    users_skipped: int

    def render(self) -> str:
        """Tab-separated `metric K value` rows plus a key=value block."""
        lines = []
        for k in self.ks:
            lines.append(f"recall\t{k}\t{self.recall[k]!r}")
        for k in self.ks:
            lines.append(f"ndcg\t{k}\t{self.ndcg[k]!r}")
        for k in self.ks:
            lines.append(f"hit_ratio\t{k}\t{self.hit[k]!r}")
        lines.append(f"split={self.split}")
        lines.append(f"users_evaluated={self.users_evaluated}")
        lines.append(f"users_skipped={self.users_skipped}")
        return "\n".join(lines) + "\n"


def _aggregate(per_user: dict, ks, split, skipped) -> MetricsReport:
    n = len(per_user["recall"][ks[0]])
    if n == 0:
        raise DatasetError(f"split {split!r} has no evaluable users")
    return MetricsReport(
        split=split,
        ks=tuple(ks),
        recall={k: float(np.mean(per_user["recall"][k])) for k in ks},
        ndcg={k: float(np.mean(per_user["ndcg"][k])) for k in ks},
        hit={k: float(np.mean(per_user["hit"][k])) for k in ks},
        users_evaluated=n,
        users_skipped=skipped,
    )


def _metric_frame(ks):
    return {"recall": {k: [] for k in ks}, "ndcg": {k: [] for k in ks}, "hit": {k: [] for k in ks}}


def _accumulate(frame, user_vec, item_embs, mask, test, ks):
    kmax = max(ks)
    topk, _ = rank_items(user_vec, item_embs, mask, kmax)
    for k in ks:
        head = topk[:k]
        frame["recall"][k].append(recall_at_k(head, test))
        frame["ndcg"][k].append(ndcg_at_k(head, test, k))
        frame["hit"][k].append(hit_ratio_at_k(head, test))


def _check_split(store, split: str):
    if split in ("valid", "test"):
        lists = store.split(split)
        if not any(len(v) for v in lists):
            raise DatasetError(f"split absent: no {split} interactions in dataset")
        return lists
    if split == "cold_start":
        if not any(len(v) for v in store.cold_test) or not any(len(v) for v in store.cold_history):
            raise DatasetError("split absent: dataset has no cold-start files")
        return store.cold_test
    raise DatasetError(f"unknown split {split!r}")


def evaluate(params: KmpnParams, bundle: DatasetBundle, split: str, ks=DEFAULT_KS) -> MetricsReport:
    """Rank the full catalog for every user with test items in `split`.

    Standard splits build the trained user vector (train history masked);
    the cold-start split builds the uniform-attention vector from the held
    history (history masked).
    """
    ks = tuple(sorted(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    store = bundle.store
    test_lists = _check_split(store, split)
    if bundle.graph.num_entities != params.num_entities:
        raise DatasetError("checkpoint/graph entity count mismatch")
    if store.num_users != params.num_users:
        raise DatasetError("checkpoint/dataset user count mismatch")

    layers, _ = entity_forward(params, bundle.graph)
    entity_agg = prefix_aggregates(layers)[-1]
    item_embs = entity_agg[: store.num_items]
    _, pref = preference_embeddings(params)

    frame = _metric_frame(ks)
    skipped = 0
    if split == "cold_start":
        for u in range(store.num_users):
            history = store.cold_history[u]
            test = store.cold_test[u]
            if len(history) == 0:
                continue
            if len(test) == 0:
                skipped += 1
                continue
            user_vec = cold_start_user(history, layers, params)
            _accumulate(frame, user_vec, item_embs, history, test, ks)
    else:
        hist_sum_cache = {}
        for u in range(store.num_users):
            test = test_lists[u]
            train = store.train[u]
            if len(test) == 0:
                if len(train):
                    skipped += 1
                continue
            if len(train) == 0:
                skipped += 1
                continue
            msum = hist_sum_cache.get(u)
            if msum is None:
                msum = sum(m[train].mean(axis=0) for m in layers)
                hist_sum_cache[u] = msum
            alpha = softmax_rows((params.user_emb[u] @ pref.T)[None, :])[0]
            user_vec = msum * (alpha @ pref)
            _accumulate(frame, user_vec, item_embs, train, test, ks)
    return _aggregate(frame, ks, split, skipped)


def evaluate_embeddings(
    user_set, item_set, bundle: DatasetBundle, split: str, ks=DEFAULT_KS
) -> MetricsReport:
    """Same protocol but scoring directly with exchange-file embeddings
    (content-model evaluation or comparison hooks)."""
    ks = tuple(sorted(int(k) for k in ks))
    store = bundle.store
    test_lists = _check_split(store, split)
    ids = np.arange(store.num_items, dtype=np.int64)
    item_embs = item_set.rows(ids)
    frame = _metric_frame(ks)
    skipped = 0
    if split == "cold_start":
        raise DatasetError("cold_start evaluation needs model parameters, not embedding files")
    for u in range(store.num_users):
        test = test_lists[u]
        train = store.train[u]
        if len(test) == 0:
            if len(train):
                skipped += 1
            continue
        if len(train) == 0:
            skipped += 1
            continue
        user_vec = user_set.rows([u])[0]
        _accumulate(frame, user_vec, item_embs, train, test, ks)
    return _aggregate(frame, ks, split, skipped)
