"""Training loops for the graph model (with or without content alignment)
and the finite-difference gradient checker.

The composite objective per batch is

    ranking + w_l2 * l2 + w_dcorr * decorrelation (+ w_cs * alignment)

where l2 covers the aggregated user/positive/negative rows of the batch,
decorrelation acts on the preference vectors, and alignment ties scores to
fixed content embeddings. All gradients are analytic; the FD harness here
is the referee.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

import logging

from .data import DatasetBundle, InteractionStore, KnowledgeGraph, kg_from_triplets
from .losses import LossWeights, bpr_loss, cross_system_loss, soft_dcorr_loss
from .model import KmpnParams, backward, forward, init_params
from .optim import AdamState, TrainConfig, adam_step, init_adam, lr_at
from .sampling import build_sampler

log = logging.getLogger(__name__)

FD_STEP = 1e-4
_REL_FLOOR = 1e-8


@dataclass(frozen=True)
class LossParts:
    """Unweighted component values of one evaluation."""

    bpr: float
    l2: float
    dcorr: float
    cs: float

    def total(self, w: LossWeights) -> float:
        return self.bpr + w.l2 * self.l2 + w.dcorr * self.dcorr + w.cross_system * self.cs


def kmpn_loss_and_grads(
    params: KmpnParams,
    graph: KnowledgeGraph,
    store: InteractionStore,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
    weights: LossWeights,
    content=None,
    frozen_basis: np.ndarray | None = None,
    compute_grads: bool = True,
):
    """Composite objective on one batch.

    `content` is an (item_set, user_set) EmbeddingMatrixFile pair enabling
    the alignment term. `frozen_basis` pins the decorrelation PCA basis
    (used by the FD harness); when None the basis is recomputed here.

    Returns (total, grads-or-None, LossParts, basis-or-None).
    """
    trace, pos_s, neg_s = forward(params, graph, store, users, pos_items, neg_items)
    bpr_val, d_pos, d_neg = bpr_loss(pos_s, neg_s)

    user_rows = trace.user_rows()
    entity_agg = trace.entity_agg
    pos_rows = entity_agg[trace.pos_items]
    neg_rows = entity_agg[trace.neg_items]
    l2_val = 0.5 * float((user_rows**2).sum() + (pos_rows**2).sum() + (neg_rows**2).sum())

    basis = frozen_basis
    d_pref_raw = None
    dcorr_val = 0.0
    if weights.dcorr != 0.0:
        dcorr_val, d_pref_raw, basis = soft_dcorr_loss(
            trace.pref, weights.pca_keep, basis=frozen_basis
        )

    cs_val = 0.0
    d_cu = d_cp = d_cn = None
    if content is not None and weights.cross_system != 0.0:
        item_set, user_set = content
        cu = user_set.rows(trace.users)
        cp = item_set.rows(trace.pos_items)
        cn = item_set.rows(trace.neg_items)
        cs_val, d_cu, d_cp, d_cn = cross_system_loss(
            user_rows, pos_rows, neg_rows, cu, cp, cn
        )

    parts = LossParts(bpr=bpr_val, l2=l2_val, dcorr=dcorr_val, cs=cs_val)
    total = parts.total(weights)
    if not compute_grads:
        return total, None, parts, basis

    d_user_agg = weights.l2 * user_rows
    d_pos_agg = weights.l2 * pos_rows
    d_neg_agg = weights.l2 * neg_rows
    if d_cu is not None:
        d_user_agg = d_user_agg + weights.cross_system * d_cu
        d_pos_agg = d_pos_agg + weights.cross_system * d_cp
        d_neg_agg = d_neg_agg + weights.cross_system * d_cn
    d_pref = weights.dcorr * d_pref_raw if d_pref_raw is not None else None

    grads = backward(
        params,
        graph,
        trace,
        d_pos,
        d_neg,
        d_user_agg=d_user_agg,
        d_pos_agg=d_pos_agg,
        d_neg_agg=d_neg_agg,
        d_pref=d_pref,
    )
    return total, grads, parts, basis


def _validate_content_pair(content, store: InteractionStore, h: int) -> None:
    item_set, user_set = content
    if item_set.kind != "item" or user_set.kind != "user":
        raise ValueError("content pair must be (item file, user file)")
    for emb in (item_set, user_set):
        if emb.dim != h:
            raise ValueError(f"content embedding dim {emb.dim} != model h {h}")
    item_ids = set(int(i) for i in item_set.ids)
    for i in range(store.num_items):
        if i not in item_ids:
            raise ValueError(f"content item file missing item {i}")
    user_ids = set(int(u) for u in user_set.ids)
    for u in range(store.num_users):
        if u not in user_ids:
            raise ValueError(f"content user file missing user {u}")


def _format_log_line(epoch, parts_sum, lr) -> str:
    total, bpr, l2, dc, cs = parts_sum
    return f"{epoch}\t{total!r}\t{bpr!r}\t{l2!r}\t{dc!r}\t{cs!r}\t{lr!r}"


def _train_cf(
    bundle: DatasetBundle,
    params: KmpnParams,
    config: TrainConfig,
    content=None,
):
    """Shared loop. `content` is only consulted when the alignment weight
    is nonzero, so a zero weight reproduces the plain run bit-for-bit."""
    config.validate()
    params = params.copy()
    store, graph = bundle.store, bundle.graph
    if content is not None:
        _validate_content_pair(content, store, params.h)
    active_content = content if (content is not None and config.weights.cross_system != 0.0) else None

    lines: list[str] = []
    if config.epochs == 0:
        return params, lines
    sampler = build_sampler(store)
    users_all, pos_all = store.train_pairs()
    if len(users_all) == 0:
        raise ValueError("no train interactions")
    rng = np.random.default_rng(config.seed)
    state = init_adam(params.tensors())

    for epoch in range(1, config.epochs + 1):
        lr = lr_at(config, epoch - 1, config.epochs)
        perm = rng.permutation(len(users_all))
        sums = np.zeros(5)  # total bpr l2 dcorr cs
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            u = users_all[idx]
            p = pos_all[idx]
            n = sampler.sample_negatives(rng, u)
            total, grads, parts, _ = kmpn_loss_and_grads(
                params, graph, store, u, p, n, config.weights, content=active_content
            )
            adam_step(params.tensors(), grads.tensors(), state, lr, config)
            sums += (total, parts.bpr, parts.l2, parts.dcorr, parts.cs)
        lines.append(_format_log_line(epoch, [float(x) for x in sums], lr))
        if config.eval_every > 0 and epoch % config.eval_every == 0:
            from .evaluation import evaluate

            if any(len(v) for v in store.valid):
                report = evaluate(params, bundle, "valid", ks=(20,))
                log.info("epoch %d valid recall@20 %.6f", epoch, report.recall[20])
    return params, lines


def train_kmpn(bundle: DatasetBundle, params: KmpnParams, config: TrainConfig):
    """Graph-only training. Returns (trained params, loss-log lines)."""
    return _train_cf(bundle, params, config, content=None)


def train_ckmpn(bundle: DatasetBundle, params: KmpnParams, content, config: TrainConfig):
    """Training with the content-alignment term; `content` is an
    (item EmbeddingMatrixFile, user EmbeddingMatrixFile) pair of constants."""
    if content is None:
        raise ValueError("content embeddings required")
    return _train_cf(bundle, params, config, content=content)


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckEntry:
    tensor: str
    max_rel_err: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    kind: str
    tolerance: float
    step: float
    entries: tuple
    runtime_s: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def render(self) -> str:
        lines = [f"gradcheck kind={self.kind} step={self.step!r} tolerance={self.tolerance!r}"]
        for e in self.entries:
            lines.append(f"{e.tensor}\t{e.max_rel_err!r}\t{'PASS' if e.passed else 'FAIL'}")
        lines.append(
            f"max_rel_err={self.max_rel_err!r} result={'PASS' if self.passed else 'FAIL'} "
            f"runtime_s={self.runtime_s:.3f}"
        )
        return "\n".join(lines)


def _fd_sweep(tensors: dict, analytic: dict, value_fn, tolerance: float, step: float):
    """Central differences over every scalar of every tensor, in place."""
    entries = []
    for name, t in tensors.items():
        an_flat = analytic[name].ravel()
        flat = t.ravel()
        if not np.shares_memory(flat, t):
            raise ValueError(f"tensor {name} is not contiguous; FD sweep needs a view")
        max_rel = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = value_fn()
            flat[i] = orig - step
            f_minus = value_fn()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = an_flat[i]
            denom = max(abs(fd), abs(a))
            rel = 0.0 if denom < _REL_FLOOR else abs(fd - a) / denom
            if rel > max_rel:
                max_rel = rel
        max_rel = float(max_rel)
        entries.append(GradCheckEntry(tensor=name, max_rel_err=max_rel, passed=max_rel < tolerance))
    return entries


def _toy_graph(rng: np.random.Generator, num_entities: int, num_relations_raw: int):
    """Small connected-ish random graph: a ring plus random chords."""
    triplets = []
    for i in range(num_entities):
        triplets.append((i, int(rng.integers(num_relations_raw)), (i + 1) % num_entities))
    for _ in range(num_entities // 2):
        h = int(rng.integers(num_entities))
        t = int(rng.integers(num_entities))
        if h != t:
            triplets.append((h, int(rng.integers(num_relations_raw)), t))
    return kg_from_triplets(triplets, num_relations_raw, num_entities=num_entities)


def _toy_store(rng: np.random.Generator, num_users: int, num_items: int) -> InteractionStore:
    from .data import build_store

    train = {}
    for u in range(num_users):
        n = int(rng.integers(2, 4))
        train[u] = rng.choice(num_items, size=n, replace=False)
    return build_store(train, num_users=num_users, num_items=num_items)


def _fd_conditioning(params: KmpnParams, keep_fraction: float) -> float:
    """How safely a step-1e-4 central difference can probe the
    decorrelation term on this instance.

    Two hazards: the pairwise |z_a - z_b| kinks (a perturbation must not
    flip any sign) and the square roots of the distance covariance and
    variances (tiny values mean huge curvature). Returns the smaller of
    the minimum intra-row coordinate gap and the minimum squared
    distance-cov/var over row pairs; bigger is safer."""
    from .losses import _dist_and_centered, pca_project
    from .model import preference_embeddings

    _, pref = preference_embeddings(params)
    _, Z = pca_project(pref, keep_fraction)
    n, k = Z.shape
    margin = np.inf
    centered = []
    for row in Z:
        diff = np.abs(row[:, None] - row[None, :])
        iu = np.triu_indices(k, 1)
        if len(iu[0]):
            margin = min(margin, float(diff[iu].min()))
        centered.append(_dist_and_centered(row)[1])
    k2 = float(k * k)
    for i in range(n):
        for j in range(i + 1, n):
            A, B = centered[i], centered[j]
            margin = min(
                margin,
                float((A * B).sum() / k2),
                float((A * A).sum() / k2),
                float((B * B).sum() / k2),
            )
    return margin


def _kmpn_instance(seed: int, with_content: bool):
    rng = np.random.default_rng(seed)
    num_entities, num_items, num_users = 12, 6, 4
    graph = _toy_graph(rng, num_entities, num_relations_raw=2)
    store = _toy_store(rng, num_users, num_items)
    params = None
    for attempt in range(256):
        inst_rng = np.random.default_rng(seed + 1 + 1000 * attempt)
        candidate = init_params(
            num_entities,
            graph.num_relations,
            num_users,
            h=8,
            n_layers=2,
            n_pref=4,
            n_meta=4,
            seed=seed + 1 + 1000 * attempt,
        )
        # spread the mixing logits so preference rows are well separated;
        # near-identical rows make the decorrelation term too ill-
        # conditioned for a fixed-step finite difference
        candidate.pref_logits[:] = inst_rng.uniform(-2.0, 2.0, size=candidate.pref_logits.shape)
        if _fd_conditioning(candidate, 0.5) > 1e-3:
            params = candidate
            break
    if params is None:
        raise RuntimeError("could not build an FD-safe gradcheck instance")
    users = np.array([0, 1, 2, 3, 0, 2], dtype=np.int64)
    pos = np.array([int(store.train[int(u)][rng.integers(len(store.train[int(u)]))]) for u in users])
    neg = np.empty(len(users), dtype=np.int64)
    for k, u in enumerate(users):
        while True:
            cand = int(rng.integers(num_items))
            if cand not in set(int(i) for i in store.train[int(u)]):
                neg[k] = cand
                break
    weights = LossWeights(l2=0.05, dcorr=0.5, cross_system=0.3 if with_content else 0.0, pca_keep=0.5)
    content = None
    if with_content:
        from .content import EmbeddingMatrixFile

        item_vecs = rng.normal(0.0, 0.5, size=(num_items, params.h))
        user_vecs = rng.normal(0.0, 0.5, size=(num_users, params.h))
        content = (
            EmbeddingMatrixFile(kind="item", ids=np.arange(num_items), vectors=item_vecs),
            EmbeddingMatrixFile(kind="user", ids=np.arange(num_users), vectors=user_vecs),
        )
    return params, graph, store, (users, pos, neg), weights, content


def _content_instance(seed: int):
    from .content import bucketize, init_content

    rng = np.random.default_rng(seed)
    params = init_content(h=8, num_buckets=16, history_size=3, num_negatives=2, seed=seed + 1)
    vocab = ["red", "blue", "green", "disk", "lamp", "rope", "tent", "mug9"]
    texts = [" ".join(rng.choice(vocab, size=int(rng.integers(3, 6)))) for _ in range(6)]
    buckets = [bucketize(t, params.num_buckets) for t in texts]
    hist = [buckets[0], buckets[1], buckets[2]]
    pos = buckets[3]
    negs = [buckets[4], buckets[5]]
    return params, hist, pos, negs


def grad_check(kind: str, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """FD-vs-analytic comparison on a tiny instance of the given kind
    ('kmpn', 'ckmpn', or 'content'). The decorrelation PCA basis is
    computed once from the unperturbed parameters and pinned for every
    evaluation, matching the training-time convention that the basis is
    not differentiated through."""
    t0 = time.perf_counter()
    if kind in ("kmpn", "ckmpn"):
        params, graph, store, (users, pos, neg), weights, content = _kmpn_instance(
            seed, with_content=(kind == "ckmpn")
        )
        _, grads, _, basis = kmpn_loss_and_grads(
            params, graph, store, users, pos, neg, weights, content=content
        )

        def value_fn():
            total, _, _, _ = kmpn_loss_and_grads(
                params,
                graph,
                store,
                users,
                pos,
                neg,
                weights,
                content=content,
                frozen_basis=basis,
                compute_grads=False,
            )
            return total

        entries = _fd_sweep(params.tensors(), grads.tensors(), value_fn, tolerance, FD_STEP)
    elif kind == "content":
        from .content import click_instance

        params, hist, pos, negs = _content_instance(seed)
        _, grads = click_instance(params, hist, pos, negs)

        def value_fn():
            loss, _ = click_instance(params, hist, pos, negs, compute_grads=False)
            return loss

        entries = _fd_sweep(params.tensors(), grads, value_fn, tolerance, FD_STEP)
    else:
        raise ValueError(f"unknown gradcheck kind {kind!r}")
    return GradCheckReport(
        kind=kind,
        tolerance=tolerance,
        step=FD_STEP,
        entries=tuple(entries),
        runtime_s=time.perf_counter() - t0,
    )
