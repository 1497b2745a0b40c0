"""Graph collaborative-filtering model.

Entities (items plus attribute nodes) carry trainable embeddings that are
refined by a gated relational graph convolution; users are represented by
attention-weighted mixtures of preference vectors applied to the mean of
their interacted items at every convolution depth. Scoring is a plain dot
product between the aggregated user and item vectors.

The forward pass caches everything the analytic backward pass needs; no
autodiff framework is involved. All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionStore, KnowledgeGraph
from .numeric import sigmoid, softmax_rows

CHECKPOINT_MAGIC = "KMPN1"


@dataclass
class KmpnParams:
    """All trainable tensors.

    entity_emb    [num_entities, h]   depth-0 entity vectors
    relation_emb  [2 * num_relations_raw, h]
    user_emb      [num_users, h]      per-user attention query vector
    meta_pref_emb [num_meta, h]       shared meta-preference bank
    pref_logits   [num_pref, num_meta] preference mixing logits
    """

    entity_emb: np.ndarray
    relation_emb: np.ndarray
    user_emb: np.ndarray
    meta_pref_emb: np.ndarray
    pref_logits: np.ndarray
    n_layers: int

    @property
    def h(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_emb.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_pref(self) -> int:
        return self.pref_logits.shape[0]

    @property
    def num_meta(self) -> int:
        return self.meta_pref_emb.shape[0]

    def tensors(self) -> dict:
        """Named tensors in a fixed order (checkpoint / optimizer order)."""
        return {
            "entity_emb": self.entity_emb,
            "relation_emb": self.relation_emb,
            "user_emb": self.user_emb,
            "meta_pref_emb": self.meta_pref_emb,
            "pref_logits": self.pref_logits,
        }

    def validate(self) -> None:
        if self.h < 1 or self.n_layers < 0:
            raise ValueError("need h >= 1 and n_layers >= 0")
        if self.num_pref < 1 or self.num_meta < 1:
            raise ValueError("need num_pref >= 1 and num_meta >= 1")
        if self.meta_pref_emb.shape != (self.num_meta, self.h):
            raise ValueError("meta_pref_emb shape mismatch")
        if self.pref_logits.shape[1] != self.num_meta:
            raise ValueError("pref_logits column count must equal num_meta")
        for name, t in self.tensors().items():
            if not np.isfinite(t).all():
                raise ValueError(f"non-finite values in {name}")

    def copy(self) -> "KmpnParams":
        return KmpnParams(
            entity_emb=self.entity_emb.copy(),
            relation_emb=self.relation_emb.copy(),
            user_emb=self.user_emb.copy(),
            meta_pref_emb=self.meta_pref_emb.copy(),
            pref_logits=self.pref_logits.copy(),
            n_layers=self.n_layers,
        )


@dataclass
class KmpnGrads:
    """Gradient set mirroring KmpnParams."""

    entity_emb: np.ndarray
    relation_emb: np.ndarray
    user_emb: np.ndarray
    meta_pref_emb: np.ndarray
    pref_logits: np.ndarray

    def tensors(self) -> dict:
        return {
            "entity_emb": self.entity_emb,
            "relation_emb": self.relation_emb,
            "user_emb": self.user_emb,
            "meta_pref_emb": self.meta_pref_emb,
            "pref_logits": self.pref_logits,
        }


def zero_grads(params: KmpnParams) -> KmpnGrads:
    return KmpnGrads(
        entity_emb=np.zeros_like(params.entity_emb),
        relation_emb=np.zeros_like(params.relation_emb),
        user_emb=np.zeros_like(params.user_emb),
        meta_pref_emb=np.zeros_like(params.meta_pref_emb),
        pref_logits=np.zeros_like(params.pref_logits),
    )


def init_params(
    num_entities: int,
    num_relations: int,
    num_users: int,
    h: int = 64,
    n_layers: int = 3,
    n_pref: int = 8,
    n_meta: int = 64,
    seed: int = 0,
) -> KmpnParams:
    """Uniform init in [-sqrt(6/h), +sqrt(6/h)]; mixing logits near zero."""
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / h)
    params = KmpnParams(
        entity_emb=rng.uniform(-bound, bound, size=(num_entities, h)),
        relation_emb=rng.uniform(-bound, bound, size=(num_relations, h)),
        user_emb=rng.uniform(-bound, bound, size=(num_users, h)),
        meta_pref_emb=rng.uniform(-bound, bound, size=(n_meta, h)),
        pref_logits=rng.uniform(-0.1, 0.1, size=(n_pref, n_meta)),
        n_layers=n_layers,
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def gate(e_head: np.ndarray, e_rel: np.ndarray) -> float:
    """Sigmoid of the head-relation dot product; scales each edge message."""
    return float(sigmoid(np.dot(np.asarray(e_head, float), np.asarray(e_rel, float))))


def conv_layer(graph: KnowledgeGraph, prev: np.ndarray, relation_emb: np.ndarray):
    """One gated convolution sweep over every entity.

    out_i = (1/deg_i) * sum over edges (i, r, j) of
            sigmoid(prev_i . rel_r) * (rel_r o prev_j)

    Isolated entities output zero. Returns (out, per-edge gate values).
    """
    head_prev = prev[graph.edge_head]  # [E, h]
    rel_e = relation_emb[graph.edge_rel]  # [E, h]
    tail_prev = prev[graph.edge_tail]  # [E, h]
    gates = sigmoid((head_prev * rel_e).sum(axis=1))  # [E]
    msg = gates[:, None] * rel_e * tail_prev
    out = np.zeros_like(prev)
    np.add.at(out, graph.edge_head, msg)
    out *= graph.inv_degree[:, None]
    return out, gates


def entity_forward(params: KmpnParams, graph: KnowledgeGraph):
    """All per-depth entity matrices plus per-edge gates per sweep.

    Returns (layers, gates): layers[0] is the raw embedding table,
    layers[l] the l-th convolution output; gates[l-1] belongs to sweep l.
    """
    if graph.num_entities != params.num_entities:
        raise ValueError("graph/params entity count mismatch")
    layers = [params.entity_emb]
    gates = []
    for _ in range(params.n_layers):
        out, g = conv_layer(graph, layers[-1], params.relation_emb)
        layers.append(out)
        gates.append(g)
    return layers, gates


def aggregate_layers(per_layer: list) -> np.ndarray:
    """Elementwise sum over a non-empty list of equally shaped matrices."""
    if not per_layer:
        raise ValueError("need at least one layer")
    out = np.array(per_layer[0], dtype=np.float64, copy=True)
    for m in per_layer[1:]:
        if m.shape != out.shape:
            raise ValueError("layer shape mismatch")
        out += m
    return out


def prefix_aggregates(layers: list) -> list:
    """Running sums: entry l is the elementwise sum of layers 0..l."""
    aggs = [np.array(layers[0], dtype=np.float64, copy=True)]
    for m in layers[1:]:
        aggs.append(aggs[-1] + m)
    return aggs


def preference_embeddings(params: KmpnParams):
    """(row-softmax mixing weights, preference vectors = weights @ bank)."""
    beta = softmax_rows(params.pref_logits)
    return beta, beta @ params.meta_pref_emb


def _history_arrays(store: InteractionStore, users: np.ndarray):
    """CSR-style concatenation of train histories for the given user list."""
    lists = []
    for u in users:
        items = store.train[int(u)]
        if len(items) == 0:
            raise ValueError(f"user {int(u)} has no train history")
        lists.append(items)
    counts = np.array([len(v) for v in lists], dtype=np.int64)
    concat = np.concatenate(lists)
    seg = np.zeros(len(users), dtype=np.int64)
    np.cumsum(counts[:-1], out=seg[1:])
    return concat, counts, seg


def _history_means(matrix: np.ndarray, concat, counts, seg) -> np.ndarray:
    sums = np.add.reduceat(matrix[concat], seg, axis=0)
    return sums / counts[:, None]


def user_forward(
    entity_layers: list,
    params: KmpnParams,
    store: InteractionStore,
    users: np.ndarray,
):
    """Per-user attention and per-depth user vectors for unique `users`.

    alpha_u = softmax over preferences of (pref_p . user_emb_u)
    u^(l)   = hist_mean_l o (alpha_u @ pref)     [factorized form of the
              per-preference sum: sum_p alpha_p * (hist_mean o pref_p)]

    Returns (alpha [U, P], per-layer list of [U, h], aggregated [U, h]).
    """
    users = np.asarray(users, dtype=np.int64)
    _, pref = preference_embeddings(params)
    concat, counts, seg = _history_arrays(store, users)
    means = [_history_means(m, concat, counts, seg) for m in entity_layers]
    att_logits = params.user_emb[users] @ pref.T  # [U, P]
    alpha = softmax_rows(att_logits)
    profile = alpha @ pref  # [U, h]
    per_layer = [m * profile for m in means]
    agg = sum(means) * profile
    return alpha, per_layer, agg


def cold_start_user(history, entity_layers: list, params: KmpnParams) -> np.ndarray:
    """Aggregated vector for a user with no trained query vector: uniform
    attention over preferences applied to the history means."""
    items = np.asarray(list(history), dtype=np.int64)
    if len(items) == 0:
        raise ValueError("cold-start history is empty")
    _, pref = preference_embeddings(params)
    profile = pref.mean(axis=0)  # uniform alpha = 1/P
    msum = sum(m[items].mean(axis=0) for m in entity_layers)
    return msum * profile


def score(user_agg: np.ndarray, item_agg: np.ndarray) -> float:
    return float(np.dot(np.asarray(user_agg, float), np.asarray(item_agg, float)))


@dataclass
class ForwardTrace:
    """Everything cached by forward() for the backward pass and for
    invariant checks: per-depth entity matrices with prefix aggregates and
    edge gates, the preference pieces, and the batched user pieces."""

    layers: list  # L+1 matrices [N_v, h]
    agg_layers: list  # prefix sums, same shapes
    gates: list  # L arrays [E]
    beta: np.ndarray  # [P, M]
    pref: np.ndarray  # [P, h]
    alpha: np.ndarray  # [U, P] for unique batch users
    user_layers: list  # L+1 matrices [U, h]
    user_agg: np.ndarray  # [U, h]
    users: np.ndarray  # batch user ids [B]
    pos_items: np.ndarray  # [B]
    neg_items: np.ndarray  # [B]
    uniq_users: np.ndarray  # [U]
    batch_inv: np.ndarray  # [B] -> index into uniq_users
    hist_concat: np.ndarray = field(repr=False, default=None)
    hist_counts: np.ndarray = field(repr=False, default=None)
    hist_seg: np.ndarray = field(repr=False, default=None)
    hist_means: list = field(repr=False, default=None)  # L+1 of [U, h]

    @property
    def entity_agg(self) -> np.ndarray:
        return self.agg_layers[-1]

    def user_rows(self) -> np.ndarray:
        """Aggregated user vectors expanded to batch order [B, h]."""
        return self.user_agg[self.batch_inv]


def forward(
    params: KmpnParams,
    graph: KnowledgeGraph,
    store: InteractionStore,
    users,
    pos_items,
    neg_items,
):
    """Score a batch of (user, positive, negative) triples.

    Returns (trace, pos_scores, neg_scores).
    """
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    if not (users.shape == pos_items.shape == neg_items.shape):
        raise ValueError("batch arrays must share one shape")
    if len(users) == 0:
        raise ValueError("empty batch")
    n_items = store.num_items
    for name, arr, hi in (
        ("user", users, params.num_users),
        ("positive item", pos_items, n_items),
        ("negative item", neg_items, n_items),
    ):
        if arr.min() < 0 or arr.max() >= hi:
            raise ValueError(f"{name} id out of range")

    layers, gates = entity_forward(params, graph)
    agg_layers = prefix_aggregates(layers)
    beta, pref = preference_embeddings(params)

    uniq, inv = np.unique(users, return_inverse=True)
    concat, counts, seg = _history_arrays(store, uniq)
    means = [_history_means(m, concat, counts, seg) for m in layers]
    att_logits = params.user_emb[uniq] @ pref.T
    alpha = softmax_rows(att_logits)
    profile = alpha @ pref
    user_layers = [m * profile for m in means]
    user_agg = sum(means) * profile

    entity_agg = agg_layers[-1]
    user_rows = user_agg[inv]
    pos_scores = (user_rows * entity_agg[pos_items]).sum(axis=1)
    neg_scores = (user_rows * entity_agg[neg_items]).sum(axis=1)

    trace = ForwardTrace(
        layers=layers,
        agg_layers=agg_layers,
        gates=gates,
        beta=beta,
        pref=pref,
        alpha=alpha,
        user_layers=user_layers,
        user_agg=user_agg,
        users=users,
        pos_items=pos_items,
        neg_items=neg_items,
        uniq_users=uniq,
        batch_inv=inv,
        hist_concat=concat,
        hist_counts=counts,
        hist_seg=seg,
        hist_means=means,
    )
    return trace, pos_scores, neg_scores


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _conv_backward(
    graph: KnowledgeGraph,
    prev: np.ndarray,
    relation_emb: np.ndarray,
    gates: np.ndarray,
    grad_out: np.ndarray,
    d_relation: np.ndarray,
):
    """Adjoint of conv_layer. Accumulates into d_relation and returns the
    gradient with respect to `prev`."""
    g_msg = grad_out[graph.edge_head] * graph.inv_degree[graph.edge_head][:, None]  # [E, h]
    rel_e = relation_emb[graph.edge_rel]
    tail_prev = prev[graph.edge_tail]
    core = rel_e * tail_prev

    d_gate = (g_msg * core).sum(axis=1)  # [E]
    d_core = g_msg * gates[:, None]
    d_dot = d_gate * gates * (1.0 - gates)  # sigmoid'

    d_prev = np.zeros_like(prev)
    np.add.at(d_prev, graph.edge_tail, d_core * rel_e)
    np.add.at(d_prev, graph.edge_head, d_dot[:, None] * rel_e)
    np.add.at(d_relation, graph.edge_rel, d_core * tail_prev + d_dot[:, None] * prev[graph.edge_head])
    return d_prev


def backward(
    params: KmpnParams,
    graph: KnowledgeGraph,
    trace: ForwardTrace,
    d_pos_scores: np.ndarray,
    d_neg_scores: np.ndarray,
    d_user_agg: np.ndarray | None = None,
    d_pos_agg: np.ndarray | None = None,
    d_neg_agg: np.ndarray | None = None,
    d_pref: np.ndarray | None = None,
) -> KmpnGrads:
    """Exact gradients of the batch objective for every trainable tensor.

    Upstream gradients: per-triple score gradients, plus optional direct
    gradients on the batch rows of the aggregated user/item embeddings
    (regularizers, alignment losses) and on the preference vectors
    (decorrelation loss).
    """
    B = len(trace.users)
    d_pos_scores = np.asarray(d_pos_scores, dtype=np.float64)
    d_neg_scores = np.asarray(d_neg_scores, dtype=np.float64)
    if d_pos_scores.shape != (B,) or d_neg_scores.shape != (B,):
        raise ValueError("score gradient shape mismatch with trace batch")

    entity_agg = trace.entity_agg
    user_rows = trace.user_agg[trace.batch_inv]  # [B, h]
    pos_rows = entity_agg[trace.pos_items]
    neg_rows = entity_agg[trace.neg_items]

    # batch-row gradients on aggregated embeddings
    d_user_rows = d_pos_scores[:, None] * pos_rows + d_neg_scores[:, None] * neg_rows
    if d_user_agg is not None:
        d_user_rows = d_user_rows + d_user_agg
    d_entity_agg = np.zeros_like(entity_agg)
    np.add.at(d_entity_agg, trace.pos_items, d_pos_scores[:, None] * user_rows)
    np.add.at(d_entity_agg, trace.neg_items, d_neg_scores[:, None] * user_rows)
    if d_pos_agg is not None:
        np.add.at(d_entity_agg, trace.pos_items, d_pos_agg)
    if d_neg_agg is not None:
        np.add.at(d_entity_agg, trace.neg_items, d_neg_agg)

    # fold batch rows onto unique users
    U = len(trace.uniq_users)
    d_uagg = np.zeros((U, params.h), dtype=np.float64)
    np.add.at(d_uagg, trace.batch_inv, d_user_rows)

    # user aggregation: user_agg = msum o profile, profile = alpha @ pref
    msum = sum(trace.hist_means)
    profile = trace.alpha @ trace.pref
    d_msum = d_uagg * profile
    d_profile = d_uagg * msum

    d_alpha = d_profile @ trace.pref.T  # [U, P]
    d_pref_total = trace.alpha.T @ d_profile  # [P, h]
    if d_pref is not None:
        d_pref_total = d_pref_total + d_pref

    # attention softmax: logits_up = pref_p . user_emb_u
    inner = (d_alpha * trace.alpha).sum(axis=1, keepdims=True)
    d_att_logits = trace.alpha * (d_alpha - inner)  # [U, P]
    uemb_rows = params.user_emb[trace.uniq_users]
    d_user_emb = np.zeros_like(params.user_emb)
    np.add.at(d_user_emb, trace.uniq_users, d_att_logits @ trace.pref)
    d_pref_total += d_att_logits.T @ uemb_rows

    # preference composition: pref = beta @ meta, beta = row-softmax(logits)
    d_meta = trace.beta.T @ d_pref_total
    d_beta = d_pref_total @ params.meta_pref_emb.T
    inner_b = (d_beta * trace.beta).sum(axis=1, keepdims=True)
    d_pref_logits = trace.beta * (d_beta - inner_b)

    # history means: the same scatter feeds every depth
    hist_scatter = np.zeros_like(entity_agg)
    weights = np.repeat(d_msum / trace.hist_counts[:, None], trace.hist_counts, axis=0)
    np.add.at(hist_scatter, trace.hist_concat, weights)

    per_depth = d_entity_agg + hist_scatter  # reaches layers[l] for every l
    d_relation = np.zeros_like(params.relation_emb)
    carry = np.zeros_like(entity_agg)
    for l in range(params.n_layers, 0, -1):
        grad_layer = per_depth + carry
        carry = _conv_backward(
            graph, trace.layers[l - 1], params.relation_emb, trace.gates[l - 1], grad_layer,
            d_relation,
        )
    d_entity = per_depth + carry

    return KmpnGrads(
        entity_emb=d_entity,
        relation_emb=d_relation,
        user_emb=d_user_emb,
        meta_pref_emb=d_meta,
        pref_logits=d_pref_logits,
    )


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(params: KmpnParams, path) -> None:
    """Header line, then all tensors as row-major little-endian float64."""
    params.validate()
    header = (
        f"{CHECKPOINT_MAGIC} {params.num_entities} {params.num_relations} "
        f"{params.num_users} {params.h} {params.n_layers} "
        f"{params.num_meta} {params.num_pref}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for t in params.tensors().values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> KmpnParams:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        fields = header.split()
        if len(fields) != 8 or fields[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        try:
            n_v, n_r2, n_u, h, n_layers, n_m, n_p = (int(x) for x in fields[1:])
        except ValueError:
            raise ValueError(f"{path}: malformed checkpoint header") from None
        shapes = [(n_v, h), (n_r2, h), (n_u, h), (n_m, h), (n_p, n_m)]
        blobs = []
        for shape in shapes:
            n_bytes = shape[0] * shape[1] * 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"{path}: truncated checkpoint")
            blobs.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    params = KmpnParams(
        entity_emb=blobs[0],
        relation_emb=blobs[1],
        user_emb=blobs[2],
        meta_pref_emb=blobs[3],
        pref_logits=blobs[4],
        n_layers=n_layers,
    )
    params.validate()
    return params
