"""Content-based side model and the embedding exchange files.

Items are encoded from their descriptions through a deterministic hashed
bag-of-tokens: FNV-1a 64-bit token hash modulo a bucket count, then the
mean of the bucket embeddings. Users are attention-weighted sums of their
history item encodings (two-layer scorer, tanh hidden). Training minimizes
a sampled-softmax click objective; gradients are hand-derived.

The exchange formats (one text, one binary) carry (id, vector) rows for a
whole user or item set and are the boundary to the graph model: rows read
from these files are constants there.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import InteractionStore, ItemCorpus
from .numeric import softmax_rows
from .optim import TrainConfig, adam_step, init_adam, lr_at

log = logging.getLogger(__name__)

CONTENT_MAGIC = "CLIT1"
EMB_TEXT_MAGIC = "EMB1"
EMB_BIN_MAGIC = b"CSEM"
KIND_CODES = {"item": 0, "user": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TOKEN_RE = re.compile(r"[a-z0-9]+")
MAX_REJECTIONS = 100


def fnv1a_64(token: str) -> int:
    """FNV-1a over the token's UTF-8 bytes, 64-bit wrap."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def bucketize(text: str, num_buckets: int) -> np.ndarray:
    """Bucket ids for every token, order preserved (multiplicity counts)."""
    return np.array([fnv1a_64(t) % num_buckets for t in tokenize(text)], dtype=np.int64)


@dataclass
class ContentParams:
    """Trainable tensors plus the sampling hyperparameters.

    bucket_emb [num_buckets, h]; the user scorer is
    tanh(E @ fc1_w + fc1_b) @ fc2_w + fc2_b with hidden width h/2.
    """

    bucket_emb: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    history_size: int
    num_negatives: int

    @property
    def h(self) -> int:
        return self.bucket_emb.shape[1]

    @property
    def num_buckets(self) -> int:
        return self.bucket_emb.shape[0]

    def tensors(self) -> dict:
        return {
            "bucket_emb": self.bucket_emb,
            "fc1_w": self.fc1_w,
            "fc1_b": self.fc1_b,
            "fc2_w": self.fc2_w,
            "fc2_b": self.fc2_b,
        }

    def validate(self) -> None:
        h = self.h
        if h % 2 != 0:
            raise ValueError("h must be even (hidden width is h/2)")
        m = h // 2
        if self.fc1_w.shape != (h, m) or self.fc1_b.shape != (m,):
            raise ValueError("fc1 shape mismatch")
        if self.fc2_w.shape != (m, 1) or self.fc2_b.shape != (1,):
            raise ValueError("fc2 shape mismatch")
        if self.num_buckets < 1 or self.history_size < 1 or self.num_negatives < 1:
            raise ValueError("num_buckets, history_size, num_negatives must be >= 1")
        for name, t in self.tensors().items():
            if not np.isfinite(t).all():
                raise ValueError(f"non-finite values in {name}")

    def copy(self) -> "ContentParams":
        return ContentParams(
            bucket_emb=self.bucket_emb.copy(),
            fc1_w=self.fc1_w.copy(),
            fc1_b=self.fc1_b.copy(),
            fc2_w=self.fc2_w.copy(),
            fc2_b=self.fc2_b.copy(),
            history_size=self.history_size,
            num_negatives=self.num_negatives,
        )


def init_content(
    h: int = 64,
    num_buckets: int = 4096,
    history_size: int = 8,
    num_negatives: int = 4,
    seed: int = 0,
) -> ContentParams:
    rng = np.random.default_rng(seed)
    m = h // 2
    bound_emb = np.sqrt(6.0 / h)
    lim1 = np.sqrt(6.0 / (h + m))
    lim2 = np.sqrt(6.0 / (m + 1))
    params = ContentParams(
        bucket_emb=rng.uniform(-bound_emb, bound_emb, size=(num_buckets, h)),
        fc1_w=rng.uniform(-lim1, lim1, size=(h, m)),
        fc1_b=np.zeros(m),
        fc2_w=rng.uniform(-lim2, lim2, size=(m, 1)),
        fc2_b=np.zeros(1),
        history_size=history_size,
        num_negatives=num_negatives,
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def encode_item_flagged(text: str, params: ContentParams):
    """(mean of token bucket embeddings, had-no-tokens flag)."""
    buckets = bucketize(text, params.num_buckets)
    if len(buckets) == 0:
        return np.zeros(params.h), True
    return params.bucket_emb[buckets].mean(axis=0), False


def encode_item(text: str, params: ContentParams) -> np.ndarray:
    vec, empty = encode_item_flagged(text, params)
    if empty:
        log.warning("encode_item: no tokens in %r, returning zero vector", text[:40])
    return vec


def encode_user(history_embs: np.ndarray, params: ContentParams):
    """Attention-pooled user vector over history item encodings.

    Returns (vector h, attention weights B).
    """
    E = np.asarray(history_embs, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] != params.h:
        raise ValueError("history_embs must be [B >= 1, h]")
    H = np.tanh(E @ params.fc1_w + params.fc1_b)  # [B, h/2]
    scores = (H @ params.fc2_w)[:, 0] + params.fc2_b[0]  # [B]
    alpha = softmax_rows(scores[None, :])[0]
    return alpha @ E, alpha


def _encode_user_backward(E, H, alpha, params: ContentParams, d_user):
    """Adjoint of encode_user given cached intermediates.

    Returns (d_E, d_fc1_w, d_fc1_b, d_fc2_w, d_fc2_b).
    """
    d_E = alpha[:, None] * d_user[None, :]
    d_alpha = E @ d_user  # [B]
    inner = float(alpha @ d_alpha)
    d_scores = alpha * (d_alpha - inner)  # softmax adjoint, [B]
    d_fc2_w = (H * d_scores[:, None]).sum(axis=0)[:, None]
    d_fc2_b = np.array([d_scores.sum()])
    d_H = d_scores[:, None] * params.fc2_w[:, 0][None, :]  # [B, h/2]
    d_pre = d_H * (1.0 - H * H)
    d_fc1_w = E.T @ d_pre
    d_fc1_b = d_pre.sum(axis=0)
    d_E += d_pre @ params.fc1_w.T
    return d_E, d_fc1_w, d_fc1_b, d_fc2_w, d_fc2_b


# ---------------------------------------------------------------------------
# click objective for one (user, pos, negatives) instance
# ---------------------------------------------------------------------------


def click_instance(
    params: ContentParams,
    hist_buckets: list,
    pos_buckets: np.ndarray,
    neg_buckets: list,
    compute_grads: bool = True,
):
    """Loss (and gradients) of one sampled-softmax click instance.

    `hist_buckets` / `neg_buckets` are lists of bucket-id arrays, one per
    item; `pos_buckets` is a single array. Items with no tokens encode to
    zero and receive no gradient.
    """
    from .losses import click_softmax_loss

    def item_vec(buckets):
        if len(buckets) == 0:
            return np.zeros(params.h)
        return params.bucket_emb[buckets].mean(axis=0)

    E = np.stack([item_vec(b) for b in hist_buckets])  # [B, h]
    e_pos = item_vec(pos_buckets)
    e_negs = np.stack([item_vec(b) for b in neg_buckets])  # [K, h]

    H = np.tanh(E @ params.fc1_w + params.fc1_b)
    scores_att = (H @ params.fc2_w)[:, 0] + params.fc2_b[0]
    alpha = softmax_rows(scores_att[None, :])[0]
    user = alpha @ E

    pos_score = float(user @ e_pos)
    neg_scores = e_negs @ user  # [K]
    loss, d_pos, d_negs = click_softmax_loss(
        np.array([pos_score]), neg_scores[None, :]
    )
    if not compute_grads:
        return loss, None

    d_pos = float(d_pos[0])
    d_negs = d_negs[0]  # [K]
    d_user = d_pos * e_pos + d_negs @ e_negs
    d_e_pos = d_pos * user
    d_e_negs = d_negs[:, None] * user[None, :]

    d_E, d_fc1_w, d_fc1_b, d_fc2_w, d_fc2_b = _encode_user_backward(
        E, H, alpha, params, d_user
    )

    d_bucket = np.zeros_like(params.bucket_emb)

    def scatter(buckets, d_vec):
        if len(buckets):
            np.add.at(d_bucket, buckets, np.repeat(d_vec[None, :] / len(buckets), len(buckets), axis=0))

    for b, row in zip(hist_buckets, d_E):
        scatter(b, row)
    scatter(pos_buckets, d_e_pos)
    for b, row in zip(neg_buckets, d_e_negs):
        scatter(b, row)

    grads = {
        "bucket_emb": d_bucket,
        "fc1_w": d_fc1_w,
        "fc1_b": d_fc1_b,
        "fc2_w": d_fc2_w,
        "fc2_b": d_fc2_b,
    }
    return loss, grads


def _uniform_non_positive(rng: np.random.Generator, num_items: int, positives: frozenset) -> int:
    for _ in range(MAX_REJECTIONS):
        cand = int(rng.integers(num_items))
        if cand not in positives:
            return cand
    pool = np.setdiff1d(
        np.arange(num_items, dtype=np.int64),
        np.fromiter(positives, dtype=np.int64, count=len(positives)),
        assume_unique=True,
    )
    if len(pool) == 0:
        raise ValueError("no non-positive item available")
    return int(pool[rng.integers(len(pool))])


def train_content(
    corpus: ItemCorpus,
    store: InteractionStore,
    params: ContentParams,
    config: TrainConfig,
):
    """Train the content model on click instances drawn from train splits.

    One instance per user per epoch: a positive from the user's train
    items, a history subsample of size <= history_size from the remaining
    train items, and uniform non-positive negatives.

    Returns (params, log_lines).
    """
    config.validate()
    if corpus.num_items == 0:
        raise ValueError("empty corpus")
    if corpus.num_items != store.num_items:
        raise ValueError("corpus/store item count mismatch")
    params = params.copy()
    if config.epochs == 0:
        return params, []

    buckets = [bucketize(corpus.text(i), params.num_buckets) for i in range(corpus.num_items)]
    train_users = np.array(
        [u for u in range(store.num_users) if len(store.train[u])], dtype=np.int64
    )
    if len(train_users) == 0:
        raise ValueError("no user has train interactions")
    positive_sets = {int(u): frozenset(int(i) for i in store.train[u]) for u in train_users}

    rng = np.random.default_rng(config.seed)
    state = init_adam(params.tensors())
    lines = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_at(config, epoch - 1, config.epochs)
        order = rng.permutation(train_users)
        total = 0.0
        for u in order:
            u = int(u)
            items = store.train[u]
            pos = int(items[rng.integers(len(items))])
            rest = items[items != pos]
            pool = rest if len(rest) else items
            n_hist = min(params.history_size, len(pool))
            hist = rng.choice(pool, size=n_hist, replace=False)
            negs = [
                _uniform_non_positive(rng, store.num_items, positive_sets[u])
                for _ in range(params.num_negatives)
            ]
            loss, grads = click_instance(
                params,
                [buckets[int(i)] for i in hist],
                buckets[pos],
                [buckets[n] for n in negs],
            )
            adam_step(params.tensors(), grads, state, lr, config)
            total += loss
        mean_loss = total / len(train_users)
        lines.append(f"{epoch}\t{mean_loss!r}\t{lr!r}")
    return params, lines


# ---------------------------------------------------------------------------
# embedding exchange files
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingMatrixFile:
    """(id, vector) rows for one side of the exchange; float32 payload."""

    kind: str
    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"kind must be one of {sorted(KIND_CODES)}, got {self.kind!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise ValueError("ids/vectors shape mismatch")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in embedding set")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite embedding values")
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, wanted) -> np.ndarray:
        """float64 matrix for the requested ids; errors name the first
        missing id."""
        out = np.empty((len(wanted), self.dim), dtype=np.float64)
        for k, i in enumerate(wanted):
            pos = self._index.get(int(i))
            if pos is None:
                raise ValueError(f"embedding file ({self.kind}) is missing id {int(i)}")
            out[k] = self.vectors[pos]
        return out


def write_embeddings_text(emb: EmbeddingMatrixFile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMB_TEXT_MAGIC} {emb.kind} {emb.count} {emb.dim}\n")
        for i, vec in zip(emb.ids, emb.vectors):
            fh.write(str(int(i)) + " " + " ".join(f"{float(v):.9g}" for v in vec) + "\n")


def write_embeddings_binary(emb: EmbeddingMatrixFile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(EMB_BIN_MAGIC)
        fh.write(struct.pack("<IBQI", 1, KIND_CODES[emb.kind], emb.count, emb.dim))
        for i, vec in zip(emb.ids, emb.vectors):
            fh.write(struct.pack("<Q", int(i)))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def _read_embeddings_text(path) -> EmbeddingMatrixFile:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != EMB_TEXT_MAGIC:
            raise ValueError(f"{path}: not an {EMB_TEXT_MAGIC} embedding file")
        kind, count, dim = header[1], int(header[2]), int(header[3])
        if kind not in KIND_CODES:
            raise ValueError(f"{path}: unknown embedding kind {kind!r}")
        ids = np.empty(count, dtype=np.int64)
        vectors = np.empty((count, dim), dtype=np.float32)
        for row in range(count):
            fields = fh.readline().split()
            if len(fields) != dim + 1:
                raise ValueError(f"{path}: row {row} has {len(fields) - 1} values, expected {dim}")
            ids[row] = int(fields[0])
            vectors[row] = [np.float32(x) for x in fields[1:]]
        if fh.readline().strip():
            raise ValueError(f"{path}: trailing data after {count} rows")
    return EmbeddingMatrixFile(kind=kind, ids=ids, vectors=vectors)


def _read_embeddings_binary(path) -> EmbeddingMatrixFile:
    with open(path, "rb") as fh:
        if fh.read(4) != EMB_BIN_MAGIC:
            raise ValueError(f"{path}: bad magic")
        version, kind_code, count, dim = struct.unpack("<IBQI", fh.read(17))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        if kind_code not in KIND_NAMES:
            raise ValueError(f"{path}: unknown kind code {kind_code}")
        ids = np.empty(count, dtype=np.int64)
        vectors = np.empty((count, dim), dtype=np.float32)
        rec = 8 + 4 * dim
        for row in range(count):
            raw = fh.read(rec)
            if len(raw) != rec:
                raise ValueError(f"{path}: truncated at record {row}")
            ids[row] = struct.unpack("<Q", raw[:8])[0]
            vectors[row] = np.frombuffer(raw[8:], dtype="<f4")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} records")
    return EmbeddingMatrixFile(kind=KIND_NAMES[kind_code], ids=ids, vectors=vectors)


def read_embeddings(path) -> EmbeddingMatrixFile:
    """Load either exchange format (sniffed from the first bytes)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == EMB_BIN_MAGIC:
        return _read_embeddings_binary(path)
    return _read_embeddings_text(path)


def export_embeddings(
    params: ContentParams,
    corpus: ItemCorpus,
    store: InteractionStore,
    out_dir,
    write_binary: bool = True,
):
    """Encode every item and every user and write the exchange files.

    Items: encode_item on each description (no tokens -> zero vector).
    Users: full train history in ascending item order, processed in chunks
    of history_size through encode_user, chunk outputs mean-pooled; users
    with no train items (cold-start) get a zero vector.

    Writes content_items.txt / content_users.txt (and .bin twins unless
    disabled). Returns (item_set, user_set).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    item_vecs = np.empty((corpus.num_items, params.h), dtype=np.float64)
    n_empty = 0
    for i in range(corpus.num_items):
        vec, empty = encode_item_flagged(corpus.text(i), params)
        n_empty += int(empty)
        item_vecs[i] = vec
    if n_empty:
        log.warning("export: %d items had no tokens; wrote zero vectors", n_empty)

    user_vecs = np.zeros((store.num_users, params.h), dtype=np.float64)
    B = params.history_size
    for u in range(store.num_users):
        items = store.train[u]
        if len(items) == 0:
            continue  # cold-start user: zero vector
        chunk_outs = []
        for lo in range(0, len(items), B):
            chunk = items[lo : lo + B]
            E = item_vecs[chunk]
            vec, _ = encode_user(E, params)
            chunk_outs.append(vec)
        user_vecs[u] = np.mean(chunk_outs, axis=0)

    item_set = EmbeddingMatrixFile(
        kind="item", ids=np.arange(corpus.num_items, dtype=np.int64), vectors=item_vecs
    )
    user_set = EmbeddingMatrixFile(
        kind="user", ids=np.arange(store.num_users, dtype=np.int64), vectors=user_vecs
    )
    write_embeddings_text(item_set, out_dir / "content_items.txt")
    write_embeddings_text(user_set, out_dir / "content_users.txt")
    if write_binary:
        write_embeddings_binary(item_set, out_dir / "content_items.bin")
        write_embeddings_binary(user_set, out_dir / "content_users.bin")
    return item_set, user_set


# ---------------------------------------------------------------------------
# content checkpoint
# ---------------------------------------------------------------------------


def save_content_checkpoint(params: ContentParams, path) -> None:
    params.validate()
    header = (
        f"{CONTENT_MAGIC} {params.num_buckets} {params.h} "
        f"{params.history_size} {params.num_negatives}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for t in params.tensors().values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_content_checkpoint(path) -> ContentParams:
    path = Path(path)
    with open(path, "rb") as fh:
        fields = fh.readline().decode("ascii", errors="replace").split()
        if len(fields) != 5 or fields[0] != CONTENT_MAGIC:
            raise ValueError(f"{path}: not a {CONTENT_MAGIC} checkpoint")
        v_b, h, hist, k = (int(x) for x in fields[1:])
        m = h // 2
        shapes = [(v_b, h), (h, m), (m,), (m, 1), (1,)]
        blobs = []
        for shape in shapes:
            n = int(np.prod(shape)) * 8
            raw = fh.read(n)
            if len(raw) != n:
                raise ValueError(f"{path}: truncated checkpoint")
            blobs.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    params = ContentParams(
        bucket_emb=blobs[0],
        fc1_w=blobs[1],
        fc1_b=blobs[2],
        fc2_w=blobs[3],
        fc2_b=blobs[4],
        history_size=hist,
        num_negatives=k,
    )
    params.validate()
    return params
