import math

import numpy as np
import pytest

from kgrec.content import (
    EmbeddingMatrixFile,
    bucketize,
    click_instance,
    encode_item,
    encode_item_flagged,
    encode_user,
    export_embeddings,
    fnv1a_64,
    init_content,
    load_content_checkpoint,
    read_embeddings,
    save_content_checkpoint,
    tokenize,
    train_content,
    write_embeddings_binary,
    write_embeddings_text,
)
from kgrec.data import ItemCorpus, build_store
from kgrec.optim import TrainConfig


# -- hashing and tokenization ---------------------------------------------------


def test_fnv1a_64_published_vectors():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_tokenize_lowercases_and_splits():
    assert tokenize("Hello, World-2!") == ["hello", "world", "2"]
    assert tokenize("") == []
    assert tokenize("  \t\n ") == []
    assert tokenize("a a A") == ["a", "a", "a"]


def test_bucketize_matches_hash_mod():
    got = bucketize("red Lamp red", 17)
    want = [fnv1a_64(t) % 17 for t in ["red", "lamp", "red"]]
    assert got.tolist() == want  # order and multiplicity preserved


# -- item encoder ----------------------------------------------------------------


def test_encode_item_mean_of_buckets():
    p = init_content(h=4, num_buckets=8, seed=0)
    b = bucketize("axe bolt", p.num_buckets)
    want = (p.bucket_emb[b[0]] + p.bucket_emb[b[1]]) / 2.0
    np.testing.assert_allclose(encode_item("axe bolt", p), want, rtol=1e-15)


def test_encode_item_empty_text_flags_zero():
    p = init_content(h=4, num_buckets=8, seed=0)
    vec, empty = encode_item_flagged("", p)
    assert empty and np.all(vec == 0.0)
    vec2, empty2 = encode_item_flagged("axe", p)
    assert not empty2 and not np.all(vec2 == 0.0)


def test_encode_item_is_order_invariant():
    p = init_content(h=6, num_buckets=32, seed=1)
    np.testing.assert_array_equal(encode_item("axe bolt coal", p), encode_item("coal axe bolt", p))


def test_encode_item_token_multiplicity_weights_mean():
    p = init_content(h=4, num_buckets=64, seed=2)
    ba = bucketize("axe", 64)[0]
    bb = bucketize("bolt", 64)[0]
    want = (2 * p.bucket_emb[ba] + p.bucket_emb[bb]) / 3.0
    np.testing.assert_allclose(encode_item("axe axe bolt", p), want, rtol=1e-15)


# -- user encoder ----------------------------------------------------------------


def test_encode_user_single_row_is_identity():
    p = init_content(h=4, num_buckets=8, seed=3)
    E = np.array([[1.0, -2.0, 0.5, 3.0]])
    vec, alpha = encode_user(E, p)
    np.testing.assert_array_equal(alpha, [1.0])
    np.testing.assert_allclose(vec, E[0], rtol=1e-15)


def test_encode_user_identical_rows_uniform_attention():
    p = init_content(h=4, num_buckets=8, seed=4)
    E = np.tile(np.array([0.3, 0.1, -0.2, 0.9]), (3, 1))
    vec, alpha = encode_user(E, p)
    np.testing.assert_allclose(alpha, np.full(3, 1 / 3), rtol=1e-14)
    np.testing.assert_allclose(vec, E[0], rtol=1e-14)


def test_encode_user_matches_manual_mlp():
    p = init_content(h=6, num_buckets=8, seed=5)
    rng = np.random.default_rng(6)
    E = rng.normal(size=(4, 6))
    vec, alpha = encode_user(E, p)

    scores = []
    for row in E:
        hidden = np.tanh(row @ p.fc1_w + p.fc1_b)
        scores.append(float(hidden @ p.fc2_w[:, 0] + p.fc2_b[0]))
    exp = np.exp(np.array(scores) - max(scores))
    want_alpha = exp / exp.sum()
    np.testing.assert_allclose(alpha, want_alpha, rtol=1e-13)
    np.testing.assert_allclose(vec, want_alpha @ E, rtol=1e-13)
    assert alpha.sum() == pytest.approx(1.0, rel=1e-14)


def test_encode_user_validates_input():
    p = init_content(h=4, num_buckets=8, seed=0)
    with pytest.raises(ValueError):
        encode_user(np.zeros((0, 4)), p)
    with pytest.raises(ValueError):
        encode_user(np.zeros((2, 5)), p)


# -- click instance ----------------------------------------------------------------


def _tiny_instance(seed=0):
    p = init_content(h=4, num_buckets=10, history_size=3, num_negatives=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    hist = [rng.integers(10, size=rng.integers(1, 4)) for _ in range(3)]
    pos = rng.integers(10, size=2)
    negs = [rng.integers(10, size=rng.integers(1, 3)) for _ in range(2)]
    return p, hist, pos, negs


def test_click_instance_value_composes_encoders():
    from kgrec.losses import click_softmax_loss

    p, hist, pos, negs = _tiny_instance(1)
    loss, _ = click_instance(p, hist, pos, negs)

    E = np.stack([p.bucket_emb[b].mean(axis=0) for b in hist])
    user, _ = encode_user(E, p)
    pos_s = float(user @ p.bucket_emb[pos].mean(axis=0))
    neg_s = np.array([float(user @ p.bucket_emb[b].mean(axis=0)) for b in negs])
    want, _, _ = click_softmax_loss(np.array([pos_s]), neg_s[None, :])
    assert loss == pytest.approx(want, rel=1e-13)


def test_click_instance_gradients_match_finite_differences():
    p, hist, pos, negs = _tiny_instance(2)
    _, grads = click_instance(p, hist, pos, negs)
    step = 1e-6
    for name, tensor in p.tensors().items():
        flat = tensor.reshape(-1)
        fd = np.zeros_like(flat)
        for k in range(len(flat)):
            orig = flat[k]
            flat[k] = orig + step
            vp, _ = click_instance(p, hist, pos, negs, compute_grads=False)
            flat[k] = orig - step
            vm, _ = click_instance(p, hist, pos, negs, compute_grads=False)
            flat[k] = orig
            fd[k] = (vp - vm) / (2 * step)
        np.testing.assert_allclose(
            grads[name].reshape(-1), fd, rtol=5e-6, atol=1e-9, err_msg=name
        )


def test_click_instance_empty_item_encodes_zero_and_gets_no_grad():
    p = init_content(h=4, num_buckets=10, seed=7)
    empty = np.array([], dtype=np.int64)
    loss, grads = click_instance(p, [np.array([1, 2])], empty, [np.array([3])])
    assert math.isfinite(loss)
    # positive item had no tokens, so only buckets 1, 2, 3 can receive grads
    touched = {k for k in range(10) if np.any(grads["bucket_emb"][k] != 0.0)}
    assert touched <= {1, 2, 3}


def test_click_instance_without_grads_returns_none():
    p, hist, pos, negs = _tiny_instance(3)
    loss, grads = click_instance(p, hist, pos, negs, compute_grads=False)
    assert grads is None and math.isfinite(loss)


# -- training ------------------------------------------------------------------


def _cluster_dataset():
    texts = {
        0: "alpha axe",
        1: "alpha bolt",
        2: "alpha coal",
        3: "beta dire",
        4: "beta echo",
        5: "beta fang",
    }
    corpus = ItemCorpus(num_items=6, texts=texts)
    store = build_store(
        {0: [0, 1, 2], 1: [0, 1, 2], 2: [3, 4, 5], 3: [3, 4, 5]},
        num_items=6,
    )
    return corpus, store


def test_train_content_zero_epochs_is_a_noop_copy():
    corpus, store = _cluster_dataset()
    p = init_content(h=8, num_buckets=32, history_size=2, num_negatives=2, seed=0)
    out, lines = train_content(corpus, store, p, TrainConfig(epochs=0))
    assert lines == []
    assert out is not p
    for name, t in p.tensors().items():
        np.testing.assert_array_equal(t, out.tensors()[name])


def test_train_content_deterministic_and_learns_clusters():
    corpus, store = _cluster_dataset()
    p = init_content(h=8, num_buckets=32, history_size=2, num_negatives=2, seed=0)
    cfg = TrainConfig(epochs=60, lr_start=0.05, lr_end=0.0, seed=3)
    out1, lines1 = train_content(corpus, store, p, cfg)
    out2, lines2 = train_content(corpus, store, p, cfg)
    assert lines1 == lines2
    for name, t in out1.tensors().items():
        np.testing.assert_array_equal(t, out2.tensors()[name])

    first = float(lines1[0].split("\t")[1])
    last = float(lines1[-1].split("\t")[1])
    assert last < first
    assert last < math.log(p.num_negatives + 1)  # better than uniform guessing
    assert len(lines1) == 60
    assert lines1[0].split("\t")[0] == "1"


def test_train_content_validates_corpus_store_pairing():
    corpus, store = _cluster_dataset()
    p = init_content(h=8, num_buckets=32, seed=0)
    with pytest.raises(ValueError, match="mismatch"):
        train_content(ItemCorpus(num_items=5, texts={}), store, p, TrainConfig(epochs=1))


# -- exchange files ---------------------------------------------------------------


def _emb(kind="item", n=4, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrixFile(
        kind=kind,
        ids=np.arange(n, dtype=np.int64),
        vectors=rng.normal(size=(n, dim)).astype(np.float32),
    )


def test_embedding_set_validation():
    with pytest.raises(ValueError, match="kind"):
        _emb(kind="thing")
    with pytest.raises(ValueError, match="duplicate"):
        EmbeddingMatrixFile("item", np.array([1, 1]), np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="non-finite"):
        EmbeddingMatrixFile("item", np.array([0]), np.array([[np.nan, 0.0]], dtype=np.float32))


def test_embedding_rows_lookup_and_missing_id():
    emb = _emb(n=5, dim=2)
    rows = emb.rows([3, 0])
    assert rows.dtype == np.float64
    np.testing.assert_array_equal(rows[0], emb.vectors[3].astype(np.float64))
    with pytest.raises(ValueError, match="missing id 9"):
        emb.rows([0, 9])


def test_text_round_trip_is_byte_stable(tmp_path):
    emb = _emb(n=6, dim=4, seed=1)
    f1, f2 = tmp_path / "a.txt", tmp_path / "b.txt"
    write_embeddings_text(emb, f1)
    back = read_embeddings(f1)
    assert back.kind == emb.kind
    np.testing.assert_array_equal(back.vectors, emb.vectors)  # %.9g is f32-exact
    write_embeddings_text(back, f2)
    assert f1.read_bytes() == f2.read_bytes()


def test_binary_round_trip_is_byte_stable(tmp_path):
    emb = _emb(kind="user", n=6, dim=4, seed=2)
    f1, f2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_embeddings_binary(emb, f1)
    back = read_embeddings(f1)
    assert back.kind == "user"
    np.testing.assert_array_equal(back.vectors, emb.vectors)
    write_embeddings_binary(back, f2)
    assert f1.read_bytes() == f2.read_bytes()


def test_text_and_binary_carry_identical_payloads(tmp_path):
    emb = _emb(n=5, dim=3, seed=3)
    write_embeddings_text(emb, tmp_path / "e.txt")
    write_embeddings_binary(emb, tmp_path / "e.bin")
    t = read_embeddings(tmp_path / "e.txt")
    b = read_embeddings(tmp_path / "e.bin")
    np.testing.assert_array_equal(t.vectors, b.vectors)
    np.testing.assert_array_equal(t.ids, b.ids)


def test_embedding_file_corruption_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_text("EMB1 item 2 3\n0 1 2 3\n")
    with pytest.raises(ValueError, match="row 1"):
        read_embeddings(bad)
    bad.write_text("EMB1 item 1 2\n0 1\n")
    with pytest.raises(ValueError, match="row 0 has 1 values"):
        read_embeddings(bad)
    bad.write_text("EMB1 gizmo 1 2\n0 1 2\n")
    with pytest.raises(ValueError, match="unknown embedding kind"):
        read_embeddings(bad)
    bad.write_text("EMB1 item 1 2\n0 1 2\nextra\n")
    with pytest.raises(ValueError, match="trailing"):
        read_embeddings(bad)

    emb = _emb(n=2, dim=2)
    write_embeddings_binary(emb, bad)
    raw = bad.read_bytes()
    bad.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_embeddings(bad)
    bad.write_bytes(raw + b"\x01")
    with pytest.raises(ValueError, match="trailing bytes"):
        read_embeddings(bad)


# -- export ------------------------------------------------------------------------


def test_export_embeddings_items_users_and_cold_zero(tmp_path):
    corpus = ItemCorpus(num_items=3, texts={0: "axe bolt", 2: "coal"})
    store = build_store(
        {0: [0, 1], 1: [2]},
        cold_history={2: [0]},
        cold_test={2: [1]},
        num_items=3,
    )
    p = init_content(h=4, num_buckets=16, history_size=8, seed=0)
    item_set, user_set = export_embeddings(p, corpus, store, tmp_path)

    for name in ("content_items.txt", "content_users.txt", "content_items.bin", "content_users.bin"):
        assert (tmp_path / name).exists()

    np.testing.assert_allclose(
        item_set.rows([0])[0], encode_item("axe bolt", p), rtol=1e-6
    )
    assert np.all(item_set.rows([1])[0] == 0.0)  # no text -> zero vector

    # user 0 history fits one attention chunk
    E = np.stack([encode_item(corpus.text(i), p) for i in (0, 1)])
    want, _ = encode_user(E, p)
    np.testing.assert_allclose(user_set.rows([0])[0], want, rtol=1e-6)
    # user 2 is cold: no train rows, zero vector
    assert np.all(user_set.rows([2])[0] == 0.0)

    disk_items = read_embeddings(tmp_path / "content_items.bin")
    np.testing.assert_array_equal(disk_items.vectors, item_set.vectors)


def test_export_embeddings_chunked_pooling(tmp_path):
    # 5 history items with chunk size 2 -> chunks [0,1], [2,3], [4]
    corpus = ItemCorpus(
        num_items=5, texts={i: f"tok{i} word{i}" for i in range(5)}
    )
    store = build_store({0: [0, 1, 2, 3, 4]}, num_items=5)
    p = init_content(h=4, num_buckets=64, history_size=2, seed=1)
    _, user_set = export_embeddings(p, corpus, store, tmp_path, write_binary=False)
    assert not (tmp_path / "content_users.bin").exists()

    vecs = [encode_item(corpus.text(i), p) for i in range(5)]
    chunks = [
        encode_user(np.stack(vecs[0:2]), p)[0],
        encode_user(np.stack(vecs[2:4]), p)[0],
        encode_user(np.stack(vecs[4:5]), p)[0],
    ]
    np.testing.assert_allclose(user_set.rows([0])[0], np.mean(chunks, axis=0), rtol=1e-6)


# -- checkpoint ---------------------------------------------------------------------


def test_content_checkpoint_round_trip(tmp_path):
    p = init_content(h=6, num_buckets=12, history_size=3, num_negatives=5, seed=4)
    f1, f2 = tmp_path / "a.content", tmp_path / "b.content"
    save_content_checkpoint(p, f1)
    q = load_content_checkpoint(f1)
    assert (q.history_size, q.num_negatives) == (3, 5)
    for name, t in p.tensors().items():
        np.testing.assert_array_equal(t, q.tensors()[name])
    save_content_checkpoint(q, f2)
    assert f1.read_bytes() == f2.read_bytes()


def test_content_checkpoint_corruption(tmp_path):
    p = init_content(h=4, num_buckets=6, seed=0)
    f = tmp_path / "c"
    save_content_checkpoint(p, f)
    raw = f.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"WRONG 1 2 3 4\n")
    with pytest.raises(ValueError, match="not a"):
        load_content_checkpoint(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_content_checkpoint(bad)
    bad.write_bytes(raw + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_content_checkpoint(bad)
