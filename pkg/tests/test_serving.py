"""Embedding export, the binary table format, and pair scoring."""

import numpy as np
import pytest

from tworank.model import init_params, user_tower_forward
from tworank.serving import (EmbeddingTable, KIND_ITEM, KIND_USER,
                             export_embeddings, score)
from tworank.train import TitleEmbedder, item_embeddings_for
from tworank.types import Event, EventType, UserHistory


@pytest.fixture
def tables(tiny_config, word_tokenizer):
    params = init_params(tiny_config, seed=2)
    histories = {
        u: UserHistory(u, [Event(d, EventType.CLICK, f"thing {u} {d}", d)
                           for d in range(u % 3 + 1)])
        for u in range(7)
    }
    titles = {i: f"item number {i}" for i in range(11)}
    users, items = export_embeddings(params, histories, titles, word_tokenizer)
    return params, histories, titles, users, items


def test_export_covers_all_entities(tables):
    _, histories, titles, users, items = tables
    assert len(users) == len(histories)
    assert len(items) == len(titles)
    assert users.kind == KIND_USER and items.kind == KIND_ITEM


def test_exported_vectors_unit_norm(tables):
    _, _, _, users, items = tables
    for table in (users, items):
        norms = np.linalg.norm(table.vectors.astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)


def test_export_matches_direct_forward(tables, word_tokenizer):
    """Stored float32 vectors reproduce the float64 forward pass."""
    params, histories, titles, users, items = tables
    embedder = TitleEmbedder(titles, word_tokenizer)
    for u in (0, 3, 6):
        direct = user_tower_forward(histories[u], params, word_tokenizer).data
        assert np.allclose(users.vector(u), direct, atol=1e-6)
    direct_items = item_embeddings_for(sorted(titles), embedder, params).data
    assert np.allclose(items.vectors, direct_items, atol=1e-6)


def test_table_roundtrip(tables, tmp_path):
    _, _, _, users, items = tables
    for name, table in (("users.emb", users), ("items.emb", items)):
        path = tmp_path / name
        table.save(path)
        loaded = EmbeddingTable.load(path)
        assert loaded.kind == table.kind and loaded.dim == table.dim
        assert np.array_equal(loaded.ids, table.ids)
        assert np.array_equal(loaded.vectors, table.vectors)


def test_table_file_layout(tables, tmp_path):
    _, _, _, users, _ = tables
    path = tmp_path / "users.emb"
    users.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert raw[4] == KIND_USER
    # magic + kind/dim/count header + count * (id + dim floats)
    assert len(raw) == 4 + 13 + len(users) * (8 + 4 * users.dim)


def test_table_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"XXXX" + b"\x00" * 13)
    with pytest.raises(ValueError):
        EmbeddingTable.load(path)


def test_table_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        EmbeddingTable(KIND_USER, 2, np.array([1, 1]), np.zeros((2, 2)))


def test_missing_id_raises(tables):
    _, _, _, users, _ = tables
    with pytest.raises(KeyError):
        users.vector(999)


def test_score_preserves_input_order(tables):
    _, _, _, users, items = tables
    ids = [5, 2, 9, 0]
    out = score(3, ids, users, items)
    assert [item for item, _, _ in out] == ids
    assert all(err is None for _, _, err in out)


def test_score_partial_success(tables):
    _, _, _, users, items = tables
    out = score(0, [1, 999, 2], users, items)
    assert out[0][2] is None and out[2][2] is None
    assert out[1][1] is None and "999" in out[1][2]


def test_score_matches_inner_product(tables):
    _, _, _, users, items = tables
    (item_id, value, _), = score(4, [7], users, items)
    expect = float(users.vector(4).astype(np.float64) @ items.vector(7).astype(np.float64))
    assert value == pytest.approx(expect, abs=1e-12)


def test_score_unknown_user_raises(tables):
    _, _, _, users, items = tables
    with pytest.raises(KeyError):
        score(999, [1], users, items)
