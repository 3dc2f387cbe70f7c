"""Batch serving: export all user/item embeddings from a frozen model to
keyed binary files, load them into an in-memory table, and score pairs by
stored-vector inner product. The context tower never participates here.

File format ("EMB1", little-endian): magic, u8 kind (0 user / 1 item),
u32 dim, u64 count, then per record u64 id + dim float32 values.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import no_grad
from .model import (ModelParams, batch_histories, item_tower_forward_batch,
                    user_tower_forward_batch)
from .train import TitleEmbedder, content_embed_batch
from .types import UserHistory

EMB_MAGIC = b"EMB1"
KIND_USER = 0
KIND_ITEM = 1
_KIND_NAMES = {KIND_USER: "user", KIND_ITEM: "item"}


class EmbeddingTable:
    """Immutable id -> unit-norm vector map backed by a hash table."""

    def __init__(self, kind: int, dim: int, ids: np.ndarray, vectors: np.ndarray):
        if len(ids) != len(set(int(i) for i in ids)):
            raise ValueError("duplicate ids in embedding table")
        self.kind = kind
        self.dim = dim
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.vectors = np.asarray(vectors, dtype=np.float32)
        self._index = {int(i): r for r, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, entity_id: int) -> bool:
        return int(entity_id) in self._index

    def vector(self, entity_id: int) -> np.ndarray:
        row = self._index.get(int(entity_id))
        if row is None:
            raise KeyError(f"unknown {_KIND_NAMES[self.kind]} id {entity_id}")
        return self.vectors[row]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(struct.pack("<BIQ", self.kind, self.dim, len(self.ids)))
            for i, row in zip(self.ids, self.vectors):
                fh.write(struct.pack("<Q", int(i)))
                fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            if fh.read(4) != EMB_MAGIC:
                raise ValueError(f"{path}: not an embedding file (bad magic)")
            kind, dim, count = struct.unpack("<BIQ", fh.read(13))
            ids = np.empty(count, dtype=np.uint64)
            vectors = np.empty((count, dim), dtype=np.float32)
            for r in range(count):
                (ids[r],) = struct.unpack("<Q", fh.read(8))
                vectors[r] = np.frombuffer(fh.read(4 * dim), dtype="<f4")
        return cls(kind, dim, ids, vectors)


def export_embeddings(params: ModelParams, user_histories: dict[int, UserHistory],
                      titles: dict[int, str], tokenize_fn,
                      batch_size: int = 64) -> tuple[EmbeddingTable, EmbeddingTable]:
    """Compute every user and item embedding with the frozen model.

    Histories must already obey the serving delay rule (the exporter does
    not re-filter). Deterministic given checkpoint and inputs.
    """
    cfg = params.config
    user_ids = sorted(user_histories)
    user_vecs = np.empty((len(user_ids), cfg.d), dtype=np.float32)
    with no_grad():
        for lo in range(0, len(user_ids), batch_size):
            chunk = user_ids[lo: lo + batch_size]
            histories = [user_histories[u].truncated(cfg.max_history) for u in chunk]
            hb = batch_histories(histories, tokenize_fn, cfg)
            user_vecs[lo: lo + len(chunk)] = user_tower_forward_batch(hb, params).data

        item_ids = sorted(titles)
        embedder = TitleEmbedder(titles, tokenize_fn)
        item_vecs = np.empty((len(item_ids), cfg.d), dtype=np.float32)
        for lo in range(0, len(item_ids), batch_size):
            chunk = item_ids[lo: lo + batch_size]
            ids, mask = embedder.batch(chunk)
            emb = item_tower_forward_batch(content_embed_batch(ids, mask, params), params)
            item_vecs[lo: lo + len(chunk)] = emb.data

    users = EmbeddingTable(KIND_USER, cfg.d, np.array(user_ids), user_vecs)
    items = EmbeddingTable(KIND_ITEM, cfg.d, np.array(item_ids), item_vecs)
    return users, items


def score(user_id: int, item_ids, users: EmbeddingTable, items: EmbeddingTable):
    """Inner products of stored vectors, in input order.

    Returns a list of (item_id, score-or-None, error-or-None); missing ids
    produce an error entry without aborting the batch.
    """
    u = users.vector(user_id).astype(np.float64)
    out = []
    for item_id in item_ids:
        try:
            v = items.vector(item_id).astype(np.float64)
        except KeyError as exc:
            out.append((item_id, None, str(exc)))
            continue
        out.append((item_id, float(u @ v), None))
    return out
