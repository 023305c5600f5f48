"""Token inventory for graph node labels."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .astgraph import CLS_TOKEN, CellGraph, tokenize_markdown

UNK_TOKEN = "[UNK]"
PAD_TOKEN = "[PAD]"
RESERVED = (CLS_TOKEN, UNK_TOKEN, PAD_TOKEN)
CLS_ID, UNK_ID, PAD_ID = 0, 1, 2

__all__ = [
    "Vocabulary", "EncodedGraph", "build_vocabulary", "encode_graph", "tokenize_markdown",
    "CLS_ID", "UNK_ID", "PAD_ID",
]


class Vocabulary:
    """Frozen token -> id map. Ids 0, 1, 2 are [CLS], [UNK], [PAD]."""

    def __init__(self, tokens: Iterable[str], min_count: int = 1):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens [CLS], [UNK], [PAD]")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self._tokens)}
        self.min_count = min_count

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens and self.min_count == other.min_count

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def to_json(self) -> dict:
        return {"tokens": list(self._tokens), "min_count": self.min_count}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, separators=(",", ":"))

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path, meta: dict | None = None) -> None:
        obj = {"_meta": meta, **self.to_json()} if meta else self.to_json()
        text = json.dumps(obj, ensure_ascii=False, separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(obj["tokens"], obj.get("min_count", 1))


def build_vocabulary(graphs: Iterable[CellGraph], min_count: int = 2) -> Vocabulary:
    """Count node labels and keep those seen at least ``min_count`` times.

    Tokens are ordered by descending count, ties broken lexicographically, so
    the same corpus always yields the same ids.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for graph in graphs:
        counts.update(graph.labels)
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, min_count)


@dataclass
class EncodedGraph:
    token_ids: np.ndarray
    adjacency_with_self: np.ndarray
    cell_id: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.token_ids)


def encode_graph(graph: CellGraph, vocab: Vocabulary, cell_id: str = "") -> EncodedGraph:
    ids = np.fromiter((vocab.id_of(lab) for lab in graph.labels), dtype=np.int64, count=graph.n_nodes)
    return EncodedGraph(ids, graph.adjacency_with_self.copy(), cell_id)
