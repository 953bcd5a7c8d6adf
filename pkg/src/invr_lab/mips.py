"""Exact (and optionally approximate) maximum inner product search.

Results follow one total order everywhere: score descending, then id
ascending. Ties are rare for real-valued embeddings but certain in tests and in
degenerate inputs, and determinism needs a fixed rule.
"""

from __future__ import annotations

import math
from typing import Hashable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, DuplicateId, EmptyIndex, UnknownId


class ScoredId(NamedTuple):
    id: Hashable
    score: float


def _id_ranks(ids: Sequence) -> np.ndarray:
    try:
        order = sorted(range(len(ids)), key=lambda k: ids[k])
    except TypeError:
        order = sorted(range(len(ids)), key=lambda k: (type(ids[k]).__name__, str(ids[k])))
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


class MipsIndex:
    """Frozen id -> vector store answering top-n and rank-of queries."""

    def __init__(self, ids: Sequence, vectors: np.ndarray):
        vectors = np.array(vectors, dtype=np.float64)
        if len(ids) == 0:
            raise EmptyIndex("cannot build an index over zero entries")
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DimensionMismatch("vectors must be a (len(ids), dim) array")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("index vectors must be finite")
        self.ids = list(ids)
        self._row = {}
        for k, i in enumerate(self.ids):
            if i in self._row:
                raise DuplicateId(i)
            self._row[i] = k
        vectors.setflags(write=False)
        self.vectors = vectors
        self._id_rank = _id_ranks(self.ids)
        self._ivf = None

    @classmethod
    def build(cls, entries: Mapping) -> "MipsIndex":
        if not entries:
            raise EmptyIndex("cannot build an index over zero entries")
        ids = list(entries)
        dims = {np.asarray(entries[i]).shape for i in ids}
        if len(dims) != 1:
            raise DimensionMismatch(f"mixed vector shapes {sorted(dims)}")
        return cls(ids, np.array([entries[i] for i in ids], dtype=np.float64))

    @classmethod
    def from_table(cls, table) -> "MipsIndex":
        return cls(table.ids, table.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item):
        return item in self._row

    def _check(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[-1]} != index dim {self.dim}")
        return q

    def scores(self, queries: np.ndarray) -> np.ndarray:
        """Inner products, shape ``(n_queries, size)``; a 1-D query is one row."""
        q = np.atleast_2d(self._check(queries))
        # one matrix-vector product per query, so a query scores the same bits
        # whether it is asked alone or in a batch
        return np.stack([self.vectors @ row for row in q]) if len(q) else np.empty((0, len(self)))

    def _select(self, scores: np.ndarray, n: int, candidates: np.ndarray | None = None) -> np.ndarray:
        """Row positions of the best ``n`` entries of one score row, in order."""
        if candidates is None:
            candidates = np.arange(len(scores))
            sub = scores
        else:
            sub = scores[candidates]
        n = min(n, len(candidates))
        if n <= 0:
            return np.empty(0, dtype=np.int64)
        if n < len(candidates):
            kth = np.partition(sub, len(sub) - n)[len(sub) - n]
            keep = sub >= kth
            candidates, sub = candidates[keep], sub[keep]
        order = np.lexsort((self._id_rank[candidates], -sub))
        return candidates[order[:n]]

    def top_n_rows(self, queries: np.ndarray, n: int):
        """Batched exact search: ``(rows, scores)`` arrays of shape ``(q, min(n, size))``."""
        if n < 0:
            raise ValueError("n must be >= 0")
        s = self.scores(queries)
        m = min(n, len(self))
        rows = np.empty((s.shape[0], m), dtype=np.int64)
        for k in range(s.shape[0]):
            rows[k] = self._select(s[k], m)
        return rows, np.take_along_axis(s, rows, axis=1)

    def top_n(self, query, n: int) -> list[ScoredId]:
        rows, scores = self.top_n_rows(np.atleast_2d(self._check(query)), n)
        return [ScoredId(self.ids[r], float(v)) for r, v in zip(rows[0], scores[0])]

    def rank_of(self, query, target_id) -> int:
        """1-based position of ``target_id`` in the full ordering for ``query``."""
        if target_id not in self._row:
            raise UnknownId(target_id)
        s = self.scores(np.atleast_2d(self._check(query)))[0]
        t = self._row[target_id]
        ahead = (s > s[t]) | ((s == s[t]) & (self._id_rank < self._id_rank[t]))
        return int(ahead.sum()) + 1

    # -- approximate mode -------------------------------------------------

    def _build_ivf(self, seed: int = 0, iters: int = 15):
        n = len(self)
        n_lists = max(1, int(round(math.sqrt(n))))
        rng = np.random.default_rng(seed)
        centroids = self.vectors[rng.choice(n, size=n_lists, replace=False)].copy()
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(iters):
            d2 = ((self.vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
            assign = d2.argmin(axis=1)
            for c in range(n_lists):
                members = self.vectors[assign == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
        lists = [np.flatnonzero(assign == c) for c in range(n_lists)]
        self._ivf = (centroids, lists)

    def default_probe_budget(self, n: int) -> int:
        return max(4 * n, int(math.ceil(0.4 * len(self))))

    def top_n_approx(self, query, n: int, probe_budget: int | None = None) -> list[ScoredId]:
        """Inverted-file search scoring at most ``probe_budget`` entries exactly.

        Cells are visited in order of centroid inner product with the query.
        A budget of at least the index size gives the exact answer.
        """
        q = self._check(query)
        if n <= 0:
            return []
        if probe_budget is None:
            probe_budget = self.default_probe_budget(n)
        if probe_budget >= len(self):
            return self.top_n(q, n)
        if self._ivf is None:
            self._build_ivf()
        centroids, lists = self._ivf
        bound = centroids @ q
        picked, used = [], 0
        for c in np.lexsort((np.arange(len(lists)), -bound)):
            if used >= probe_budget:
                break
            take = lists[c][: probe_budget - used]
            picked.append(take)
            used += len(take)
        candidates = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
        s = np.full(len(self), -np.inf)
        s[candidates] = self.vectors[candidates] @ q
        rows = self._select(s, n, candidates)
        return [ScoredId(self.ids[r], float(s[r])) for r in rows]


def build(entries: Mapping) -> MipsIndex:
    return MipsIndex.build(entries)


def top_n(index: MipsIndex, query, n: int) -> list[ScoredId]:
    return index.top_n(query, n)


def rank_of(index: MipsIndex, query, target_id) -> int:
    return index.rank_of(query, target_id)


def top_n_approx(index: MipsIndex, query, n: int, probe_budget: int | None = None) -> list[ScoredId]:
    return index.top_n_approx(query, n, probe_budget)


def load_index(path) -> MipsIndex:
    from .embedding import load_table

    return MipsIndex.from_table(load_table(path))


def save_index(path, index: MipsIndex) -> None:
    from .embedding import ItemEmbeddingTable, save_table

    save_table(path, ItemEmbeddingTable(index.ids, np.array(index.vectors)))
