"""Core containers (feature tables, weight matrices) and episode sampling.

All containers are immutable after construction (their arrays are marked
read-only), so they can be shared freely across threads.  Episode sampling
uses the counter-based Philox4x64 generator: ``rng_stream(seed, stream)``
returns an independent substream for any (seed, stream) pair, so the same
seed reproduces the same episode in any run or process layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x64 generator keyed by ``seed``; ``stream`` jumps to an
    independent substream (2^128 steps apart)."""
    bits = np.random.Philox(key=seed)
    if stream:
        bits = bits.jumped(stream)
    return np.random.Generator(bits)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy() if not arr.flags.owndata else arr
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureTable:
    """N feature vectors (rows) with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be a vector with one entry per feature row")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    def take(self, idx) -> "FeatureTable":
        return FeatureTable(self.features[idx], self.labels[idx])

    def class_rows(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True)
class WeightMatrix:
    """C softmax weight row-vectors with the class id of each row."""

    rows: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        ids = np.ascontiguousarray(self.class_ids, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"rows must be a non-empty 2-D matrix, got shape {rows.shape}")
        if ids.shape != (rows.shape[0],):
            raise ValueError("class_ids must map one id to each row")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("class_ids must be distinct")
        if not np.all(np.isfinite(rows)):
            raise ValueError("weight rows contain non-finite entries")
        object.__setattr__(self, "rows", _freeze(rows))
        object.__setattr__(self, "class_ids", _freeze(ids))

    @property
    def n_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint base/novel class id sets."""

    base_ids: frozenset = field()
    novel_ids: frozenset = field()

    def __post_init__(self):
        base = frozenset(int(c) for c in self.base_ids)
        novel = frozenset(int(c) for c in self.novel_ids)
        if not base or not novel:
            raise ValueError("base_ids and novel_ids must both be non-empty")
        if base & novel:
            raise ValueError(f"base and novel ids overlap: {sorted(base & novel)}")
        object.__setattr__(self, "base_ids", base)
        object.__setattr__(self, "novel_ids", novel)


@dataclass(frozen=True)
class Episode:
    """One way-way k-shot task: support/query tables plus its sampling seed."""

    way: int
    k: int
    n_query: int
    support: FeatureTable
    query: FeatureTable
    episode_class_ids: np.ndarray
    seed_record: int

    def __post_init__(self):
        object.__setattr__(
            self, "episode_class_ids", _freeze(np.asarray(self.episode_class_ids, dtype=np.int64))
        )
        if self.support.n != self.way * self.k:
            raise ValueError("support must hold exactly way*k rows")
        if self.query.n != self.way * self.n_query:
            raise ValueError("query must hold exactly way*n_query rows")


def split_classes(table: FeatureTable, split: ClassSplit) -> tuple[FeatureTable, FeatureTable]:
    """Partition a table into base and novel rows, preserving row order."""
    known = set(int(c) for c in table.class_ids)
    for cid in sorted(split.base_ids | split.novel_ids):
        if cid not in known:
            raise ValueError(f"class id {cid} not present in table")
    base_mask = np.isin(table.labels, sorted(split.base_ids))
    novel_mask = np.isin(table.labels, sorted(split.novel_ids))
    return table.take(base_mask), table.take(novel_mask)


def sample_episode(
    novel: FeatureTable, way: int, k: int, n_query: int, seed: int
) -> Episode:
    """Draw one episode: ``way`` classes uniformly without replacement, then
    ``k + n_query`` distinct examples per class (first k support, rest query).

    A pure function of its inputs and seed.
    """
    ids = novel.class_ids
    if len(ids) < way:
        raise ValueError(f"need {way} classes, table has {len(ids)}")
    rng = rng_stream(seed)
    classes = rng.choice(ids, size=way, replace=False)
    sup_idx, qry_idx = [], []
    for cid in classes:
        rows = novel.class_rows(cid)
        if len(rows) < k + n_query:
            raise ValueError(
                f"class {cid}: need {k + n_query} examples, have {len(rows)}"
            )
        pick = rng.choice(rows, size=k + n_query, replace=False)
        sup_idx.extend(pick[:k])
        qry_idx.extend(pick[k:])
    return Episode(
        way=way,
        k=k,
        n_query=n_query,
        support=novel.take(np.asarray(sup_idx)),
        query=novel.take(np.asarray(qry_idx)),
        episode_class_ids=classes,
        seed_record=seed,
    )
