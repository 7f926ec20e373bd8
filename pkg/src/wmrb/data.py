"""
Implicit-feedback interaction and feature storage.

Interactions are binary: a user either interacted with an item or did not.
Per-user item lists are kept in CSR form (``indptr``/``indices``) with
strictly increasing item ids inside each row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DataError",
    "ParseError",
    "BoundsError",
    "InteractionDataset",
    "FeatureMatrix",
    "DatasetManifest",
    "load_manifest",
    "load_interactions",
    "save_interactions",
    "load_features",
    "identity_features",
    "split_interactions",
    "popularity_counts",
    "popularity_ranking",
    "check_counts",
]


class DataError(Exception):
    """Base class for problems with input data."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class BoundsError(DataError):
    pass


def _csr_from_pairs(rows, cols, num_rows):
    """Build deduplicated, sorted CSR arrays from (row, col) id pairs."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size:
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        keep = np.ones(rows.size, dtype=bool)
        keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        rows, cols = rows[keep], cols[keep]
    indptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_rows), out=indptr[1:])
    return indptr, cols.astype(np.int32)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """
    Per-user implicit feedback with a train/test partition.

    ``train_indptr``/``train_indices`` (and the ``test_`` pair) are CSR arrays
    over users; row ``u`` lists the items user ``u`` interacted with, sorted
    and without duplicates.  Users with no interactions still occupy id space.
    """

    num_users: int
    num_items: int
    train_indptr: np.ndarray
    train_indices: np.ndarray
    test_indptr: np.ndarray = field(default=None)
    test_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.test_indptr is None:
            object.__setattr__(self, "test_indptr", np.zeros(self.num_users + 1, dtype=np.int64))
            object.__setattr__(self, "test_indices", np.zeros(0, dtype=np.int32))
        for name in ("train_indptr", "train_indices", "test_indptr", "test_indices"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_pairs(cls, users, items, num_users, num_items, test_users=(), test_items=()):
        tr_ptr, tr_idx = _csr_from_pairs(users, items, num_users)
        te_ptr, te_idx = _csr_from_pairs(test_users, test_items, num_users)
        return cls(num_users, num_items, tr_ptr, tr_idx, te_ptr, te_idx)

    def train_items(self, user: int) -> np.ndarray:
        return self.train_indices[self.train_indptr[user] : self.train_indptr[user + 1]]

    def test_items(self, user: int) -> np.ndarray:
        return self.test_indices[self.test_indptr[user] : self.test_indptr[user + 1]]

    @property
    def num_train(self) -> int:
        return int(self.train_indices.size)

    @property
    def num_test(self) -> int:
        return int(self.test_indices.size)

    def train_pairs(self):
        """All training interactions as ``(users, items)`` arrays in CSR order."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int32), np.diff(self.train_indptr))
        return users, self.train_indices.copy()

    def test_pairs(self):
        users = np.repeat(np.arange(self.num_users, dtype=np.int32), np.diff(self.test_indptr))
        return users, self.test_indices.copy()

    def train_matrix(self) -> sp.csr_matrix:
        data = np.ones(self.num_train, dtype=np.float32)
        return sp.csr_matrix(
            (data, self.train_indices, self.train_indptr), shape=(self.num_users, self.num_items)
        )

    def is_train_member(self, users, items) -> np.ndarray:
        """Vectorised membership test of ``(users, items)`` in the train lists.

        ``users`` and ``items`` broadcast against each other.
        """
        users, items = np.broadcast_arrays(np.asarray(users, np.int64), np.asarray(items, np.int64))
        keys = self._train_keys()
        query = users * self.num_items + items
        pos = np.searchsorted(keys, query)
        pos = np.minimum(pos, max(keys.size - 1, 0))
        if keys.size == 0:
            return np.zeros(query.shape, dtype=bool)
        return keys[pos] == query

    def _train_keys(self):
        keys = self.__dict__.get("_keys")
        if keys is None:
            users, items = self.train_pairs()
            keys = users.astype(np.int64) * self.num_items + items
            object.__setattr__(self, "_keys", keys)
        return keys

    def check(self):
        """Validate the structural invariants; raises :class:`DataError`."""
        for name in ("train", "test"):
            ptr = getattr(self, f"{name}_indptr")
            idx = getattr(self, f"{name}_indices")
            if ptr.size != self.num_users + 1 or ptr[-1] != idx.size:
                raise DataError(f"{name} indptr inconsistent with indices")
            if idx.size and (idx.min() < 0 or idx.max() >= self.num_items):
                raise BoundsError(f"{name} item id out of range")
            for u in range(self.num_users):
                row = idx[ptr[u] : ptr[u + 1]]
                if row.size > 1 and np.any(np.diff(row) <= 0):
                    raise DataError(f"{name} list of user {u} not strictly increasing")
        for u in range(self.num_users):
            if np.intersect1d(self.train_items(u), self.test_items(u)).size:
                raise DataError(f"train and test overlap for user {u}")

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.train_indptr, other.train_indptr)
            and np.array_equal(self.train_indices, other.train_indices)
            and np.array_equal(self.test_indptr, other.test_indptr)
            and np.array_equal(self.test_indices, other.test_indices)
        )


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """
    Sparse entity x feature weights.

    An entity's latent representation is the weighted sum of its features'
    embeddings.  Identity matrices reduce the model to plain matrix
    factorization.
    """

    num_entities: int
    num_features: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        counts = np.diff(self.indptr)
        if counts.size != self.num_entities:
            raise DataError("feature indptr does not match entity count")
        if self.num_entities and counts.min() < 1:
            missing = int(np.flatnonzero(counts < 1)[0])
            raise DataError(f"entity {missing} has no features")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.num_features):
            raise BoundsError("feature id out of range")
        for name in ("indptr", "indices", "data"):
            getattr(self, name).setflags(write=False)

    def row(self, entity: int):
        lo, hi = self.indptr[entity], self.indptr[entity + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.num_entities, self.num_features)
        )

    @cached_property
    def csr64(self) -> sp.csr_matrix:
        """float64 CSR copy, built once and shared; treat as read-only."""
        return self.to_csr().astype(np.float64)

    @property
    def is_identity(self) -> bool:
        return (
            self.num_features == self.num_entities
            and self.indices.size == self.num_entities
            and np.array_equal(self.indices, np.arange(self.num_entities))
            and bool(np.all(self.data == 1))
        )

    @classmethod
    def from_triples(cls, entities, features, weights, num_entities, num_features=None):
        entities = np.asarray(entities, dtype=np.int64)
        features = np.asarray(features, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float32)
        if num_features is None:
            num_features = int(features.max()) + 1 if features.size else 0
        mat = sp.coo_matrix(
            (weights, (entities, features)), shape=(num_entities, num_features)
        ).tocsr()
        # duplicates are summed by tocsr; keep explicit zeros out
        mat.eliminate_zeros()
        mat.sort_indices()
        return cls(
            num_entities,
            num_features,
            mat.indptr.astype(np.int64),
            mat.indices.astype(np.int32),
            mat.data.astype(np.float32),
        )


def identity_features(num_entities: int) -> FeatureMatrix:
    return FeatureMatrix(
        num_entities,
        num_entities,
        np.arange(num_entities + 1, dtype=np.int64),
        np.arange(num_entities, dtype=np.int32),
        np.ones(num_entities, dtype=np.float32),
    )


@dataclass(frozen=True)
class DatasetManifest:
    interactions: Path
    num_users: int
    num_items: int
    test_fraction: float = 0.2
    seed: int = 0
    user_features: Path | None = None
    item_features: Path | None = None
    identity_features: bool = True

    _KEYS = frozenset(
        (
            "interactions",
            "user_features",
            "item_features",
            "num_users",
            "num_items",
            "test_fraction",
            "seed",
            "identity_features",
        )
    )

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise DataError("num_users and num_items must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def load_manifest(path) -> DatasetManifest:
    """Read a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise DataError("manifest must be a JSON object")
    unknown = set(raw) - DatasetManifest._KEYS
    if unknown:
        raise DataError(f"unknown manifest keys: {sorted(unknown)}")
    for key in ("interactions", "num_users", "num_items"):
        if key not in raw:
            raise DataError(f"manifest missing key {key!r}")

    base = path.parent

    def resolve(p):
        return None if p is None else (base / p).resolve()

    return DatasetManifest(
        interactions=resolve(raw["interactions"]),
        num_users=int(raw["num_users"]),
        num_items=int(raw["num_items"]),
        test_fraction=float(raw.get("test_fraction", 0.2)),
        seed=int(raw.get("seed", 0)),
        user_features=resolve(raw.get("user_features")),
        item_features=resolve(raw.get("item_features")),
        identity_features=bool(raw.get("identity_features", True)),
    )


def _read_columns(path, ncols, types):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    cols = [[] for _ in range(ncols)]
    with open(path, "r", newline="\n") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < ncols:
                raise ParseError(path, lineno, f"expected {ncols} tab-separated fields")
            for j in range(ncols):
                tok = parts[j]
                try:
                    if types[j] is int:
                        if not tok.isdigit():
                            raise ValueError(tok)
                        cols[j].append(int(tok))
                    else:
                        cols[j].append(float(tok))
                except ValueError:
                    raise ParseError(path, lineno, f"bad value {tok!r} in field {j + 1}") from None
    return cols


def load_interactions(path, manifest=None, num_users=None, num_items=None) -> InteractionDataset:
    """
    Read a ``user<TAB>item`` file into a dataset with everything in train.

    Bounds come from ``manifest`` or the explicit counts.  Extra columns
    (e.g. weights) are ignored; duplicate rows collapse.
    """
    if manifest is not None:
        num_users, num_items = manifest.num_users, manifest.num_items
    users, items = _read_columns(path, 2, (int, int))
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if num_users is None:
        num_users = int(users.max()) + 1 if users.size else 0
    if num_items is None:
        num_items = int(items.max()) + 1 if items.size else 0
    if users.size and users.max() >= num_users:
        raise BoundsError(f"user id {int(users.max())} >= declared num_users {num_users}")
    if items.size and items.max() >= num_items:
        raise BoundsError(f"item id {int(items.max())} >= declared num_items {num_items}")
    return InteractionDataset.from_pairs(users, items, num_users, num_items)


def save_interactions(dataset: InteractionDataset, path, split="train"):
    users, items = dataset.train_pairs() if split == "train" else dataset.test_pairs()
    with open(path, "w", newline="\n") as f:
        for u, i in zip(users.tolist(), items.tolist()):
            f.write(f"{u}\t{i}\n")


def load_features(path, num_entities: int, identity: bool = True) -> FeatureMatrix:
    """
    Read ``entity<TAB>feature<TAB>weight`` rows.

    With ``identity`` the result starts with one indicator feature per
    entity and the file's feature ids are shifted past that block.
    """
    ents, feats, weights = _read_columns(path, 3, (int, int, float))
    ents = np.asarray(ents, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if ents.size and ents.max() >= num_entities:
        raise BoundsError(f"entity id {int(ents.max())} >= {num_entities}")
    num_file_features = int(feats.max()) + 1 if feats.size else 0
    if identity:
        eye = np.arange(num_entities)
        ents = np.concatenate([eye, ents])
        feats = np.concatenate([eye, feats + num_entities])
        weights = np.concatenate([np.ones(num_entities), weights])
        num_features = num_entities + num_file_features
    else:
        num_features = num_file_features
    return FeatureMatrix.from_triples(ents, feats, weights, num_entities, num_features)


def split_interactions(dataset: InteractionDataset, fraction: float, seed: int) -> InteractionDataset:
    """
    Per-user random split moving ``fraction`` of each user's items to test.

    Every user with at least two interactions keeps at least one train item
    and (for a positive fraction) gets at least one test item.  Existing test
    items are merged back in before splitting.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    tr_u, tr_i, te_u, te_i = [], [], [], []
    for u in range(dataset.num_users):
        items = np.union1d(dataset.train_items(u), dataset.test_items(u))
        n = items.size
        if n == 0:
            continue
        if n == 1:
            n_test = 0
        else:
            n_test = min(max(int(round(fraction * n)), 1), n - 1)
        perm = rng.permutation(n)
        test = items[perm[:n_test]]
        train = items[perm[n_test:]]
        tr_u.append(np.full(train.size, u))
        tr_i.append(train)
        te_u.append(np.full(test.size, u))
        te_i.append(test)

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    return InteractionDataset.from_pairs(
        cat(tr_u), cat(tr_i), dataset.num_users, dataset.num_items, cat(te_u), cat(te_i)
    )


def popularity_counts(dataset: InteractionDataset) -> np.ndarray:
    return np.bincount(dataset.train_indices, minlength=dataset.num_items)


def popularity_ranking(dataset: InteractionDataset) -> np.ndarray:
    """All item ids by descending train count, ties by ascending id."""
    counts = popularity_counts(dataset)
    return np.argsort(-counts, kind="stable")


def check_counts(num_users: int, num_items: int, num_train: int, num_test: int):
    """Check that interaction totals can fit a ``num_users x num_items`` matrix."""
    if min(num_users, num_items) < 1:
        raise DataError("user and item counts must be positive")
    if min(num_train, num_test) < 0:
        raise DataError("interaction counts must be non-negative")
    if num_train + num_test > num_users * num_items:
        raise DataError(
            f"{num_train + num_test} interactions exceed {num_users} x {num_items} matrix"
        )
    if num_train == 0:
        raise DataError("no training interactions")
