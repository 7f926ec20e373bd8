"""
Hybrid feature-embedding scorer.

Users and items are represented by the weighted sum of their features'
embeddings and biases; the score of item ``i`` for user ``u`` is
``<u_vec, i_vec> + u_bias + i_bias``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import FeatureMatrix

__all__ = [
    "ConfigError",
    "ModelFormatError",
    "ModelShapeError",
    "ModelParams",
    "UserRepresentation",
    "init_params",
    "user_repr",
    "item_repr",
    "entity_reprs",
    "score",
    "score_batch",
    "save_model",
    "load_model",
    "MAGIC",
]

MAGIC = b"WMRBMDL1"
_MAGIC_STEM = MAGIC[:-1]


class ConfigError(ValueError):
    pass


class ModelFormatError(Exception):
    pass


class ModelShapeError(ModelFormatError):
    pass


@dataclass(eq=False)
class ModelParams:
    """Feature embeddings and biases.

    Stored as float32 for training; float64 copies (``astype``) serve as a
    shadow for gradient checks.
    """

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    user_biases: np.ndarray
    item_biases: np.ndarray

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def num_user_features(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def num_item_features(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dtype(self):
        return self.user_embeddings.dtype

    def arrays(self):
        return (self.user_embeddings, self.item_embeddings, self.user_biases, self.item_biases)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(*(np.array(a, dtype=dtype) for a in self.arrays()))

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.arrays())

    def check_compatible(self, user_features: FeatureMatrix, item_features: FeatureMatrix):
        if user_features.num_features != self.num_user_features:
            raise ModelShapeError(
                f"model has {self.num_user_features} user features, data has {user_features.num_features}"
            )
        if item_features.num_features != self.num_item_features:
            raise ModelShapeError(
                f"model has {self.num_item_features} item features, data has {item_features.num_features}"
            )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


class UserRepresentation(NamedTuple):
    vector: np.ndarray
    bias: float


def init_params(dim, num_user_features, num_item_features, seed=0, scale=0.05, dtype=np.float32):
    """Uniform ``[-scale, scale]`` embeddings and zero biases."""
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    if num_user_features < 1 or num_item_features < 1:
        raise ConfigError("feature counts must be >= 1")
    if scale < 0:
        raise ConfigError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-scale, scale, size=(num_user_features, dim))
    i = rng.uniform(-scale, scale, size=(num_item_features, dim))
    return ModelParams(
        u.astype(dtype),
        i.astype(dtype),
        np.zeros(num_user_features, dtype=dtype),
        np.zeros(num_item_features, dtype=dtype),
    )


def _combine(embeddings, biases, feature_ids, weights):
    w = np.asarray(weights, dtype=np.float64)
    vec = w @ embeddings[feature_ids].astype(np.float64)
    bias = float(w @ biases[feature_ids].astype(np.float64))
    return vec, bias


def user_repr(params: ModelParams, features: FeatureMatrix, user: int) -> UserRepresentation:
    ids, w = features.row(user)
    vec, bias = _combine(params.user_embeddings, params.user_biases, ids, w)
    return UserRepresentation(vec, bias)


def item_repr(params: ModelParams, features: FeatureMatrix, item: int) -> UserRepresentation:
    ids, w = features.row(item)
    vec, bias = _combine(params.item_embeddings, params.item_biases, ids, w)
    return UserRepresentation(vec, bias)


def entity_reprs(embeddings, biases, features: FeatureMatrix, entities=None):
    """Representations for many entities at once, in float64.

    Returns ``(vectors, biases)`` with one row per requested entity.
    """
    csr = features.csr64
    if entities is not None:
        csr = csr[np.asarray(entities)]
    vecs = np.asarray(csr @ embeddings.astype(np.float64))
    b = np.asarray(csr @ biases.astype(np.float64))
    return vecs, b


def _scores(user: UserRepresentation, item_vecs, item_biases):
    # one kernel for single and batch scoring keeps both bitwise identical
    u = np.asarray(user.vector, dtype=np.float64)
    dots = np.einsum("ij,j->i", np.asarray(item_vecs, dtype=np.float64), u)
    return dots + user.bias + np.asarray(item_biases, dtype=np.float64)


def score(params, item_features, user: UserRepresentation, item: int) -> float:
    r = item_repr(params, item_features, item)
    return float(_scores(user, r.vector[None, :], np.array([r.bias]))[0])


def score_batch(params, item_features, user: UserRepresentation, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    vecs = np.empty((items.size, params.dim))
    biases = np.empty(items.size)
    for j, item in enumerate(items):
        r = item_repr(params, item_features, int(item))
        vecs[j] = r.vector
        biases[j] = r.bias
    return _scores(user, vecs, biases)


def save_model(params: ModelParams, path):
    header = json.dumps(
        {
            "dim": params.dim,
            "num_user_features": params.num_user_features,
            "num_item_features": params.num_item_features,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path, dim=None, num_user_features=None, num_item_features=None) -> ModelParams:
    """Load a model file, optionally checking it against expected shapes."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise ModelFormatError("model file truncated")
    magic = blob[: len(MAGIC)]
    if magic != MAGIC:
        if magic[:-1] == _MAGIC_STEM:
            raise ModelFormatError(
                f"unsupported model format version {magic[-1:].decode(errors='replace')!r}"
            )
        raise ModelFormatError("not a model file (bad magic bytes)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start : start + hlen])
        d = int(header["dim"])
        nu = int(header["num_user_features"])
        ni = int(header["num_item_features"])
    except (ValueError, KeyError, TypeError):
        raise ModelFormatError("corrupt model header") from None

    for name, want, got in (
        ("dim", dim, d),
        ("num_user_features", num_user_features, nu),
        ("num_item_features", num_item_features, ni),
    ):
        if want is not None and want != got:
            raise ModelShapeError(f"{name}: file has {got}, expected {want}")

    sizes = [nu * d, ni * d, nu, ni]
    offset = start + hlen
    if len(blob) != offset + 4 * sum(sizes):
        raise ModelFormatError(
            f"model file truncated or padded: {len(blob) - offset} payload bytes, "
            f"expected {4 * sum(sizes)}"
        )
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float32))
        offset += 4 * n
    return ModelParams(arrays[0].reshape(nu, d), arrays[1].reshape(ni, d), arrays[2], arrays[3])
