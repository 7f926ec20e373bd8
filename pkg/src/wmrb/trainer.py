"""
Epoch loops for online (WARP) and mini-batch (WMRB, CE) training.

All three losses share the same scorer and the same sparse Adagrad update;
only the way score gradients are produced differs.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from ._kernels import get_backend
from .data import DataError, FeatureMatrix, InteractionDataset, identity_features
from .model import ConfigError, ModelParams, entity_reprs, init_params

__all__ = [
    "LOSSES",
    "TrainConfig",
    "EpochStats",
    "TrainReport",
    "AdagradState",
    "DivergedTrainingError",
    "adagrad_step",
    "sample_batch",
    "make_loss_batch",
    "batch_param_gradients",
    "batch_objective",
    "train_warp_epoch",
    "train_batch_epoch",
    "train",
]

_log = logging.getLogger(__name__)

LOSSES = ("warp", "wmrb", "ce")
_BATCH_KIND = {"wmrb": 0, "ce": 1}


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"non-finite parameters after epoch {epoch}")


@dataclass
class TrainConfig:
    loss: str = "wmrb"
    dim: int = 32
    epochs: int = 10
    learning_rate: float = 0.05
    l2: float = 0.0
    batch_size: int = 64
    # None means min(1024, num_items)
    candidate_count: int | None = None
    seed: int = 0
    adagrad_epsilon: float = 1e-8
    init_scale: float = 0.05
    # None means num_items - 1
    max_trials: int | None = None
    owa: str = "harmonic"
    biases: bool = True
    threads: int = 1
    backend: str | None = None

    def candidates_for(self, num_items: int) -> int:
        if self.candidate_count is None:
            return min(1024, num_items)
        return self.candidate_count

    def validate(self, num_items: int | None = None):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; valid options: {', '.join(LOSSES)}")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.adagrad_epsilon > 0:
            raise ConfigError("adagrad_epsilon must be > 0")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.max_trials is not None and self.max_trials < 1:
            raise ConfigError("max_trials must be >= 1")
        if self.owa not in losses.OwaWeights.GENERATORS:
            raise ConfigError(f"unknown owa weights {self.owa!r}")
        if self.candidate_count is not None:
            if self.candidate_count < 1:
                raise ConfigError("candidate_count must be >= 1")
            if num_items is not None and self.candidate_count > num_items:
                raise ConfigError(
                    f"candidate_count {self.candidate_count} exceeds {num_items} items"
                )
        try:
            get_backend(self.backend)
        except ValueError as e:
            raise ConfigError(str(e)) from None


@dataclass
class EpochStats:
    loss: float
    seconds: float
    mean_trials: float | None = None
    pairs: int = 0


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    total_seconds: float = 0.0

    def to_dict(self):
        return {
            "epochs": [
                {"loss": e.loss, "seconds": e.seconds, "mean_trials": e.mean_trials}
                for e in self.epochs
            ],
            "total_seconds": self.total_seconds,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


class AdagradState:
    """Squared-gradient accumulators, one float64 array per parameter array."""

    def __init__(self, params: ModelParams):
        self.user_embeddings = np.zeros(params.user_embeddings.shape)
        self.item_embeddings = np.zeros(params.item_embeddings.shape)
        self.user_biases = np.zeros(params.user_biases.shape)
        self.item_biases = np.zeros(params.item_biases.shape)

    def arrays(self):
        return (self.user_embeddings, self.item_embeddings, self.user_biases, self.item_biases)


def adagrad_step(params: ModelParams, gradients, state: AdagradState, lr, l2=0.0, eps=1e-8,
                 backend=None):
    """
    Dense Adagrad update, in place.

    ``gradients`` holds one array per parameter array (same order as
    :meth:`ModelParams.arrays`).  Coordinates whose gradient (after adding
    ``l2 * theta``) is exactly zero are left untouched.
    """
    kern = get_backend(backend)
    for p, g, acc in zip(params.arrays(), gradients, state.arrays()):
        g = np.ascontiguousarray(g, dtype=np.float64)
        rows = np.arange(p.shape[0], dtype=np.int32)
        if p.ndim == 2:
            kern.adagrad_rows(p, acc, rows, g, lr, l2, eps)
        else:
            kern.adagrad_vector(p, acc, rows, g, lr, l2, eps)


def make_loss_batch(dataset: InteractionDataset, users, positives, candidates) -> losses.LossBatch:
    users = np.asarray(users, dtype=np.int32)
    candidates = np.asarray(candidates, dtype=np.int32)
    relevant = dataset.is_train_member(users[:, None], candidates[None, :])
    return losses.LossBatch(
        users, np.asarray(positives, dtype=np.int32), candidates, relevant, dataset.num_items
    )


def sample_batch(dataset: InteractionDataset, rng, batch_size, candidate_count) -> losses.LossBatch:
    """Pairs drawn uniformly from training interactions plus one shared candidate set."""
    if candidate_count > dataset.num_items:
        raise ConfigError("candidate_count exceeds number of items")
    users, items = dataset.train_pairs()
    idx = rng.integers(users.size, size=batch_size)
    cand = rng.choice(dataset.num_items, size=candidate_count, replace=False)
    return make_loss_batch(dataset, users[idx], items[idx], cand)


def _csr(features: FeatureMatrix):
    return (
        np.ascontiguousarray(features.indptr, dtype=np.int64),
        np.ascontiguousarray(features.indices, dtype=np.int32),
        np.ascontiguousarray(features.data, dtype=np.float32),
    )


def _kernel_batch(kern, kind, params, user_features, item_features, batch, threads=1):
    return kern.batch_gradients(
        kind,
        *_csr(user_features),
        *_csr(item_features),
        params.user_embeddings,
        params.item_embeddings,
        params.user_biases,
        params.item_biases,
        np.ascontiguousarray(batch.users, dtype=np.int32),
        np.ascontiguousarray(batch.positives, dtype=np.int32),
        np.ascontiguousarray(batch.candidates, dtype=np.int32),
        np.ascontiguousarray(batch.relevant, dtype=np.uint8),
        batch.num_items,
        threads,
    )


def batch_param_gradients(params, user_features, item_features, batch, loss="wmrb", backend=None):
    """
    Mean batch loss and its dense gradient with respect to every parameter.

    Returns ``(loss, ModelParams)`` where the gradient arrays are float64.
    """
    kern = get_backend(backend)
    out = _kernel_batch(kern, _BATCH_KIND[loss], params, user_features, item_features, batch)
    per_pair, u_ids, gu, gub, i_ids, gi, gib = out
    n = batch.users.size
    grads = ModelParams(
        np.zeros(params.user_embeddings.shape),
        np.zeros(params.item_embeddings.shape),
        np.zeros(params.user_biases.shape),
        np.zeros(params.item_biases.shape),
    )
    grads.user_embeddings[u_ids] = gu / n
    grads.user_biases[u_ids] = gub / n
    grads.item_embeddings[i_ids] = gi / n
    grads.item_biases[i_ids] = gib / n
    return float(np.mean(per_pair)), grads


def batch_objective(params, user_features, item_features, batch, loss="wmrb") -> float:
    """Mean batch loss computed directly from representations and scores."""
    U, bu = entity_reprs(params.user_embeddings, params.user_biases, user_features, batch.users)
    VP, bp = entity_reprs(params.item_embeddings, params.item_biases, item_features, batch.positives)
    VZ, bz = entity_reprs(params.item_embeddings, params.item_biases, item_features, batch.candidates)
    pos = np.sum(U * VP, axis=1) + bu + bp
    cand = U @ VZ.T + bu[:, None] + bz[None, :]
    if loss == "wmrb":
        per_pair = losses.wmrb_loss(losses.margin_rank(batch, pos, cand))
    else:
        per_pair = losses.ce_loss(batch, pos, cand).loss
    return float(np.mean(per_pair))


def _apply_sparse(kern, params, state, out, n, config):
    _, u_ids, gu, gub, i_ids, gi, gib = out
    lr, l2, eps = config.learning_rate, config.l2, config.adagrad_epsilon
    kern.adagrad_rows(params.user_embeddings, state.user_embeddings, u_ids, gu / n, lr, l2, eps)
    kern.adagrad_rows(params.item_embeddings, state.item_embeddings, i_ids, gi / n, lr, l2, eps)
    if config.biases:
        kern.adagrad_vector(params.user_biases, state.user_biases, u_ids, gub / n, lr, l2, eps)
        kern.adagrad_vector(params.item_biases, state.item_biases, i_ids, gib / n, lr, l2, eps)


def train_batch_epoch(dataset, params, state, config, rng, user_features, item_features,
                      kern=None) -> EpochStats:
    """One shuffled pass over all training pairs in mini-batches (WMRB or CE)."""
    kern = kern or get_backend(config.backend)
    kind = _BATCH_KIND[config.loss]
    users, items = dataset.train_pairs()
    order = rng.permutation(users.size)
    users, items = users[order], items[order]
    n_cand = config.candidates_for(dataset.num_items)
    total, seen = 0.0, 0
    start = time.perf_counter()
    for lo in range(0, users.size, config.batch_size):
        bu, bi = users[lo : lo + config.batch_size], items[lo : lo + config.batch_size]
        cand = rng.choice(dataset.num_items, size=n_cand, replace=False)
        batch = make_loss_batch(dataset, bu, bi, cand)
        out = _kernel_batch(kern, kind, params, user_features, item_features, batch,
                            config.threads)
        _apply_sparse(kern, params, state, out, bu.size, config)
        total += float(np.sum(out[0]))
        seen += bu.size
    return EpochStats(total / max(seen, 1), time.perf_counter() - start, None, seen)


def train_warp_epoch(dataset, params, state, config, rng, user_features, item_features,
                     kern=None) -> EpochStats:
    """One shuffled online pass: per pair, sample a violator and take one step."""
    kern = kern or get_backend(config.backend)
    users, items = dataset.train_pairs()
    order = rng.permutation(users.size)
    users = np.ascontiguousarray(users[order], dtype=np.int32)
    items = np.ascontiguousarray(items[order], dtype=np.int32)
    n = dataset.num_items
    max_trials = config.max_trials if config.max_trials is not None else max(n - 1, 1)
    phi = losses.OwaWeights(config.owa).phi_table(n)
    trials = np.zeros(users.size, dtype=np.int64)
    loss = np.zeros(users.size)
    seed = int(rng.integers(0, 2**63, dtype=np.uint64))
    start = time.perf_counter()
    kern.warp_epoch(
        *_csr(user_features),
        *_csr(item_features),
        params.user_embeddings,
        params.item_embeddings,
        params.user_biases,
        params.item_biases,
        *state.arrays(),
        np.ascontiguousarray(dataset.train_indptr, dtype=np.int64),
        np.ascontiguousarray(dataset.train_indices, dtype=np.int32),
        users,
        items,
        phi,
        config.learning_rate,
        config.l2,
        config.adagrad_epsilon,
        int(max_trials),
        seed,
        bool(config.biases),
        trials,
        loss,
    )
    elapsed = time.perf_counter() - start
    mean = lambda a: float(a.mean()) if a.size else 0.0
    return EpochStats(mean(loss), elapsed, mean(trials), int(users.size))


def train(dataset: InteractionDataset, config: TrainConfig, user_features=None,
          item_features=None, params=None, callback=None):
    """
    Fit a model; returns ``(params, report)``.

    Missing feature matrices default to identity features.  ``params``
    seeds training with existing parameters (copied, not modified).
    ``callback(epoch, params, stats)`` runs after each epoch.
    """
    config.validate(dataset.num_items)
    if dataset.num_train == 0:
        raise DataError("dataset has no training interactions")
    if user_features is None:
        user_features = identity_features(dataset.num_users)
    if item_features is None:
        item_features = identity_features(dataset.num_items)
    if user_features.num_entities != dataset.num_users:
        raise DataError("user feature matrix does not cover all users")
    if item_features.num_entities != dataset.num_items:
        raise DataError("item feature matrix does not cover all items")

    init_seed, train_seed = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_params(
            config.dim,
            user_features.num_features,
            item_features.num_features,
            seed=init_seed,
            scale=config.init_scale,
        )
    else:
        params = params.copy()
        params.check_compatible(user_features, item_features)
    rng = np.random.default_rng(train_seed)
    state = AdagradState(params)
    kern = get_backend(config.backend)
    epoch_fn = train_warp_epoch if config.loss == "warp" else train_batch_epoch

    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        stats = epoch_fn(dataset, params, state, config, rng, user_features, item_features, kern)
        if not params.is_finite():
            raise DivergedTrainingError(epoch + 1)
        report.epochs.append(stats)
        _log.info("epoch %d: loss %.5f (%.2fs)", epoch + 1, stats.loss, stats.seconds)
        if callback is not None:
            callback(epoch + 1, params, stats)
    report.total_seconds = time.perf_counter() - t0
    return params, report
