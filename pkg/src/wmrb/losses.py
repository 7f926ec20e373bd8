"""
Rank-based losses on model scores.

Everything here works on already-computed scores; turning score gradients
into parameter gradients is the trainer's job.  A "violation" is an
irrelevant item whose score comes within the unit margin of the positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "OwaWeights",
    "LossBatch",
    "LossOutput",
    "WarpSample",
    "count_violations",
    "exact_rank",
    "warp_sample_rank",
    "warp_estimate",
    "owa_phi",
    "warp_pair_loss",
    "margin_rank",
    "wmrb_loss",
    "wmrb_loss_grad",
    "wmrb_grad",
    "ce_loss",
]

MARGIN = 1.0


class OwaWeights:
    """
    Non-increasing, non-negative rank weights ``alpha_1 >= alpha_2 >= ... >= 0``.

    ``harmonic`` uses ``alpha_j = 1/j``; ``top1`` puts all weight on the first
    rank; ``uniform`` weighs every rank equally (mean-rank optimisation).
    A custom finite sequence can be supplied via :meth:`from_alphas`; ranks
    past its end get weight zero.
    """

    GENERATORS = ("harmonic", "top1", "uniform")

    def __init__(self, kind: str = "harmonic"):
        if kind not in self.GENERATORS and kind != "custom":
            raise ValueError(f"unknown OWA generator {kind!r}; expected one of {self.GENERATORS}")
        self.kind = kind
        self._alphas = np.zeros(0)
        self._phi = np.zeros(1)

    @classmethod
    def from_alphas(cls, alphas) -> "OwaWeights":
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1:
            raise ValueError("alphas must be one-dimensional")
        if np.any(alphas < 0) or not np.all(np.isfinite(alphas)):
            raise ValueError("alphas must be finite and non-negative")
        if np.any(np.diff(alphas) > 0):
            raise ValueError("alphas must be non-increasing")
        w = cls("custom")
        w._alphas = alphas
        w._phi = np.concatenate([[0.0], np.cumsum(alphas)])
        return w

    def _generate(self, n):
        j = np.arange(1, n + 1, dtype=np.float64)
        if self.kind == "harmonic":
            return 1.0 / j
        if self.kind == "top1":
            return (j == 1).astype(np.float64)
        if self.kind == "uniform":
            return np.ones(n)
        return np.zeros(n)

    def _ensure(self, n):
        if self.kind == "custom" or self._alphas.size >= n:
            return
        self._alphas = self._generate(max(n, 2 * self._alphas.size))
        self._phi = np.concatenate([[0.0], np.cumsum(self._alphas)])

    def alphas(self, n: int) -> np.ndarray:
        self._ensure(n)
        out = np.zeros(n)
        m = min(n, self._alphas.size)
        out[:m] = self._alphas[:m]
        return out

    def phi_table(self, n: int) -> np.ndarray:
        """``Phi(r)`` for ``r = 0 .. n-1``."""
        self._ensure(n - 1)
        out = np.empty(n)
        m = min(n, self._phi.size)
        out[:m] = self._phi[:m]
        out[m:] = self._phi[-1]
        return out

    def __repr__(self):
        return f"OwaWeights({self.kind!r})"


def owa_phi(weights: OwaWeights, r: int) -> float:
    """Partial sum ``alpha_1 + ... + alpha_r``; zero for ``r == 0``."""
    if r < 0:
        raise ValueError("rank must be non-negative")
    return float(weights.phi_table(r + 1)[r])


@dataclass(frozen=True)
class LossBatch:
    """
    Mini-batch of ``(user, positive)`` pairs sharing one candidate set.

    ``relevant[b, j]`` is true when candidate ``j`` is among the items user
    ``users[b]`` interacted with; those candidates never act as negatives.
    """

    users: np.ndarray
    positives: np.ndarray
    candidates: np.ndarray
    relevant: np.ndarray
    num_items: int

    def __post_init__(self):
        if self.relevant.shape != (self.users.size, self.candidates.size):
            raise ValueError("relevance mask must be pairs x candidates")
        if np.unique(self.candidates).size != self.candidates.size:
            raise ValueError("candidate ids must be unique")

    @property
    def scale(self) -> float:
        return self.num_items / self.candidates.size


class LossOutput(NamedTuple):
    """Loss plus its gradient with respect to each involved score.

    For batch losses ``loss`` and the gradients are per pair (not averaged).
    """

    loss: np.ndarray | float
    grad_pos: np.ndarray | float
    grad_candidates: np.ndarray | float


class WarpSample(NamedTuple):
    trials: int
    est_rank: int
    violator: int
    violator_score: float


def count_violations(pos_score, other_scores, irrelevant, margin=0.0) -> int:
    """Irrelevant items scoring at least ``pos_score - margin``."""
    other = np.asarray(other_scores, dtype=np.float64)
    mask = np.asarray(irrelevant, dtype=bool)
    return int(np.count_nonzero(mask & (pos_score - margin <= other)))


def exact_rank(pos_score, other_scores, irrelevant) -> int:
    """Number of irrelevant items with score ``>= pos_score`` (ties count)."""
    return count_violations(pos_score, other_scores, irrelevant)


def warp_estimate(num_items: int, trials: int) -> int:
    return (num_items - 1) // trials


def warp_sample_rank(
    pos_score: float,
    score_fn: Callable[[int], float],
    num_items: int,
    rng: np.random.Generator,
    max_trials: int | None = None,
    relevant=(),
) -> WarpSample | None:
    """
    Draw items uniformly with replacement until one violates the margin.

    Draws that land on ``relevant`` items are rejected without counting as a
    trial.  Returns ``None`` if no violator turns up within ``max_trials``
    trials (default ``num_items - 1``).
    """
    if max_trials is None:
        max_trials = num_items - 1
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    relevant = frozenset(int(i) for i in relevant)
    if len(relevant) >= num_items:
        return None
    trials = 0
    while trials < max_trials:
        item = int(rng.integers(num_items))
        if item in relevant:
            continue
        trials += 1
        s = float(score_fn(item))
        if MARGIN + s > pos_score:
            return WarpSample(trials, warp_estimate(num_items, trials), item, s)
    return None


def warp_pair_loss(pos_score, violator_score, est_rank, weights: OwaWeights) -> LossOutput:
    """OWA-weighted hinge on one (positive, violator) pair."""
    phi = owa_phi(weights, est_rank)
    hinge = MARGIN - pos_score + violator_score
    if hinge <= 0 or phi == 0:
        return LossOutput(0.0, 0.0, 0.0)
    return LossOutput(phi * hinge, -phi, phi)


def _hinges(batch: LossBatch, pos_scores, candidate_scores):
    pos = np.asarray(pos_scores, dtype=np.float64)
    cand = np.asarray(candidate_scores, dtype=np.float64)
    h = MARGIN - pos[:, None] + cand
    return np.where(~batch.relevant & (h > 0), h, 0.0)


def margin_rank(batch: LossBatch, pos_scores, candidate_scores) -> np.ndarray:
    """Scaled sum of margin violations over irrelevant candidates, per pair."""
    return batch.scale * _hinges(batch, pos_scores, candidate_scores).sum(axis=1)


def wmrb_loss(r):
    return np.log1p(r)


def wmrb_loss_grad(r):
    return 1.0 / (1.0 + np.asarray(r, dtype=np.float64))


def wmrb_grad(batch: LossBatch, pos_scores, candidate_scores) -> LossOutput:
    """Per-pair ``log(1 + margin_rank)`` and its score gradients."""
    h = _hinges(batch, pos_scores, candidate_scores)
    r = batch.scale * h.sum(axis=1)
    coef = batch.scale * wmrb_loss_grad(r)
    g_cand = np.where(h > 0, coef[:, None], 0.0)
    g_pos = -g_cand.sum(axis=1)
    return LossOutput(wmrb_loss(r), g_pos, g_cand)


def ce_loss(batch: LossBatch, pos_scores, candidate_scores) -> LossOutput:
    """
    Sampled softmax cross-entropy of the positive against irrelevant candidates.

    Relevant candidates (including the positive itself) are masked out of the
    partition function.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    cand = np.asarray(candidate_scores, dtype=np.float64)
    keep = ~batch.relevant
    top = np.maximum(pos, np.max(np.where(keep, cand, -np.inf), axis=1, initial=-np.inf))
    e_pos = np.exp(pos - top)
    e_cand = np.where(keep, np.exp(np.where(keep, cand, 0.0) - top[:, None]), 0.0)
    z = e_pos + e_cand.sum(axis=1)
    loss = -pos + top + np.log(z)
    return LossOutput(loss, e_pos / z - 1.0, e_cand / z[:, None])

