"""
Bias and variance of rank estimators.

Two estimators of an item's rank ``r`` among ``N`` items are compared:

* online: draw items with replacement until the first violator, at trial
  ``k``; estimate ``floor((N - 1) / k)``.  ``k`` is geometric with success
  probability ``p = r / N``; giving up after ``max_trials`` yields 0.
* sampled batch: draw ``|Z| = round(q N)`` items without replacement and
  scale the number of violators among them by ``N / |Z|``.  The violator
  count is hypergeometric, so the estimate is unbiased.

Closed forms and Monte Carlo are both provided and expected to agree.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

__all__ = [
    "Moments",
    "EstimatorStats",
    "online_estimator_moments",
    "online_normalized_mean",
    "online_normalized_mean_limit",
    "batch_sample_size",
    "batch_estimator_moments",
    "batch_estimator_moments_from_values",
    "online_estimator_samples",
    "batch_estimator_samples",
    "std_standard_error",
    "default_p_grid",
    "simulate_estimators",
    "DEFAULT_N",
    "DEFAULT_Q",
]

DEFAULT_N = 100_000
DEFAULT_Q = (0.001, 0.01, 0.1)


class Moments(NamedTuple):
    mean: float
    std: float
    # fourth central moment; used for the standard error of a sample std
    m4: float = float("nan")


def _check_p(p):
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")


def online_estimator_moments(p: float, N: int, max_trials: int | None = None) -> Moments:
    """Exact moments of the online estimate, summing over every trial count."""
    _check_p(p)
    if max_trials is None:
        max_trials = N - 1
    k = np.arange(1, max_trials + 1, dtype=np.float64)
    if p == 1.0:
        pmf = (k == 1).astype(np.float64)
    else:
        pmf = np.exp(math.log(p) + (k - 1) * math.log1p(-p))
    est = np.floor((N - 1) / k)
    # leftover mass (no violator found) contributes an estimate of 0
    mean = float(np.sum(pmf * est))
    var = float(np.sum(pmf * (est - mean) ** 2)) + _residual(p, max_trials) * mean**2
    m4 = float(np.sum(pmf * (est - mean) ** 4)) + _residual(p, max_trials) * mean**4
    return Moments(mean, math.sqrt(max(var, 0.0)), m4)


def _residual(p, max_trials):
    return 0.0 if p == 1.0 else math.exp(max_trials * math.log1p(-p))


def online_normalized_mean(p: float, max_trials: int) -> float:
    """``E[1/k]`` for the truncated geometric trial count (floor dropped)."""
    _check_p(p)
    k = np.arange(1, max_trials + 1, dtype=np.float64)
    if p == 1.0:
        return 1.0
    pmf = np.exp(math.log(p) + (k - 1) * math.log1p(-p))
    return float(np.sum(pmf / k))


def online_normalized_mean_limit(p: float) -> float:
    """``E[1/k]`` with no truncation: ``-p log p / (1 - p)``."""
    _check_p(p)
    if p == 1.0:
        return 1.0
    return -p * math.log(p) / (1.0 - p)


def batch_sample_size(N: int, q: float) -> int:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    z = int(round(q * N))
    if z < 1:
        raise ValueError(f"q={q} gives an empty sample for N={N}")
    return min(z, N)


def batch_estimator_moments(p: float, N: int, q: float) -> Moments:
    """Moments of ``(N/|Z|) * hypergeometric(N, r, |Z|)`` with ``r = p N``."""
    _check_p(p)
    z = batch_sample_size(N, q)
    scale = N / z
    var_count = z * p * (1.0 - p) * (N - z) / (N - 1) if N > 1 else 0.0
    std = scale * math.sqrt(var_count)
    r = p * N
    m4 = float("nan")
    rank = round(r)
    if abs(r - rank) <= 1e-9 * max(r, 1.0) and 0 < var_count:
        kurt = float(stats.hypergeom.stats(N, rank, z, moments="k"))
        m4 = (kurt + 3.0) * std**4
    elif var_count == 0:
        m4 = 0.0
    return Moments(r, std, m4)


def batch_estimator_moments_from_values(values, q: float) -> Moments:
    """
    Moments of ``(N/|Z|) * sum(values[Z])`` for a uniform sample ``Z``.

    ``values`` holds one entry per item (zero for non-violators).  With 0/1
    values this is the indicator estimator; with hinge magnitudes it is the
    margin-rank estimator.
    """
    values = np.asarray(values, dtype=np.float64)
    N = values.size
    z = batch_sample_size(N, q)
    sigma2 = float(values.var())
    var_sum = z * sigma2 * (N - z) / (N - 1) if N > 1 else 0.0
    return Moments(float(values.sum()), (N / z) * math.sqrt(var_sum))


def online_estimator_samples(p, N, trials, rng, max_trials=None) -> np.ndarray:
    if max_trials is None:
        max_trials = N - 1
    k = rng.geometric(p, size=trials)
    return np.where(k <= max_trials, (N - 1) // k, 0).astype(np.float64)


def batch_estimator_samples(rank: int, N: int, q: float, trials, rng) -> np.ndarray:
    z = batch_sample_size(N, q)
    if rank == 0:
        return np.zeros(trials)
    if rank == N:
        return np.full(trials, float(N))
    hits = rng.hypergeometric(rank, N - rank, z, size=trials)
    return (N / z) * hits


def batch_margin_samples(values, q, trials, rng) -> np.ndarray:
    """Monte Carlo draws of the scaled sample sum over ``values``."""
    values = np.asarray(values, dtype=np.float64)
    N = values.size
    z = batch_sample_size(N, q)
    out = np.empty(trials)
    for t in range(trials):
        out[t] = values[rng.choice(N, size=z, replace=False)].sum()
    return (N / z) * out


def std_standard_error(m: Moments, trials: int) -> float:
    """Large-sample standard error of a sample standard deviation."""
    if m.std == 0.0:
        return 0.0
    return math.sqrt(max(m.m4 - m.std**4, 0.0) / trials) / (2.0 * m.std)


def default_p_grid(N=DEFAULT_N, points=30, p_min=1e-5, p_max=0.5) -> np.ndarray:
    """
    Roughly log-spaced normalized ranks ``p = r / N`` with distinct integer ``r``.

    Ranks are rounded to integers (a rank is a count) and nudged upwards
    where rounding would repeat a value.
    """
    if points < 1:
        raise ValueError("need at least one grid point")
    if not 0.0 < p_min <= p_max < 1.0:
        raise ValueError("need 0 < p_min <= p_max < 1")
    ranks = np.rint(np.geomspace(p_min * N, p_max * N, points)).astype(np.int64)
    ranks = np.maximum(ranks, 1)
    for i in range(1, ranks.size):
        ranks[i] = max(ranks[i], ranks[i - 1] + 1)
    if ranks[-1] >= N:
        raise ValueError(f"{points} distinct ranks do not fit below N={N}")
    return ranks / N


@dataclass
class EstimatorStats:
    """
    Per-grid-point estimator summaries.

    Relative quantities are divided by the true rank.  ``mc_*`` fields are
    empty when no Monte Carlo trials were run.
    """

    N: int
    p: np.ndarray
    q: tuple
    online_mean: np.ndarray
    online_std: np.ndarray
    batch_std: dict
    trials: int = 0
    max_trials: int | None = None
    estimator: str = "indicator"
    online_m4: np.ndarray | None = None
    batch_m4: dict = field(default_factory=dict)
    mc_online_mean: np.ndarray | None = None
    mc_online_std: np.ndarray | None = None
    mc_batch_mean: dict = field(default_factory=dict)
    mc_batch_std: dict = field(default_factory=dict)
    batch_mean: dict = field(default_factory=dict)

    @property
    def true_rank(self) -> np.ndarray:
        return self.p * self.N

    @property
    def online_rel_std(self):
        return self.online_std / self.true_rank

    @property
    def online_rel_bias(self):
        return (self.online_mean - self.true_rank) / self.true_rank

    def batch_rel_std(self, q):
        # relative to the estimator's own target: p N for the indicator
        # form, the margin rank for the hinge form
        return self.batch_std[q] / self.batch_mean[q]

    def columns(self):
        cols = {
            "p": self.p,
            "true_rank": self.true_rank,
            "online_rel_std": self.online_rel_std,
            "online_rel_bias": self.online_rel_bias,
        }
        for q in self.q:
            cols[f"batch_rel_std_q{q:g}"] = self.batch_rel_std(q)
        if self.trials:
            r = self.true_rank
            cols["mc_online_rel_std"] = self.mc_online_std / r
            cols["mc_online_rel_bias"] = (self.mc_online_mean - r) / r
            for q in self.q:
                cols[f"mc_batch_rel_std_q{q:g}"] = self.mc_batch_std[q] / self.batch_mean[q]
        return cols

    def to_csv(self) -> str:
        cols = self.columns()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i in range(self.p.size):
            w.writerow(f"{cols[c][i]:.6g}" for c in cols)
        return buf.getvalue()


def _hinge_values(rank, N, rng):
    # violators carry hinge magnitudes in (0, 2); everything else 0
    values = np.zeros(N)
    values[:rank] = rng.uniform(0.0, 2.0, size=rank)
    return values


def _simulate_point(p, N, q_list, trials, max_trials, estimator, seed_seq):
    rank = int(round(p * N))
    online_ss, *batch_ss = seed_seq.spawn(1 + len(q_list))
    online = online_estimator_moments(p, N, max_trials)
    out = {"online": online, "batch": {}, "mc_online": None, "mc_batch": {}}
    values = None
    if estimator == "hinge":
        values = _hinge_values(rank, N, np.random.default_rng(seed_seq.spawn(1)[0]))
    for q, ss in zip(q_list, batch_ss):
        if values is None:
            out["batch"][q] = batch_estimator_moments(rank / N, N, q)
        else:
            out["batch"][q] = batch_estimator_moments_from_values(values, q)
        if trials:
            rng = np.random.default_rng(ss)
            if values is None:
                samples = batch_estimator_samples(rank, N, q, trials, rng)
            else:
                samples = batch_margin_samples(values, q, trials, rng)
            out["mc_batch"][q] = (float(samples.mean()), float(samples.std(ddof=1)))
    if trials:
        samples = online_estimator_samples(p, N, trials, np.random.default_rng(online_ss), max_trials)
        out["mc_online"] = (float(samples.mean()), float(samples.std(ddof=1)))
    return out


def simulate_estimators(
    N: int = DEFAULT_N,
    p_grid=None,
    q_list=DEFAULT_Q,
    trials: int = 0,
    seed: int = 0,
    max_trials: int | None = None,
    estimator: str = "indicator",
    threads: int = 1,
) -> EstimatorStats:
    """
    Closed-form (and, with ``trials > 0``, Monte Carlo) estimator statistics.

    Each grid point draws from its own seed stream, so results do not depend
    on ``threads``.  ``estimator="hinge"`` replaces the batch violation
    indicator by random hinge magnitudes, and batch columns become relative
    to the resulting margin rank.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if estimator not in ("indicator", "hinge"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if p_grid is None:
        p_grid = default_p_grid(N)
    p_grid = np.asarray(p_grid, dtype=np.float64)
    q_list = tuple(float(q) for q in q_list)
    if p_grid.size == 0 or not q_list:
        raise ValueError("p grid and q list must be nonempty")
    if np.any((p_grid <= 0) | (p_grid >= 1)):
        raise ValueError("p values must lie in (0, 1)")
    for q in q_list:
        batch_sample_size(N, q)
    if trials < 0:
        raise ValueError("trials must be >= 0")
    if max_trials is None:
        max_trials = N - 1

    seeds = np.random.SeedSequence(seed).spawn(p_grid.size)
    args = [(p, N, q_list, trials, max_trials, estimator, ss) for p, ss in zip(p_grid, seeds)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            points = list(pool.map(lambda a: _simulate_point(*a), args))
    else:
        points = [_simulate_point(*a) for a in args]

    res = EstimatorStats(
        N=N,
        p=p_grid,
        q=q_list,
        online_mean=np.array([pt["online"].mean for pt in points]),
        online_std=np.array([pt["online"].std for pt in points]),
        online_m4=np.array([pt["online"].m4 for pt in points]),
        batch_std={q: np.array([pt["batch"][q].std for pt in points]) for q in q_list},
        batch_mean={q: np.array([pt["batch"][q].mean for pt in points]) for q in q_list},
        batch_m4={q: np.array([pt["batch"][q].m4 for pt in points]) for q in q_list},
        trials=trials,
        max_trials=max_trials,
        estimator=estimator,
    )
    if trials:
        res.mc_online_mean = np.array([pt["mc_online"][0] for pt in points])
        res.mc_online_std = np.array([pt["mc_online"][1] for pt in points])
        res.mc_batch_mean = {q: np.array([pt["mc_batch"][q][0] for pt in points]) for q in q_list}
        res.mc_batch_std = {q: np.array([pt["mc_batch"][q][1] for pt in points]) for q in q_list}
    return res
