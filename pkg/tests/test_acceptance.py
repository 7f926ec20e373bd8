"""
Acceptance suite.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured numbers,
then asserts.  Run directly (``python3 tests/test_acceptance.py``) or
through pytest; the verdict lines are printed either way.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from wmrb._kernels import BACKENDS
from wmrb.data import (
    FeatureMatrix,
    InteractionDataset,
    identity_features,
    save_interactions,
    split_interactions,
)
from wmrb.estimator_lab import (
    Moments,
    batch_estimator_moments,
    online_normalized_mean,
    simulate_estimators,
    std_standard_error,
)
from wmrb.evaluation import ModelScorer, PopularityScorer, evaluate
from wmrb.losses import (
    LossBatch,
    OwaWeights,
    exact_rank,
    margin_rank,
    owa_phi,
    wmrb_loss,
)
from wmrb.model import entity_reprs, init_params, item_repr, score, user_repr
from wmrb.synthetic import planted_dataset
from wmrb.trainer import (
    AdagradState,
    TrainConfig,
    _csr,
    batch_objective,
    batch_param_gradients,
    make_loss_batch,
    train,
)


@pytest.fixture
def verdict(capsys):
    def report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}", flush=True)
        assert ok, detail

    return report


# 1 -------------------------------------------------------------------------

def test_sampled_margin_rank_is_unbiased(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    Y, Z, draws = 500, 50, 10_000
    worst = 0.0
    for _ in range(20):
        scores = rng.normal(0.0, rng.uniform(0.5, 2.0), Y)
        relevant = rng.random(Y) < rng.uniform(0.0, 0.2)
        pos = rng.uniform(-1.0, 2.0)
        full = LossBatch(np.zeros(1, np.int64), np.zeros(1, np.int64), np.arange(Y),
                         relevant[None], Y)
        target = margin_rank(full, [pos], scores[None])[0]
        values = np.empty(draws)
        for t in range(draws):
            z = rng.choice(Y, Z, replace=False)
            b = LossBatch(np.zeros(1, np.int64), np.zeros(1, np.int64), z, relevant[z][None], Y)
            values[t] = margin_rank(b, [pos], scores[z][None])[0]
        se = values.std(ddof=1) / math.sqrt(draws)
        worst = max(worst, abs(values.mean() - target) / se)
    elapsed = time.perf_counter() - t0
    verdict(
        "1 unbiased sampled margin rank",
        worst <= 3.0 and elapsed < 30.0,
        f"max |mean - full| = {worst:.2f} SE over 20 configs (<= 3), {elapsed:.1f}s (< 30s)",
    )


# 2 -------------------------------------------------------------------------

def test_estimator_curves_and_monte_carlo(verdict):
    t0 = time.perf_counter()
    N, trials = 100_000, 100_000
    stats = simulate_estimators(N=N, trials=trials, seed=0)
    small = stats.p <= 0.01
    online_above = bool(np.all(stats.online_rel_std[small] > stats.batch_rel_std(0.01)[small]))

    known = batch_estimator_moments(0.01, N, 0.01)
    known_rel = known.std / known.mean

    r = stats.true_rank
    z = {}
    se_std = np.array([std_standard_error(_m(stats.online_std, stats.online_m4, i), trials)
                       for i in range(r.size)])
    z["online rel std"] = (stats.mc_online_std - stats.online_std) / se_std
    z["online rel bias"] = (stats.mc_online_mean - stats.online_mean) / (
        stats.online_std / math.sqrt(trials))
    for q in stats.q:
        se = np.array([std_standard_error(_m(stats.batch_std[q], stats.batch_m4[q], i), trials)
                       for i in range(r.size)])
        z[f"batch rel std q={q:g}"] = (stats.mc_batch_std[q] - stats.batch_std[q]) / se
    worst = max(float(np.max(np.abs(v))) for v in z.values())
    # not a plotted column; reported for completeness
    mean_z = max(
        float(np.max(np.abs(stats.mc_batch_mean[q] - stats.batch_mean[q])
                     / (stats.batch_std[q] / math.sqrt(trials))))
        for q in stats.q
    )
    elapsed = time.perf_counter() - t0
    ok = online_above and abs(known_rel - 0.3131) <= 0.0005 and worst <= 3.0 and elapsed < 120
    verdict(
        "2 online vs sampled-batch estimator curves",
        ok,
        f"online > batch(q=0.01) for all p <= 0.01: {online_above}; "
        f"batch rel std (p=q=0.01) = {known_rel:.6f} (0.3131 +- 0.0005); "
        f"MC vs closed form max |z| = {worst:.2f} over {r.size} points x {len(z)} curves (<= 3); "
        f"[info: batch-mean max |z| = {mean_z:.2f}]; {elapsed:.1f}s (< 120s)",
    )


def _m(std, m4, i):
    return Moments(0.0, float(std[i]), float(m4[i]))


# 3 -------------------------------------------------------------------------

def test_online_overestimation_series(verdict):
    t0 = time.perf_counter()
    N = 100_000
    rows = []
    ok = True
    for p in (0.001, 0.01, 0.1):
        # independent scalar summation of p + sum_{k>=2} (1/k) p (1-p)^(k-1)
        terms = [p] + [p * (1.0 - p) ** (k - 1) / k for k in range(2, N)]
        direct = math.fsum(terms)
        got = online_normalized_mean(p, N - 1)
        ok &= abs(got - direct) <= 1e-9 and got > p
        rows.append(f"p={p:g}: {got:.9f} (|diff| {abs(got - direct):.1e}, {got / p:.2f}x p)")
    elapsed = time.perf_counter() - t0
    verdict("3 online estimator overestimates small ranks", ok and elapsed < 1.0,
            "; ".join(rows) + f"; {elapsed:.2f}s")


# 4 -------------------------------------------------------------------------

H = 1e-5


def _random_instance(rng, loss):
    while True:
        num_users = int(rng.integers(2, 8))
        num_items = int(rng.integers(8, 65))
        dim = int(rng.integers(1, 9))
        users = rng.integers(0, num_users, 4 * num_users)
        items = rng.integers(0, num_items, 4 * num_users)
        ds = InteractionDataset.from_pairs(users, items, num_users, num_items)
        uf = identity_features(num_users)
        tags = int(rng.integers(1, 4))
        ids = np.arange(num_items)
        itf = FeatureMatrix.from_triples(
            np.r_[ids, ids], np.r_[ids, num_items + ids % tags],
            np.r_[np.ones(num_items), rng.uniform(0.2, 1.5, num_items)],
            num_items, num_items + tags,
        )
        params = init_params(dim, num_users, num_items + tags, seed=rng.integers(2**32),
                             scale=0.8, dtype=np.float64)
        params.user_biases[:] = rng.normal(0, 0.3, num_users)
        params.item_biases[:] = rng.normal(0, 0.3, num_items + tags)
        pu, pi = ds.train_pairs()
        pick = rng.choice(pu.size, size=min(pu.size, 6), replace=False)
        cand = rng.choice(num_items, size=int(rng.integers(4, num_items + 1)), replace=False)
        batch = make_loss_batch(ds, pu[pick], pi[pick], cand)
        if loss == "wmrb" and _near_kink(params, uf, itf, batch):
            continue  # the hinge is not differentiable there
        return params, uf, itf, batch


def _near_kink(params, uf, itf, batch, tol=1e-3):
    U, bu = entity_reprs(params.user_embeddings, params.user_biases, uf, batch.users)
    V, bv = entity_reprs(params.item_embeddings, params.item_biases, itf)
    pos = np.sum(U * V[batch.positives], axis=1) + bu + bv[batch.positives]
    cand = U @ V[batch.candidates].T + bu[:, None] + bv[batch.candidates]
    h = 1.0 - pos[:, None] + cand
    return bool(np.any(~batch.relevant & (np.abs(h) < tol)))


def _fd_check(params, uf, itf, batch, loss, backend):
    _, grads = batch_param_gradients(params, uf, itf, batch, loss, backend)
    touched_items = np.unique(np.r_[batch.positives, batch.candidates])
    item_feats = np.unique(np.concatenate([itf.row(i)[0] for i in touched_items]))
    user_feats = np.unique(batch.users)
    analytic, numeric = [], []
    for arr, g, rows in zip(params.arrays(), grads.arrays(),
                            (user_feats, item_feats, user_feats, item_feats)):
        untouched = np.setdiff1d(np.arange(arr.shape[0]), rows)
        assert not np.any(g[untouched])
        for row in rows:
            for idx in np.ndindex(arr[row].shape):
                full = (row,) + idx
                old = arr[full]
                arr[full] = old + H
                up = batch_objective(params, uf, itf, batch, loss)
                arr[full] = old - H
                down = batch_objective(params, uf, itf, batch, loss)
                arr[full] = old
                analytic.append(g[full])
                numeric.append((up - down) / (2 * H))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def _warp_instance(rng):
    num_items = int(rng.integers(3, 40))
    neg = int(rng.integers(num_items))
    pos = (neg + 1 + int(rng.integers(num_items - 1))) % num_items
    tags = 2
    ids = np.arange(num_items)
    itf = FeatureMatrix.from_triples(
        np.r_[ids, ids], np.r_[ids, num_items + ids % tags],
        np.r_[np.ones(num_items), rng.uniform(0.2, 1.5, num_items)], num_items, num_items + tags,
    )
    uf = identity_features(1)
    dim = int(rng.integers(1, 9))
    params = init_params(dim, 1, num_items + tags, seed=rng.integers(2**32), scale=0.5,
                         dtype=np.float64)
    params.item_biases[:] = rng.normal(0, 0.3, num_items + tags)
    # everything but `neg` is relevant, so `neg` is the only possible violator
    relevant = np.setdiff1d(ids, [neg])
    ds = InteractionDataset.from_pairs(np.zeros(relevant.size, int), relevant, 1, num_items)
    u = user_repr(params, uf, 0)
    s_pos, s_neg = score(params, itf, u, pos), score(params, itf, u, neg)
    # keep the margin active: move the negative's bias so the hinge sits in (0.2, 2)
    params.item_biases[neg] += (s_pos - s_neg) - 1.0 + rng.uniform(0.2, 2.0)
    return params, uf, itf, ds, pos, neg


def _warp_gradient_error(rng, backend):
    params, uf, itf, ds, pos, neg = _warp_instance(rng)
    n = ds.num_items
    phi_table = OwaWeights().phi_table(n)
    phi = phi_table[n - 1]  # first draw violates, so the rank estimate is n - 1

    def pair_loss(p):
        u = user_repr(p, uf, 0)
        rp, rn = item_repr(p, itf, pos), item_repr(p, itf, neg)
        return phi * (1.0 - (u.vector @ rp.vector + u.bias + rp.bias)
                      + (u.vector @ rn.vector + u.bias + rn.bias))

    before = params.copy()
    state = AdagradState(params)
    # with a fresh accumulator the step is lr g / sqrt(g^2 + eps); invert it for g
    lr, eps = 1.0, 1.0
    trials = np.zeros(1, np.int64)
    loss = np.zeros(1)
    BACKENDS[backend].warp_epoch(
        *_csr(uf), *_csr(itf),
        params.user_embeddings, params.item_embeddings, params.user_biases, params.item_biases,
        *state.arrays(),
        ds.train_indptr.astype(np.int64), ds.train_indices.astype(np.int32),
        np.zeros(1, np.int32), np.array([pos], np.int32),
        phi_table, lr, 0.0, eps, n - 1, np.uint64(rng.integers(2**63)), True, trials, loss,
    )
    assert trials[0] == 1
    assert loss[0] == pytest.approx(pair_loss(before), rel=1e-12)
    analytic, numeric = [], []
    for old, new in zip(before.arrays(), params.arrays()):
        step = old - new
        analytic.extend((step * np.sqrt(eps / (lr**2 - step**2))).ravel())
        numeric.extend(_fd_array(pair_loss, before, old).ravel())
    a, nm = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - nm) / max(np.linalg.norm(nm), 1e-12))


def _fd_array(fn, params, arr):
    out = np.empty(arr.shape)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + H
        up = fn(params)
        arr[idx] = old - H
        down = fn(params)
        arr[idx] = old
        out[idx] = (up - down) / (2 * H)
    return out


def test_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for loss in ("wmrb", "ce"):
        for i in range(100):
            params, uf, itf, batch = _random_instance(rng, loss)
            backend = sorted(BACKENDS)[i % len(BACKENDS)]
            worst[loss] = max(worst.get(loss, 0.0), _fd_check(params, uf, itf, batch, loss, backend))
    worst["warp"] = max(_warp_gradient_error(rng, sorted(BACKENDS)[i % len(BACKENDS)])
                        for i in range(100))
    elapsed = time.perf_counter() - t0
    ok = worst["wmrb"] < 1e-4 and worst["ce"] < 1e-4 and worst["warp"] < 1e-6 and elapsed < 60
    verdict(
        "4 analytic gradients vs central differences",
        ok,
        f"max rel err WMRB {worst['wmrb']:.1e}, CE {worst['ce']:.1e} (< 1e-4, 100 instances each); "
        f"WARP pair {worst['warp']:.1e} (< 1e-6, 100 instances); {elapsed:.1f}s (< 60s)",
    )


# 5 -------------------------------------------------------------------------

def test_rank_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    worst_rel = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        # coarse scores so ties are common
        scores = rng.integers(-5, 6, n) / 2.0
        relevant = rng.random(n) < 0.3
        relevant[int(rng.integers(n))] = True
        # O(n^2): rank every relevant item by comparing against every item
        for y in np.flatnonzero(relevant):
            brute = 0
            for j in range(n):
                if not relevant[j] and scores[j] >= scores[y]:
                    brute += 1
            mismatches += exact_rank(scores[y], scores, ~relevant) != brute

        y = int(np.flatnonzero(relevant)[0])
        cont = scores + rng.normal(0, 0.3, n)
        batch = LossBatch(np.zeros(1, np.int64), np.array([y]), np.arange(n), relevant[None], n)
        got = margin_rank(batch, [cont[y]], cont[None])[0]
        ref = 0.0
        for j in range(n):
            if not relevant[j]:
                ref += (n / n) * max(0.0, 1.0 - cont[y] + cont[j])
        if ref > 0:
            worst_rel = max(worst_rel, abs(got - ref) / ref)
        elif got != 0:
            worst_rel = math.inf
    elapsed = time.perf_counter() - t0
    verdict(
        "5 exact and margin rank vs brute force",
        mismatches == 0 and worst_rel <= 1e-12 and elapsed < 10,
        f"exact_rank mismatches {mismatches}/1000 instances; margin_rank max rel err "
        f"{worst_rel:.1e} (<= 1e-12); {elapsed:.1f}s (< 10s)",
    )


# 6 -------------------------------------------------------------------------

def test_loss_identities(verdict):
    w = OwaWeights("harmonic")
    at_zero = float(wmrb_loss(0.0))
    at_e = float(wmrb_loss(math.e - 1.0))
    phi = w.phi_table(10_001)
    direct_err = max(
        abs(owa_phi(w, r) - math.fsum(1.0 / j for j in range(1, r + 1)))
        for r in (1, 2, 3, 10, 100, 1000, 10_000)
    )
    increments = np.diff(phi[1:])  # Phi(r+1) - Phi(r) for r in [1, 10^4)
    non_increasing = bool(np.all(np.diff(increments) <= 0))
    ok = at_zero == 0.0 and abs(at_e - 1.0) <= 1e-12 and direct_err < 1e-12 and non_increasing
    verdict(
        "6 loss identities",
        ok,
        f"wmrb_loss(0) = {at_zero}; |wmrb_loss(e-1) - 1| = {abs(at_e - 1):.1e}; "
        f"harmonic Phi vs direct sum max err {direct_err:.1e}; "
        f"increments non-increasing on [1, 1e4]: {non_increasing}",
    )


# 7, 8 ----------------------------------------------------------------------

E2E = dict(dim=32, learning_rate=0.02, epochs=20, batch_size=64)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trend_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        planted = planted_dataset(num_users=200, num_items=500, num_clusters=20, seed=seed)
        ds = split_interactions(planted.dataset, 0.3, seed)
        uf, itf = identity_features(ds.num_users), identity_features(ds.num_items)
        pop = evaluate(PopularityScorer(ds), ds, (30,))
        result = {"pop": (pop.recall[30], pop.ndcg[30])}
        for name, loss, features in (
            ("warp", "warp", itf),
            ("a-warp", "warp", planted.item_features),
            ("ce", "ce", itf),
            ("wmrb", "wmrb", itf),
        ):
            params, report = train(ds, TrainConfig(loss=loss, seed=seed, **E2E),
                                   item_features=features)
            m = evaluate(ModelScorer(params, uf, features), ds, (30,))
            result[name] = (m.recall[30], m.ndcg[30])
            if name == "warp":
                result["trials"] = (report.epochs[0].mean_trials, report.epochs[-1].mean_trials)
        runs.append(result)
    return runs, time.perf_counter() - t0


def _mean(runs, key, i):
    return float(np.mean([r[key][i] for r in runs]))


def test_end_to_end_trend(verdict, trend_runs):
    runs, elapsed = trend_runs
    models = ("warp", "a-warp", "ce", "wmrb")
    recall = {k: _mean(runs, k, 0) for k in ("pop",) + models}
    ndcg = {k: _mean(runs, k, 1) for k in ("pop",) + models}
    ok = (
        recall["wmrb"] >= 2 * recall["pop"]
        and recall["wmrb"] >= recall["ce"] - 0.01
        and all(ndcg[k] > ndcg["pop"] for k in models)
        and elapsed < 300
    )
    verdict(
        "7 end-to-end trend on planted data",
        ok,
        "R@30 " + ", ".join(f"{k} {v:.3f}" for k, v in recall.items())
        + "; NDCG@30 " + ", ".join(f"{k} {v:.3f}" for k, v in ndcg.items())
        + f"; need WMRB >= 2x POP and >= CE - 0.01; {elapsed:.0f}s (< 300s)",
    )


def test_warp_sampling_slows_down(verdict, trend_runs):
    runs, _ = trend_runs
    first = _mean(runs, "trials", 0)
    last = _mean(runs, "trials", 1)
    verdict(
        "8 WARP needs more draws as training proceeds",
        last > first,
        f"mean sampling count epoch 1 = {first:.1f}, epoch {E2E['epochs']} = {last:.1f} "
        f"(3-seed average)",
    )


# 9 -------------------------------------------------------------------------

def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "wmrb", *map(str, args)], cwd=cwd,
                          capture_output=True, check=True)


def test_cli_determinism(verdict, tmp_path):
    planted = planted_dataset(num_users=50, num_items=80, num_clusters=5, seed=4)
    save_interactions(planted.dataset, tmp_path / "inter.tsv")
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"interactions": "inter.tsv", "num_users": 50, "num_items": 80, "seed": 1}))
    same = {}
    for loss in ("warp", "wmrb", "ce"):
        for run in ("a", "b"):
            _cli("train", "--manifest", "manifest.json", "--loss", loss, "--epochs", 3,
                 "--seed", 7, "--model", f"{loss}-{run}.bin", "--out", f"{loss}-{run}.json",
                 cwd=tmp_path)
        same[loss] = (tmp_path / f"{loss}-a.bin").read_bytes() == (tmp_path / f"{loss}-b.bin").read_bytes()
    csv = [
        _cli("simulate", "--item-set-size", 20_000, "--trials", 2000, "--seed", 3,
             cwd=tmp_path).stdout
        for _ in range(2)
    ]
    same["simulate"] = csv[0] == csv[1] and len(csv[0]) > 0
    verdict(
        "9 reruns are byte-identical",
        all(same.values()),
        ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()),
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
