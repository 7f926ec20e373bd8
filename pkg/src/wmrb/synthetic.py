"""Synthetic implicit-feedback data with planted cluster structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix, InteractionDataset


@dataclass(frozen=True)
class PlantedData:
    dataset: InteractionDataset
    user_cluster: np.ndarray
    item_cluster: np.ndarray
    item_features: FeatureMatrix


def planted_dataset(
    num_users=200,
    num_items=500,
    num_clusters=20,
    min_items=10,
    max_items=30,
    noise=0.1,
    seed=0,
) -> PlantedData:
    """
    Users and items split into clusters; users mostly pick items from their own.

    Within a cluster, and for the ``noise`` share of off-cluster picks,
    items are drawn with Zipf-like popularity, so a global popularity
    ranking carries some (but little) signal.  Everything lands in train;
    split afterwards.  ``item_features`` holds identity plus one cluster
    indicator per item.
    """
    rng = np.random.default_rng(seed)
    user_cluster = rng.integers(num_clusters, size=num_users)
    item_cluster = np.arange(num_items) % num_clusters
    rng.shuffle(item_cluster)

    popularity = 1.0 / np.arange(1, num_items + 1) ** 0.8
    popularity = popularity[rng.permutation(num_items)]

    users, items = [], []
    for u in range(num_users):
        n = int(rng.integers(min_items, max_items + 1))
        own = np.flatnonzero(item_cluster == user_cluster[u])
        w_own = popularity[own] / popularity[own].sum()
        n_noise = rng.binomial(n, noise)
        n_own = min(n - n_noise, own.size)
        picked = set(rng.choice(own, size=n_own, replace=False, p=w_own).tolist())
        w_all = popularity / popularity.sum()
        while len(picked) < n_own + n_noise:
            picked.add(int(rng.choice(num_items, p=w_all)))
        users.extend([u] * len(picked))
        items.extend(sorted(picked))

    dataset = InteractionDataset.from_pairs(users, items, num_users, num_items)
    ids = np.arange(num_items)
    item_features = FeatureMatrix.from_triples(
        np.concatenate([ids, ids]),
        np.concatenate([ids, num_items + item_cluster]),
        np.ones(2 * num_items),
        num_items,
        num_items + num_clusters,
    )
    return PlantedData(dataset, user_cluster, item_cluster, item_features)
