"""Shared builders for in-memory datasets and tiny training bundles."""

from __future__ import annotations

import numpy as np
import pytest

from mdvt.dataset import (DatasetBundle, DatasetSplit, InteractionSet,
                          ModalityBundle, build_graph, compute_popularity)


def make_set(records, num_users, num_items) -> InteractionSet:
    return InteractionSet(
        records=list(records),
        num_users=num_users,
        num_items=num_items,
        user_ids=tuple(f"u{k}" for k in range(num_users)),
        item_ids=tuple(f"i{k}" for k in range(num_items)),
    )


def covered_random_records(rng, num_users, num_items, extra_edges):
    """Random edge set where every user and every item has >= 1 edge."""
    pairs = set()
    for u in range(num_users):
        pairs.add((u, int(rng.integers(num_items))))
    for i in range(num_items):
        pairs.add((int(rng.integers(num_users)), i))
    for _ in range(extra_edges):
        pairs.add((int(rng.integers(num_users)), int(rng.integers(num_items))))
    return sorted(pairs)


def make_bundle(rng, num_users=6, num_items=8, extra_edges=6,
                feature_dim=3, with_features=True,
                val_records=None, test_records=None) -> DatasetBundle:
    """A tiny in-memory bundle with a fully covered train graph."""
    train_records = covered_random_records(rng, num_users, num_items,
                                           extra_edges)
    full = make_set(train_records, num_users, num_items)
    train = full.view(train_records)
    seen = train.items_by_user()
    if val_records is None:
        val_records = []
        for u in range(num_users):
            free = [i for i in range(num_items) if i not in seen[u]]
            if free:
                val_records.append((u, free[int(rng.integers(len(free)))]))
    if test_records is None:
        test_records = []
        taken = {(u, i) for u, i in val_records}
        for u in range(num_users):
            free = [i for i in range(num_items)
                    if i not in seen[u] and (u, i) not in taken]
            if free:
                test_records.append((u, free[int(rng.integers(len(free)))]))
    split = DatasetSplit(
        train=train,
        validation=full.view(list(val_records)),
        test=full.view(list(test_records)),
        split_seed=0,
    )
    features = {}
    names = ["id"]
    if with_features:
        features["visual"] = rng.normal(size=(num_items, feature_dim)) \
            .astype(np.float32)
        names.append("visual")
    modalities = ModalityBundle(tuple(names), features, num_items=num_items)
    return DatasetBundle(
        split=split,
        graph=build_graph(train),
        modalities=modalities,
        popularity=compute_popularity(train),
        stats={
            "num_users": num_users,
            "num_items": num_items,
            "num_interactions": (len(train_records) + len(val_records)
                                 + len(test_records)),
            "sparsity": 1.0 - (len(train_records) + len(val_records)
                               + len(test_records)) / (num_users * num_items),
            "split_seed": 0,
        },
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
