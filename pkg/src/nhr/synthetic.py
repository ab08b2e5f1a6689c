"""Planted-cluster implicit-feedback datasets with side features that track the clusters."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureTable, InteractionLog, prepare_feature
from .tensor import make_rng


@dataclass
class PlantedDataset:
    log: InteractionLog
    user_cluster: np.ndarray
    item_cluster: np.ndarray
    user_features: dict[str, dict[int, list[str]]]
    item_features: dict[str, dict[int, list[str]]]
    item_text: dict[int, str]


def planted_clusters(num_users: int, num_items: int, num_clusters: int, per_user: int,
                     seed: int = 0, in_cluster: float = 1.0, feature_noise: float = 0.0,
                     text_coverage: float = 1.0, words_per_cluster: int = 20,
                     text_length: int = 12) -> PlantedDataset:
    """Users and items are assigned to ``num_clusters`` groups round-robin.

    Each user interacts with ``per_user`` distinct items, each drawn from the
    user's own cluster with probability ``in_cluster`` and uniformly
    otherwise. Timestamps are 1..per_user in draw order. Categorical
    features carry the cluster label, replaced by a random one with
    probability ``feature_noise``. Item text is drawn from a cluster-specific
    vocabulary for a ``text_coverage`` fraction of items.
    """
    rng = make_rng(seed)
    user_cluster = np.arange(num_users) % num_clusters
    item_cluster = np.arange(num_items) % num_clusters
    members = [np.flatnonzero(item_cluster == c) for c in range(num_clusters)]
    records = []
    for u in range(num_users):
        chosen: list[int] = []
        while len(chosen) < per_user:
            if rng.random() < in_cluster:
                pool = members[user_cluster[u]]
                it = int(pool[rng.integers(len(pool))])
            else:
                it = int(rng.integers(num_items))
            if it not in chosen:
                chosen.append(it)
        records.extend((u, it, t + 1) for t, it in enumerate(chosen))
    log = InteractionLog.from_records(records, num_users, num_items)

    def noisy(labels):
        flip = rng.random(len(labels)) < feature_noise
        rand = rng.integers(0, num_clusters, len(labels))
        return np.where(flip, rand, labels)

    ucl = noisy(user_cluster)
    icl = noisy(item_cluster)
    user_features = {"segment": {u: [f"s{int(c)}"] for u, c in enumerate(ucl)}}
    item_features = {"genre": {i: [f"g{int(c)}"] for i, c in enumerate(icl)}}
    item_text = {}
    for i in range(num_items):
        if rng.random() >= text_coverage:
            continue
        c = item_cluster[i]
        words = rng.integers(0, words_per_cluster, size=text_length)
        item_text[i] = " ".join(f"w{c}x{w}" for w in words)
    return PlantedDataset(log, user_cluster, item_cluster, user_features, item_features, item_text)


def planted_feature_tables(ds: PlantedDataset, embedding_dim: int = 8,
                           include_text: bool = False) -> dict[str, FeatureTable]:
    """Encode the planted side features: ``segment`` (user), ``genre`` (item), optionally ``text`` (item)."""
    nu, ni = ds.log.num_users, ds.log.num_items
    tables = {
        "segment": prepare_feature("segment", "user", "categorical", ds.user_features["segment"], nu, embedding_dim),
        "genre": prepare_feature("genre", "item", "categorical", ds.item_features["genre"], ni, embedding_dim),
    }
    if include_text:
        tables["text"] = prepare_feature("text", "item", "text", ds.item_text, ni, embedding_dim)
    return tables


def write_planted(ds: PlantedDataset, directory) -> dict[str, Path]:
    """Write the dataset in the on-disk formats the ingest command reads."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": d / "interactions.tsv", "user_features": d / "user_features.tsv",
             "item_features": d / "item_features.tsv", "item_text": d / "item_text"}
    with open(paths["interactions"], "w", encoding="utf-8", newline="\n") as fh:
        for u, i, t in zip(ds.log.users.tolist(), ds.log.items.tolist(), ds.log.timestamps.tolist()):
            fh.write(f"u{u}\ti{i}\t{t}\n")
    for key, feats in (("user_features", ds.user_features), ("item_features", ds.item_features)):
        prefix = "u" if key == "user_features" else "i"
        with open(paths[key], "w", encoding="utf-8", newline="\n") as fh:
            for fname, values in feats.items():
                for ent, labels in values.items():
                    for lab in labels:
                        fh.write(f"{prefix}{ent}\t{fname}\t{lab}\n")
    paths["item_text"].mkdir(exist_ok=True)
    for i, text in ds.item_text.items():
        (paths["item_text"] / f"i{i}.txt").write_text(text + "\n", encoding="utf-8")
    return paths
