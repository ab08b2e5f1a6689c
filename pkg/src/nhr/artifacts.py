"""Ingest artifacts on disk, addressed by content hash through a manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    FeatureSpec,
    FeatureTable,
    InteractionLog,
    SplitDataset,
    export_remap,
    leave_one_out_split,
    load_categorical_features,
    load_interactions,
    load_movielens_users,
    load_remap,
    load_text_features,
    prepare_feature,
    to_dense_keys,
)
from .errors import DataError, ParseError, StaleArtifactError
from .sampling import EvalCandidates, sample_eval_candidates
from .tensor import derive_seed, make_rng

MANIFEST = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Artifacts:
    split: SplitDataset
    features: dict[str, FeatureTable]
    val_candidates: EvalCandidates
    test_candidates: EvalCandidates
    manifest: dict


def _read_feature_values(decl, user_index, item_index):
    index = user_index if decl.entity == "user" else item_index
    if decl.kind == "text":
        raw = load_text_features(decl.path)
    elif decl.format == "movielens_users":
        raw = load_movielens_users(decl.path).get(decl.source_column)
        if raw is None:
            raise DataError(f"feature {decl.name!r}: users.dat has no column {decl.source_column!r}")
    else:
        raw = load_categorical_features(decl.path).get(decl.source_column, {})
    return to_dense_keys(raw, index), len(index)


def _write_pairs(path, mapping: dict[int, int]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in sorted(mapping):
            fh.write(f"{u}\t{mapping[u]}\n")


def _read_pairs(path) -> dict[int, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                u, i = line.rstrip("\n").split("\t")
                out[int(u)] = int(i)
            except ValueError:
                raise ParseError("expected user<TAB>item", path, lineno) from None
    return out


def write_feature_table(table: FeatureTable, directory: Path):
    meta = {"spec": table.spec.to_dict(), "vocabulary": dict(sorted(table.vocabulary.items()))}
    (directory / f"{table.spec.name}.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n",
                                                       encoding="utf-8")
    with open(directory / f"{table.spec.name}.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for ent, row in enumerate(table.indices.tolist()):
            fh.write(f"{ent}\t{','.join(map(str, row))}\n")


def read_feature_table(name: str, directory: Path) -> FeatureTable:
    meta = json.loads((directory / f"{name}.json").read_text(encoding="utf-8"))
    spec = FeatureSpec.from_dict(meta["spec"])
    rows = []
    path = directory / f"{name}.tsv"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                ent, idx = line.rstrip("\n").split("\t")
                rows.append([int(x) for x in idx.split(",")])
            except ValueError:
                raise ParseError("expected entity<TAB>idx,idx,...", path, lineno) from None
    indices = np.array(rows, dtype=np.int64).reshape(len(rows), spec.input_length)
    return FeatureTable(spec, indices, {k: int(v) for k, v in meta["vocabulary"].items()})


def ingest(cfg: ExperimentConfig, data_dir: Path) -> dict:
    """Parse, split, encode features, draw candidate sets, write everything plus a manifest."""
    log = load_interactions(cfg.interactions, cfg.format)
    split = leave_one_out_split(log)
    user_index, item_index = log.user_index(), log.item_index()
    features = {}
    for decl in cfg.features:
        values, n = _read_feature_values(decl, user_index, item_index)
        features[decl.name] = prepare_feature(decl.name, decl.entity, decl.kind, values, n,
                                              decl.embedding_dim, decl.hash_size, decl.input_length)
    val = sample_eval_candidates(split, cfg.eval_negatives, make_rng(derive_seed(cfg.seed, "candidates", "val")), "val")
    test = sample_eval_candidates(split, cfg.eval_negatives, make_rng(derive_seed(cfg.seed, "candidates", "test")), "test")

    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "features").mkdir(exist_ok=True)
    with open(data_dir / "train.tsv", "w", encoding="utf-8", newline="\n") as fh:
        t = split.train
        for u, i, ts in zip(t.users.tolist(), t.items.tolist(), t.timestamps.tolist()):
            fh.write(f"{u}\t{i}\t{ts}\n")
    _write_pairs(data_dir / "val.tsv", split.val)
    _write_pairs(data_dir / "test.tsv", split.test)
    export_remap(data_dir / "users.tsv", log.user_ids)
    export_remap(data_dir / "items.tsv", log.item_ids)
    for table in features.values():
        write_feature_table(table, data_dir / "features")
    val.to_tsv(data_dir / "val_candidates.tsv")
    test.to_tsv(data_dir / "test_candidates.tsv")

    files = sorted(p.relative_to(data_dir).as_posix() for p in data_dir.rglob("*")
                   if p.is_file() and p.name != MANIFEST)
    manifest = {
        "format_version": 1,
        "seed": cfg.seed,
        "num_users": log.num_users,
        "num_items": log.num_items,
        "num_interactions": len(log),
        "num_train": len(split.train),
        "eval_users": len(split.test),
        "dropped_users": split.dropped_users,
        "eval_negatives": cfg.eval_negatives,
        "features": [d.name for d in cfg.features],
        "val_fingerprint": val.fingerprint(),
        "test_fingerprint": test.fingerprint(),
        "files": {f: sha256_file(data_dir / f) for f in files},
    }
    (data_dir / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest


def verify_manifest(data_dir: Path) -> dict:
    mpath = data_dir / MANIFEST
    if not mpath.is_file():
        raise StaleArtifactError(f"no ingest manifest at {mpath}; run `nhr ingest` first")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    for rel, digest in manifest["files"].items():
        p = data_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            raise StaleArtifactError(f"artifact {p} is missing or changed since ingest")
    return manifest


def load_artifacts(data_dir: Path) -> Artifacts:
    manifest = verify_manifest(data_dir)
    user_ids = load_remap(data_dir / "users.tsv")
    item_ids = load_remap(data_dir / "items.tsv")
    rows = []
    with open(data_dir / "train.tsv", encoding="utf-8") as fh:
        for line in fh:
            rows.append([int(x) for x in line.split("\t")])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    train = InteractionLog(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), user_ids, item_ids)
    val = _read_pairs(data_dir / "val.tsv")
    test = _read_pairs(data_dir / "test.tsv")
    pos = [set() for _ in user_ids]
    for u, i in zip(train.users.tolist(), train.items.tolist()):
        pos[u].add(i)
    for m in (val, test):
        for u, i in m.items():
            pos[u].add(i)
    split = SplitDataset(train, val, test, [frozenset(p) for p in pos], manifest["dropped_users"])
    features = {name: read_feature_table(name, data_dir / "features") for name in manifest["features"]}
    return Artifacts(split, features, EvalCandidates.from_tsv(data_dir / "val_candidates.tsv"),
                     EvalCandidates.from_tsv(data_dir / "test_candidates.tsv"), manifest)

