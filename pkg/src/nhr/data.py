"""Interaction logs, leave-one-out splitting, and side-feature encoding."""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, IdLookupError, ParseError

log = logging.getLogger(__name__)

FORMATS = ("movielens_dat", "tsv")
ENTITIES = ("user", "item")
KINDS = ("categorical", "text")
DEFAULT_HASH_SIZE = 1000

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_TOKEN_RE = re.compile(r"[^\W_]+")


# --------------------------------------------------------------------------
# interactions
# --------------------------------------------------------------------------


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list[str]
    item_ids: list[str]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    def user_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.item_ids)}

    def subset(self, keep: np.ndarray) -> "InteractionLog":
        return InteractionLog(
            self.users[keep], self.items[keep], self.timestamps[keep],
            self.user_ids, self.item_ids,
        )

    @classmethod
    def from_records(cls, records, num_users=None, num_items=None) -> "InteractionLog":
        """Build a log directly from dense ``(user, item, timestamp)`` triples."""
        arr = np.asarray(list(records), dtype=np.int64).reshape(-1, 3)
        nu = int(arr[:, 0].max()) + 1 if num_users is None else num_users
        ni = int(arr[:, 1].max()) + 1 if num_items is None else num_items
        return cls(
            arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(),
            [str(u) for u in range(nu)], [str(i) for i in range(ni)],
        )


def _split_line(line, fmt):
    if fmt == "movielens_dat":
        parts = line.split("::")
        if len(parts) != 4:
            raise ValueError(f"expected UserID::MovieID::Rating::Timestamp, got {len(parts)} fields")
        return parts[0], parts[1], parts[3]
    parts = line.split("\t")
    if len(parts) != 3:
        raise ValueError(f"expected user<TAB>item<TAB>timestamp, got {len(parts)} fields")
    return parts[0], parts[1], parts[2]


def load_interactions(path, format: str = "movielens_dat") -> InteractionLog:
    """Parse an interaction file into a dense-id implicit-feedback log.

    Rating values are discarded. Raw ids are remapped to 0-based dense ids in
    first-seen order. A repeated (user, item) pair keeps its latest timestamp.
    """
    if format not in FORMATS:
        raise ConfigError(f"unknown interaction format {format!r}; expected one of {FORMATS}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    latest: dict[tuple[int, int], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                u_raw, i_raw, t_raw = _split_line(line, format)
                u_raw, i_raw = u_raw.strip(), i_raw.strip()
                if not u_raw or not i_raw:
                    raise ValueError("empty user or item id")
                t = int(t_raw)
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            u = user_index.setdefault(u_raw, len(user_index))
            i = item_index.setdefault(i_raw, len(item_index))
            prev = latest.get((u, i))
            if prev is None or t > prev:
                latest[(u, i)] = t
    if not latest:
        raise DataError(f"{path}: interaction log is empty")
    arr = np.array([(u, i, t) for (u, i), t in latest.items()], dtype=np.int64)
    return InteractionLog(
        arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(),
        list(user_index), list(item_index),
    )


def export_remap(path, raw_ids: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for dense, raw in enumerate(raw_ids):
            fh.write(f"{raw}\t{dense}\n")


def load_remap(path) -> list[str]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError("expected raw_id<TAB>dense_id", path, lineno)
            pairs.append((int(parts[1]), parts[0]))
    pairs.sort()
    if [d for d, _ in pairs] != list(range(len(pairs))):
        raise DataError(f"{path}: dense ids are not contiguous from 0")
    return [raw for _, raw in pairs]


# --------------------------------------------------------------------------
# leave-one-out
# --------------------------------------------------------------------------


@dataclass
class SplitDataset:
    train: InteractionLog
    val: dict[int, int]
    test: dict[int, int]
    positives_by_user: list[frozenset]
    dropped_users: int = 0

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items

    @property
    def eval_users(self) -> list[int]:
        return sorted(self.test)


def _raw_order_key(raw: str):
    try:
        return (0, int(raw), "")
    except ValueError:
        return (1, 0, raw)


def leave_one_out_split(log_: InteractionLog) -> SplitDataset:
    """Hold out each user's latest interaction for test and the next for validation.

    Timestamp ties are broken by raw item id: the larger id counts as later.
    Users with fewer than three interactions are dropped entirely.
    """
    item_keys = [_raw_order_key(r) for r in log_.item_ids]
    by_user: dict[int, list[int]] = {}
    for row, u in enumerate(log_.users.tolist()):
        by_user.setdefault(u, []).append(row)

    ts = log_.timestamps.tolist()
    items = log_.items.tolist()
    train_rows: list[int] = []
    val: dict[int, int] = {}
    test: dict[int, int] = {}
    positives: list[frozenset] = [frozenset()] * log_.num_users
    dropped = 0
    for u in sorted(by_user):
        rows = by_user[u]
        if len(rows) < 3:
            dropped += 1
            continue
        rows.sort(key=lambda r: (ts[r], item_keys[items[r]]))
        test[u] = items[rows[-1]]
        val[u] = items[rows[-2]]
        train_rows.extend(rows[:-2])
        positives[u] = frozenset(items[r] for r in rows)
    if dropped:
        log.warning("leave_one_out_split: dropped %d users with fewer than 3 interactions", dropped)
    keep = np.array(sorted(train_rows), dtype=np.int64)
    return SplitDataset(log_.subset(keep), val, test, positives, dropped)


# --------------------------------------------------------------------------
# text hashing
# --------------------------------------------------------------------------


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def hash_text(text: str, H: int = DEFAULT_HASH_SIZE) -> list[int]:
    """Map each token to ``1 + fnv1a_64(token) mod (H - 1)``; index 0 stays free for padding."""
    if H < 2:
        raise ConfigError(f"hash space must be at least 2, got {H}")
    return [1 + fnv1a_64(tok.encode("utf-8")) % (H - 1) for tok in tokenize(text)]


def compute_input_length(lengths: Sequence[int]) -> int:
    """``ceil(mean + population std)`` of sequence lengths, at least 1."""
    if len(lengths) == 0:
        raise ConfigError("compute_input_length needs at least one length")
    arr = np.asarray(lengths, dtype=np.float64)
    return max(1, int(math.ceil(arr.mean() + arr.std(ddof=0))))


def pad_or_truncate(seq: Sequence[int], L: int) -> tuple[list[int], list[bool]]:
    if L < 1:
        raise ConfigError(f"input length must be positive, got {L}")
    kept = list(seq[:L])
    pad = L - len(kept)
    return kept + [0] * pad, [True] * len(kept) + [False] * pad


# --------------------------------------------------------------------------
# feature tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    entity: str
    kind: str
    vocab_size: int
    input_length: int
    embedding_dim: int

    def __post_init__(self):
        if self.entity not in ENTITIES:
            raise ConfigError(f"feature {self.name!r}: entity must be one of {ENTITIES}")
        if self.kind not in KINDS:
            raise ConfigError(f"feature {self.name!r}: kind must be one of {KINDS}")
        if self.vocab_size < 2:
            raise ConfigError(f"feature {self.name!r}: vocab_size must be >= 2")
        if self.input_length < 1:
            raise ConfigError(f"feature {self.name!r}: input_length must be >= 1")
        if self.embedding_dim < 1:
            raise ConfigError(f"feature {self.name!r}: embedding_dim must be >= 1")

    @property
    def oov_index(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return {
            "name": self.name, "entity": self.entity, "kind": self.kind,
            "vocab_size": self.vocab_size, "input_length": self.input_length,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        return cls(
            str(d["name"]), str(d["entity"]), str(d["kind"]), int(d["vocab_size"]),
            int(d["input_length"]), int(d["embedding_dim"]),
        )


@dataclass
class FeatureTable:
    spec: FeatureSpec
    indices: np.ndarray
    vocabulary: dict[str, int] = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.indices != 0

    @property
    def num_entities(self) -> int:
        return self.indices.shape[0]

    def rows(self, ids) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_entities):
            raise IdLookupError(
                f"feature {self.spec.name!r}: entity id outside [0, {self.num_entities})"
            )
        idx = self.indices[ids]
        return idx, idx != 0


def _as_labels(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    return [str(v) for v in value]


def build_vocabulary(values: Mapping) -> dict[str, int]:
    """Frozen label vocabulary: sorted distinct labels mapped to 1..n."""
    labels = sorted({lab for v in values.values() for lab in _as_labels(v)})
    return {lab: i + 1 for i, lab in enumerate(labels)}


def build_feature_table(entity_values: Mapping[int, object], spec: FeatureSpec,
                        num_entities: int, vocabulary: Mapping[str, int] | None = None) -> FeatureTable:
    """Encode raw per-entity values into a fixed-length index table.

    Categorical values are label lists passed through ``vocabulary``; labels
    outside it map to ``spec.oov_index``. Text values are hashed into
    ``[1, spec.vocab_size)``. Entities without a value get an all-padding row.
    """
    L = spec.input_length
    indices = np.zeros((num_entities, L), dtype=np.int64)
    vocab = dict(vocabulary) if vocabulary is not None else {}
    if spec.kind == "categorical":
        if vocabulary is None:
            vocab = build_vocabulary(entity_values)
        if vocab and max(vocab.values()) >= spec.oov_index:
            raise ConfigError(
                f"feature {spec.name!r}: vocabulary of {len(vocab)} labels does not fit "
                f"vocab_size {spec.vocab_size} (padding and OOV slots reserved)"
            )
    for ent, value in entity_values.items():
        ent = int(ent)
        if not 0 <= ent < num_entities:
            raise IdLookupError(f"feature {spec.name!r}: entity {ent} outside [0, {num_entities})")
        if spec.kind == "text":
            seq = hash_text(value or "", spec.vocab_size)
        else:
            seq = [vocab.get(lab, spec.oov_index) for lab in _as_labels(value)]
        row, _ = pad_or_truncate(seq, L)
        indices[ent] = row
    return FeatureTable(spec, indices, vocab)


def prepare_feature(name: str, entity: str, kind: str, entity_values: Mapping[int, object],
                    num_entities: int, embedding_dim: int, hash_size: int = DEFAULT_HASH_SIZE,
                    input_length: int | None = None) -> FeatureTable:
    """Resolve vocabulary size and input length from the data, then build the table.

    Text input length follows the mean-plus-std rule over entities that have
    text; categorical input length is the largest label count.
    """
    if kind == "text":
        vocab_size = hash_size
        vocab = None
        if input_length is None:
            lengths = [len(tokenize(v or "")) for v in entity_values.values()]
            input_length = compute_input_length(lengths) if lengths else 1
    elif kind == "categorical":
        vocab = build_vocabulary(entity_values)
        vocab_size = len(vocab) + 2
        if input_length is None:
            input_length = max([len(_as_labels(v)) for v in entity_values.values()] + [1])
    else:
        raise ConfigError(f"feature {name!r}: kind must be one of {KINDS}")
    spec = FeatureSpec(name, entity, kind, vocab_size, input_length, embedding_dim)
    return build_feature_table(entity_values, spec, num_entities, vocab)


# --------------------------------------------------------------------------
# side-feature files
# --------------------------------------------------------------------------


def load_categorical_features(path) -> dict[str, dict[str, list[str]]]:
    """Read ``entity_raw_id<TAB>feature_name<TAB>value`` lines; repeats form multi-labels."""
    out: dict[str, dict[str, list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected entity_raw_id<TAB>feature_name<TAB>value", path, lineno)
            ent, feat, value = (p.strip() for p in parts)
            out.setdefault(feat, {}).setdefault(ent, []).append(value)
    return out


def load_movielens_users(path) -> dict[str, dict[str, list[str]]]:
    """Read MovieLens ``users.dat`` into gender / age / occupation label maps."""
    out: dict[str, dict[str, list[str]]] = {"gender": {}, "age": {}, "occupation": {}}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("::")
            if len(parts) != 5:
                raise ParseError("expected UserID::Gender::Age::Occupation::Zip-code", path, lineno)
            uid = parts[0].strip()
            out["gender"][uid] = [parts[1].strip()]
            out["age"][uid] = [parts[2].strip()]
            out["occupation"][uid] = [parts[3].strip()]
    return out


def load_text_features(directory) -> dict[str, str]:
    """Read every ``<entity_raw_id>.txt`` in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"text feature directory {directory} does not exist")
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".txt"):
            out[name[:-4]] = (directory / name).read_text(encoding="utf-8", errors="replace")
    return out


def to_dense_keys(raw_values: Mapping[str, object], index: Mapping[str, int]) -> dict[int, object]:
    """Re-key raw-id feature values by dense id, ignoring entities absent from the log."""
    return {index[raw]: v for raw, v in raw_values.items() if raw in index}
