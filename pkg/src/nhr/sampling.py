"""Per-epoch training negatives and fixed evaluation candidate sets.

Both samplers use uniform rejection sampling over item ids and never emit an
item the user is known to have interacted with (train, validation or test).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import InteractionLog, SplitDataset
from .errors import ConfigError, ParseError, ProtocolError, SamplingError


class PositiveIndex:
    """Vectorised membership test for known (user, item) positives."""

    def __init__(self, positives_by_user: Sequence[frozenset], num_items: int):
        self.num_items = num_items
        self.counts = np.array([len(p) for p in positives_by_user], dtype=np.int64)
        keys = [u * num_items + i for u, pos in enumerate(positives_by_user) for i in pos]
        self.keys = np.unique(np.asarray(keys, dtype=np.int64))

    def contains(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        if self.keys.size == 0:
            return np.zeros(q.shape, dtype=bool)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, self.keys.size - 1)
        return self.keys[pos] == q


def draw_negatives(users, index: PositiveIndex, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn non-positive item per entry of ``users``."""
    users = np.asarray(users, dtype=np.int64)
    if users.size:
        full = np.unique(users[index.counts[users] >= index.num_items])
        if full.size:
            raise SamplingError(
                f"user {int(full[0])} has interacted with every item; no negatives to sample"
            )
    items = rng.integers(0, index.num_items, size=users.shape, dtype=np.int64)
    bad = np.flatnonzero(index.contains(users, items))
    while bad.size:
        items[bad] = rng.integers(0, index.num_items, size=bad.size, dtype=np.int64)
        bad = bad[index.contains(users[bad], items[bad])]
    return items


@dataclass
class EpochBatchPlan:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    batch_size: int
    order: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def num_batches(self) -> int:
        return -(-len(self.users) // self.batch_size)

    def batches(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        for start in range(0, len(self.order), self.batch_size):
            sel = self.order[start:start + self.batch_size]
            yield self.users[sel], self.items[sel], self.labels[sel]


def sample_epoch(train: InteractionLog, positives: PositiveIndex | Sequence[frozenset],
                 ratio: int, rng: np.random.Generator, batch_size: int = 128) -> EpochBatchPlan:
    """Pair every training positive with ``ratio`` fresh negatives, then shuffle."""
    if ratio < 1:
        raise ConfigError(f"negative ratio must be >= 1, got {ratio}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if not isinstance(positives, PositiveIndex):
        positives = PositiveIndex(positives, train.num_items)
    neg_users = np.repeat(train.users, ratio)
    neg_items = draw_negatives(neg_users, positives, rng)
    users = np.concatenate([train.users, neg_users])
    items = np.concatenate([train.items, neg_items])
    labels = np.concatenate([
        np.ones(len(train.users), dtype=np.float32),
        np.zeros(len(neg_users), dtype=np.float32),
    ])
    order = rng.permutation(len(users))
    return EpochBatchPlan(users, items, labels, batch_size, order)


@dataclass
class EvalCandidates:
    """Per-user candidate lists; the held-out target is stored last in each row."""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self._row = {int(u): r for r, u in enumerate(self.users)}

    @property
    def targets(self) -> np.ndarray:
        return self.items[:, -1]

    @property
    def size(self) -> int:
        return self.items.shape[1]

    def __len__(self):
        return len(self.users)

    def __contains__(self, user) -> bool:
        return int(user) in self._row

    def for_user(self, user) -> np.ndarray:
        try:
            return self.items[self._row[int(user)]]
        except KeyError:
            raise ProtocolError(f"user {user} has no evaluation candidates") from None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.users.astype("<i8").tobytes())
        h.update(self.items.astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for u, row in zip(self.users.tolist(), self.items.tolist()):
                fh.write(f"{u}\t{','.join(map(str, row))}\n")

    @classmethod
    def from_tsv(cls, path) -> "EvalCandidates":
        users, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    u, items = line.split("\t")
                    users.append(int(u))
                    rows.append([int(x) for x in items.split(",")])
                except ValueError:
                    raise ParseError("expected user<TAB>item1,item2,...", path, lineno) from None
        if len({len(r) for r in rows}) > 1:
            raise ParseError("candidate rows differ in length", path)
        return cls(np.array(users, dtype=np.int64), np.array(rows, dtype=np.int64).reshape(len(users), -1))


def sample_eval_candidates(split: SplitDataset, n: int, rng: np.random.Generator,
                           target: str = "test") -> EvalCandidates:
    """Draw ``n`` distinct negatives per user and append the held-out item.

    ``target`` selects the held-out item: ``"test"`` or ``"val"``.
    """
    if target not in ("test", "val"):
        raise ConfigError(f"target must be 'test' or 'val', got {target!r}")
    if n < 0:
        raise ConfigError(f"number of negatives must be >= 0, got {n}")
    held = split.test if target == "test" else split.val
    num_items = split.num_items
    users = sorted(held)
    rows = np.empty((len(users), n + 1), dtype=np.int64)
    for r, u in enumerate(users):
        pos = split.positives_by_user[u]
        eligible = num_items - len(pos)
        if n > eligible:
            raise SamplingError(
                f"user {u}: cannot draw {n} distinct negatives from {eligible} eligible items"
            )
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < n:
            draw = rng.integers(0, num_items, size=max(8, 2 * (n - len(chosen))))
            for it in draw.tolist():
                if it in pos or it in seen:
                    continue
                seen.add(it)
                chosen.append(it)
                if len(chosen) == n:
                    break
        rows[r, :n] = chosen
        rows[r, n] = held[u]
    return EvalCandidates(np.array(users, dtype=np.int64), rows)
