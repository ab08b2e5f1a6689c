"""Non-neural reference scorers: popularity ranking and BPR matrix factorisation."""

from __future__ import annotations

import logging

import numpy as np

from .data import InteractionLog
from .errors import ConfigError, IdLookupError, TrainingError
from .models import Scorer, register_kind
from .sampling import PositiveIndex, draw_negatives
from .tensor import Parameter

log = logging.getLogger(__name__)


@register_kind
class PopRankModel(Scorer):
    """Scores every item by its training interaction count, ignoring the user."""

    kind = "poprank"

    def __init__(self, num_items: int):
        self.counts = Parameter("poprank.counts", np.zeros(num_items, dtype=np.float32))

    def score(self, users, items, features=None):
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        c = self.counts.value
        known = (items >= 0) & (items < len(c))
        return np.where(known, c[np.where(known, items, 0)], 0.0)

    def config(self):
        return {"num_items": int(self.counts.shape[0])}

    @classmethod
    def from_config(cls, cfg, specs):
        return cls(cfg["num_items"])

    def named_parameters(self):
        return [(self.counts.name, self.counts)]


def poprank_fit(train: InteractionLog) -> PopRankModel:
    model = PopRankModel(train.num_items)
    model.counts.value[...] = np.bincount(train.items, minlength=train.num_items)
    return model


def poprank_score(model: PopRankModel, user, item) -> float:
    return float(model.score([user], [item])[0])


@register_kind
class BPRModel(Scorer):
    """Matrix factorisation ``x_ui = <w_u, h_i> + b_i`` trained on pairwise ranking."""

    kind = "bpr"

    def __init__(self, num_users: int, num_items: int, d: int):
        self.user_factors = Parameter("bpr.user", np.zeros((num_users, d), dtype=np.float32))
        self.item_factors = Parameter("bpr.item", np.zeros((num_items, d), dtype=np.float32))
        self.item_bias = Parameter("bpr.bias", np.zeros(num_items, dtype=np.float32))
        self.history: list[float] = []

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def score(self, users, items, features=None):
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        W, H, b = self.user_factors.value, self.item_factors.value, self.item_bias.value
        if users.size and (users.min() < 0 or users.max() >= len(W)):
            raise IdLookupError(f"user id outside [0, {len(W)})")
        if items.size and (items.min() < 0 or items.max() >= len(H)):
            raise IdLookupError(f"item id outside [0, {len(H)})")
        return np.einsum("bd,bd->b", W[users].astype(np.float64), H[items].astype(np.float64)) + b[items]

    def config(self):
        return {"num_users": int(self.user_factors.shape[0]),
                "num_items": int(self.item_factors.shape[0]), "d": self.d}

    @classmethod
    def from_config(cls, cfg, specs):
        return cls(cfg["num_users"], cfg["num_items"], cfg["d"])

    def named_parameters(self):
        return [(p.name, p) for p in (self.user_factors, self.item_factors, self.item_bias)]


def bpr_score(model: BPRModel, user, item) -> float:
    return float(model.score([user], [item])[0])


def bpr_triple_loss(x_ui, x_uj):
    """``-ln sigmoid(x_ui - x_uj)`` computed stably."""
    return np.logaddexp(0.0, -(np.asarray(x_ui, dtype=np.float64) - x_uj))


def bpr_fit(train: InteractionLog, d: int, lr: float = 0.01, reg: float = 0.01, epochs: int = 20,
            rng: np.random.Generator | None = None, positives=None, triples_per_epoch: int | None = None,
            batch_size: int = 64, init_scale: float = 0.1) -> BPRModel:
    """SGD on ``-ln sigmoid(x_ui - x_uj) + reg * ||theta||^2`` over uniform triples.

    Each epoch draws ``triples_per_epoch`` (default ``4 * len(train)``) triples:
    a uniform training positive ``(u, i)`` and a uniform non-positive ``j``.
    Updates are applied in vectorised minibatches of ``batch_size`` triples.
    Item factors start from ``N(0, init_scale^2)``; user factors and biases from zero.
    ``model.history`` records the mean triple loss of each epoch.
    """
    if d < 1:
        raise ConfigError(f"BPR dimension must be >= 1, got {d}")
    if not (lr > 0 and reg > 0):
        raise ConfigError(f"BPR lr and reg must be positive, got lr={lr}, reg={reg}")
    if rng is None:
        raise ConfigError("bpr_fit needs an explicit rng")
    if positives is None:
        sets = [set() for _ in range(train.num_users)]
        for u, i in zip(train.users.tolist(), train.items.tolist()):
            sets[u].add(i)
        positives = [frozenset(s) for s in sets]
    index = positives if isinstance(positives, PositiveIndex) else PositiveIndex(positives, train.num_items)
    n_triples = triples_per_epoch or 4 * len(train)

    model = BPRModel(train.num_users, train.num_items, d)
    # user factors start at zero so a user with no training triples keeps a
    # bias-only ranking; random item factors break the symmetry
    model.item_factors.value[...] = rng.normal(0, init_scale, model.item_factors.shape)
    W = model.user_factors.value.astype(np.float64)
    H = model.item_factors.value.astype(np.float64)
    b = np.zeros(train.num_items, dtype=np.float64)

    with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked explicitly
        for epoch in range(epochs):
            rows = rng.integers(0, len(train), size=n_triples)
            us, ii = train.users[rows], train.items[rows]
            jj = draw_negatives(us, index, rng)
            total = 0.0
            for start in range(0, n_triples, batch_size):
                u, i, j = us[start:start + batch_size], ii[start:start + batch_size], jj[start:start + batch_size]
                wu, hi, hj = W[u], H[i], H[j]
                x = np.einsum("bd,bd->b", wu, hi - hj) + b[i] - b[j]
                total += float(bpr_triple_loss(x, 0.0).sum())
                g = 1.0 / (1.0 + np.exp(x))
                np.add.at(W, u, lr * (g[:, None] * (hi - hj) - reg * wu))
                np.add.at(H, i, lr * (g[:, None] * wu - reg * hi))
                np.add.at(H, j, lr * (-g[:, None] * wu - reg * hj))
                np.add.at(b, i, lr * (g - reg * b[i]))
                np.add.at(b, j, lr * (-g - reg * b[j]))
            mean = total / n_triples
            if not np.isfinite(mean):
                raise TrainingError(f"BPR loss became non-finite at epoch {epoch} (lr={lr}, reg={reg})")
            model.history.append(mean)
            log.debug("bpr epoch %d mean triple loss %.5f", epoch, mean)

    model.user_factors.value[...] = W
    model.item_factors.value[...] = H
    model.item_bias.value[...] = b
    return model
