"""GMF, MLP and auxiliary-feature scorers, their weighted fusion, and checkpoints.

Every neural scorer is split into a *body* that produces the predictive
factors (the last hidden layer, width ``pf``) and a one-unit *head*
``sigmoid(w . h + b)``. Fusion concatenates component bodies and builds a new
head from the component heads scaled by the fusion weights.
"""

from __future__ import annotations

import copy
import json
import struct
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureSpec, FeatureTable
from .errors import CheckpointError, ConfigError
from .tensor import DTYPE, Dense, Embedding, Parameter, PooledEmbedding, make_rng, sigmoid

Features = Mapping[str, FeatureTable]

WEIGHT_SUM_TOL = 1e-9


class Scorer:
    """Common surface for everything that scores (user, item) pairs."""

    kind = "abstract"

    def score(self, users, items, features: Features | None = None) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        raise NotImplementedError

    @property
    def feature_specs(self) -> list[FeatureSpec]:
        return []

    @property
    def uses_text(self) -> bool:
        return any(s.kind == "text" for s in self.feature_specs)


class NeuralScorer(Scorer):
    pf: int
    head: Dense

    # subclasses implement body_forward / body_backward / body_layers

    def body_layers(self) -> list:
        raise NotImplementedError

    def body_parameters(self) -> list[Parameter]:
        return [p for layer in self.body_layers() for p in layer.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.body_parameters() + self.head.parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return self.parameters()

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def logits(self, users, items, features: Features | None = None) -> np.ndarray:
        h = self.body_forward(users, items, features)
        return self.head.forward(h)[..., 0]

    def forward(self, users, items, features: Features | None = None) -> np.ndarray:
        return sigmoid(self.logits(users, items, features))

    def score(self, users, items, features=None):
        return self.logits(np.atleast_1d(users), np.atleast_1d(items), features)

    def backward(self, dlogits):
        """Accumulate parameter gradients given d(loss)/d(logit) per instance."""
        dlogits = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
        dh = self.head.backward(dlogits)
        self.body_backward(dh)

    def predictive_factors(self, users, items, features: Features | None = None) -> np.ndarray:
        return self.body_forward(np.atleast_1d(users), np.atleast_1d(items), features)

    def astype(self, dtype) -> "NeuralScorer":
        """Deep copy with every parameter cast to ``dtype`` (used by gradient checks)."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        return clone


class GMFModel(NeuralScorer):
    """Element-wise product of user and item embeddings fed to a sigmoid unit."""

    kind = "gmf"

    def __init__(self, num_users, num_items, pf, rng=None, dtype=DTYPE):
        self.num_users, self.num_items, self.pf = num_users, num_items, pf
        self.user_emb = Embedding("gmf.user", num_users, pf, rng, dtype)
        self.item_emb = Embedding("gmf.item", num_items, pf, rng, dtype)
        self.head = Dense("gmf.out", pf, 1, "identity", rng, dtype)
        self._cache = None

    def body_layers(self):
        return [self.user_emb, self.item_emb]

    def body_forward(self, users, items, features=None):
        p = self.user_emb.forward(users)
        q = self.item_emb.forward(items)
        self._cache = (p, q)
        return p * q

    def body_backward(self, dh):
        p, q = self._cache
        self._cache = None
        self.user_emb.backward(dh * q)
        self.item_emb.backward(dh * p)

    def config(self):
        return {"num_users": self.num_users, "num_items": self.num_items, "pf": self.pf}

    @classmethod
    def from_config(cls, cfg, specs):
        return cls(cfg["num_users"], cfg["num_items"], cfg["pf"])


def _tower(prefix, widths, rng, dtype):
    return [
        Dense(f"{prefix}.h{k}", widths[k], widths[k + 1], "relu", rng, dtype)
        for k in range(len(widths) - 1)
    ]


class MLPModel(NeuralScorer):
    """Three ReLU layers (4pf, 2pf, pf) over concatenated 2pf-wide embeddings."""

    kind = "mlp"

    def __init__(self, num_users, num_items, pf, rng=None, dtype=DTYPE):
        self.num_users, self.num_items, self.pf = num_users, num_items, pf
        self.user_emb = Embedding("mlp.user", num_users, 2 * pf, rng, dtype)
        self.item_emb = Embedding("mlp.item", num_items, 2 * pf, rng, dtype)
        self.hidden = _tower("mlp", [4 * pf, 4 * pf, 2 * pf, pf], rng, dtype)
        self.head = Dense("mlp.out", pf, 1, "identity", rng, dtype)

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_dim for layer in self.hidden]

    def body_layers(self):
        return [self.user_emb, self.item_emb, *self.hidden]

    def body_forward(self, users, items, features=None):
        x = np.concatenate([self.user_emb.forward(users), self.item_emb.forward(items)], axis=-1)
        for layer in self.hidden:
            x = layer.forward(x)
        return x

    def body_backward(self, dh):
        for layer in reversed(self.hidden):
            dh = layer.backward(dh)
        d = 2 * self.pf
        self.user_emb.backward(dh[:, :d])
        self.item_emb.backward(dh[:, d:])

    def config(self):
        return {"num_users": self.num_users, "num_items": self.num_items, "pf": self.pf}

    @classmethod
    def from_config(cls, cfg, specs):
        return cls(cfg["num_users"], cfg["num_items"], cfg["pf"])


class AuxModel(NeuralScorer):
    """Scorer over side features only: pooled embeddings, concatenated, two ReLU layers.

    Features are concatenated in the order ``specs`` is given. The model never
    sees interaction ids, so it can score entities with no history.
    """

    kind = "aux"

    def __init__(self, specs: Sequence[FeatureSpec], pf, rng=None, dtype=DTYPE):
        specs = list(specs)
        if not specs:
            raise ConfigError("AuxModel needs at least one feature spec")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate feature names in {names}")
        self.specs, self.pf = specs, pf
        self.embeddings = [
            PooledEmbedding(f"aux.{s.name}", s.vocab_size, s.embedding_dim, rng, dtype) for s in specs
        ]
        concat = sum(s.embedding_dim for s in specs)
        self.hidden = _tower("aux", [concat, 2 * pf, pf], rng, dtype)
        self.head = Dense("aux.out", pf, 1, "identity", rng, dtype)

    @property
    def feature_specs(self):
        return list(self.specs)

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_dim for layer in self.hidden]

    def body_layers(self):
        return [*self.embeddings, *self.hidden]

    def gather_rows(self, users, items, features: Features | None):
        if features is None:
            raise ConfigError("AuxModel needs feature tables")
        rows = {}
        for spec in self.specs:
            table = features.get(spec.name)
            if table is None:
                raise ConfigError(f"missing feature table {spec.name!r}")
            if table.spec != spec:
                raise ConfigError(
                    f"feature table {spec.name!r} does not match the model's spec: {table.spec} != {spec}"
                )
            rows[spec.name] = table.rows(users if spec.entity == "user" else items)
        return rows

    def body_from_rows(self, rows):
        pooled = []
        for spec, emb in zip(self.specs, self.embeddings):
            if spec.name not in rows:
                raise ConfigError(f"missing feature rows for {spec.name!r}")
            indices, mask = rows[spec.name]
            pooled.append(emb.forward(indices, mask))
        x = np.concatenate(pooled, axis=-1)
        for layer in self.hidden:
            x = layer.forward(x)
        return x

    def body_forward(self, users, items, features=None):
        return self.body_from_rows(self.gather_rows(users, items, features))

    def body_backward(self, dh):
        for layer in reversed(self.hidden):
            dh = layer.backward(dh)
        start = 0
        for spec, emb in zip(self.specs, self.embeddings):
            emb.backward(dh[:, start:start + spec.embedding_dim])
            start += spec.embedding_dim

    def config(self):
        return {"pf": self.pf}

    @classmethod
    def from_config(cls, cfg, specs):
        return cls(specs, cfg["pf"])


def aux_forward(model: AuxModel, user_feature_rows, item_feature_rows) -> np.ndarray:
    """Probability from per-feature ``(indices, mask)`` rows keyed by feature name."""
    rows = {**user_feature_rows, **item_feature_rows}
    h = model.body_from_rows(rows)
    return sigmoid(model.head.forward(h)[..., 0])


def gmf_forward(model: GMFModel, u, i) -> np.ndarray:
    return model.forward(np.atleast_1d(u), np.atleast_1d(i))


def mlp_forward(model: MLPModel, u, i) -> np.ndarray:
    return model.forward(np.atleast_1d(u), np.atleast_1d(i))


def predictive_factors(model: NeuralScorer, users, items, features=None) -> np.ndarray:
    return model.predictive_factors(users, items, features)


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------


def check_weights(weights, n: int) -> list[float]:
    weights = [float(w) for w in weights]
    if len(weights) != n:
        raise ConfigError(f"{len(weights)} fusion weights given for {n} components")
    if any(not np.isfinite(w) or w < 0 for w in weights):
        raise ConfigError(f"fusion weights must be finite and non-negative, got {weights}")
    total = sum(weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigError(f"fusion weights must sum to 1, got {weights} (sum {total})")
    return weights


class FusedModel(NeuralScorer):
    """Concatenated component bodies under a head initialised from weighted component heads."""

    kind = "fused"

    def __init__(self, components: Sequence[NeuralScorer], weights, freeze_bodies=False, _init_head=True):
        components = list(components)
        if len(components) < 2:
            raise ConfigError("fusion needs at least two components")
        if len({id(c) for c in components}) != len(components):
            raise ConfigError("the same component object was passed to fusion twice")
        self.weights = check_weights(weights, len(components))
        self.components = [copy.deepcopy(c) for c in components]
        self.freeze_bodies = freeze_bodies
        self.pf = sum(c.pf for c in self.components)
        dtype = self.components[0].head.W.value.dtype
        self.head = Dense("fused.out", self.pf, 1, "identity", None, dtype)
        if _init_head:
            self.head.W.value[...] = np.concatenate(
                [w * c.head.W.value.astype(np.float64) for w, c in zip(self.weights, self.components)],
                axis=1,
            )
            self.head.b.value[...] = sum(
                w * c.head.b.value.astype(np.float64) for w, c in zip(self.weights, self.components)
            )

    @property
    def feature_specs(self):
        seen, out = set(), []
        for c in self.components:
            for s in c.feature_specs:
                if s.name not in seen:
                    seen.add(s.name)
                    out.append(s)
        return out

    def body_layers(self):
        return [layer for c in self.components for layer in c.body_layers()]

    def trainable_parameters(self):
        if self.freeze_bodies:
            return self.head.parameters()
        return self.parameters()

    def named_parameters(self):
        out = []
        for k, c in enumerate(self.components):
            out.extend((f"c{k}.{name}", p) for name, p in c.named_parameters())
        out.extend((p.name, p) for p in self.head.parameters())
        return out

    def body_forward(self, users, items, features=None):
        return np.concatenate([c.body_forward(users, items, features) for c in self.components], axis=-1)

    def body_backward(self, dh):
        if self.freeze_bodies:
            return
        start = 0
        for c in self.components:
            c.body_backward(dh[:, start:start + c.pf])
            start += c.pf

    def component_logits(self, users, items, features=None) -> np.ndarray:
        """Pre-sigmoid logits of each component, shape ``(len(components), B)``."""
        return np.stack([c.logits(users, items, features) for c in self.components])

    def config(self):
        return {
            "weights": self.weights,
            "freeze_bodies": self.freeze_bodies,
            "components": [{"kind": c.kind, "config": c.config(),
                            "features": [s.name for s in c.feature_specs]} for c in self.components],
        }

    @classmethod
    def from_config(cls, cfg, specs):
        by_name = {s.name: s for s in specs}
        comps = []
        for entry in cfg["components"]:
            klass = MODEL_KINDS[entry["kind"]]
            comps.append(klass.from_config(entry["config"], [by_name[n] for n in entry["features"]]))
        return cls(comps, cfg["weights"], cfg["freeze_bodies"], _init_head=False)


def fuse(components: Sequence[NeuralScorer], weights, freeze_bodies: bool = False) -> FusedModel:
    """Build a fused model from pre-trained components; parameters are copied in."""
    return FusedModel(components, weights, freeze_bodies)


def fused_forward(fused: FusedModel, u, i, features=None) -> np.ndarray:
    return fused.forward(np.atleast_1d(u), np.atleast_1d(i), features)


def build_model(kind: str, num_users: int, num_items: int, pf: int,
                specs: Sequence[FeatureSpec] = (), seed: int = 0, dtype=DTYPE) -> NeuralScorer:
    rng = make_rng(seed)
    if kind == "gmf":
        return GMFModel(num_users, num_items, pf, rng, dtype)
    if kind == "mlp":
        return MLPModel(num_users, num_items, pf, rng, dtype)
    if kind == "aux":
        return AuxModel(specs, pf, rng, dtype)
    raise ConfigError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"NHR1"
FORMAT_VERSION = 1

MODEL_KINDS: dict[str, type] = {
    "gmf": GMFModel,
    "mlp": MLPModel,
    "aux": AuxModel,
    "fused": FusedModel,
}


def register_kind(klass):
    MODEL_KINDS[klass.kind] = klass
    return klass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: Scorer) -> bytes:
    meta = {
        "config": model.config(),
        "features": [s.to_dict() for s in model.feature_specs],
    }
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(model.kind),
           _pack_str(json.dumps(meta, sort_keys=True, separators=(",", ":")))]
    params = model.named_parameters()
    out.append(struct.pack("<I", len(params)))
    for name, p in params:
        arr = np.ascontiguousarray(p.value, dtype="<f4")
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model: Scorer, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("checkpoint contains an invalid UTF-8 string") from None


def checkpoint_from_bytes(data: bytes, expected_kind: str | None = None) -> Scorer:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an NHR checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = r.string()
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r} in checkpoint")
    try:
        meta = json.loads(r.string())
        specs = [FeatureSpec.from_dict(d) for d in meta["features"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    try:
        model = MODEL_KINDS[kind].from_config(meta["config"], specs)
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"cannot rebuild {kind!r} model from checkpoint: {exc}") from None
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        raise CheckpointError(
            f"parameter set mismatch: missing {sorted(set(params) - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - set(params))}"
        )
    for name, p in params.items():
        if p.value.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != expected {p.value.shape}")
        p.value[...] = arrays[name]
    return model


def load_checkpoint(path, expected_kind: str | None = None) -> Scorer:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data, expected_kind)
