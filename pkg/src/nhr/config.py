"""YAML experiment configuration.

Relative paths are resolved against the directory holding the config file.
Every training hyperparameter has a default, so a minimal config only names
the interaction file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DEFAULT_HASH_SIZE, ENTITIES, FORMATS, KINDS
from .errors import ConfigError
from .training import TrainConfig

FEATURE_FORMATS = ("tsv", "movielens_users", "text_dir")


@dataclass
class FeatureDecl:
    name: str
    entity: str
    kind: str
    path: Path
    embedding_dim: int
    format: str = "tsv"
    column: str | None = None
    hash_size: int = DEFAULT_HASH_SIZE
    input_length: int | None = None

    @property
    def source_column(self) -> str:
        return self.column or self.name


@dataclass
class ModelDecl:
    name: str
    kind: str
    features: tuple[str, ...] = ()


@dataclass
class FusionDecl:
    name: str
    components: tuple[str, ...]
    weights: tuple[float, ...] | None = None


@dataclass
class BPRDecl:
    lr: float = 0.01
    reg: float = 0.01
    epochs: int = 20
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    interactions: Path
    format: str = "tsv"
    eval_negatives: int = 100
    features: list[FeatureDecl] = field(default_factory=list)
    models: list[ModelDecl] = field(default_factory=list)
    fusions: list[FusionDecl] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    weight_step: float = 0.1
    freeze_bodies: bool = False
    bpr: BPRDecl = field(default_factory=BPRDecl)
    seed: int = 0
    out: Path = Path("nhr-out")

    def feature(self, name: str) -> FeatureDecl:
        for f in self.features:
            if f.name == name:
                return f
        raise ConfigError(f"unknown feature {name!r}")

    def model(self, name: str) -> ModelDecl:
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError(f"unknown model {name!r}")


def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


def _check_keys(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _pos_int(value, where):
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a positive integer, got {value!r}") from None
    if v < 1 or v != value:
        raise ConfigError(f"{where}: expected a positive integer, got {value!r}")
    return v


def parse_config(raw: dict, base: Path) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, ("data", "features", "models", "fusions", "train", "baselines", "seed", "out"), "config")
    data = _require(raw, "data", "config")
    _check_keys(data, ("interactions", "format", "eval_negatives"), "data")
    fmt = data.get("format", "tsv")
    if fmt not in FORMATS:
        raise ConfigError(f"data.format must be one of {FORMATS}, got {fmt!r}")

    features = []
    for k, fd in enumerate(raw.get("features") or []):
        where = f"features[{k}]"
        _check_keys(fd, ("name", "entity", "kind", "path", "embedding_dim", "format", "column",
                         "hash_size", "input_length"), where)
        kind = _require(fd, "kind", where)
        entity = _require(fd, "entity", where)
        if kind not in KINDS or entity not in ENTITIES:
            raise ConfigError(f"{where}: kind must be in {KINDS} and entity in {ENTITIES}")
        ffmt = fd.get("format", "text_dir" if kind == "text" else "tsv")
        if ffmt not in FEATURE_FORMATS:
            raise ConfigError(f"{where}: format must be one of {FEATURE_FORMATS}")
        if (kind == "text") != (ffmt == "text_dir"):
            raise ConfigError(f"{where}: text features are read from a text_dir and only they are")
        features.append(FeatureDecl(
            name=str(_require(fd, "name", where)), entity=entity, kind=kind,
            path=base / str(_require(fd, "path", where)),
            embedding_dim=_pos_int(_require(fd, "embedding_dim", where), f"{where}.embedding_dim"),
            format=ffmt, column=fd.get("column"),
            hash_size=_pos_int(fd.get("hash_size", DEFAULT_HASH_SIZE), f"{where}.hash_size"),
            input_length=None if fd.get("input_length") is None else _pos_int(fd["input_length"], f"{where}.input_length"),
        ))
    names = [f.name for f in features]
    if len(set(names)) != len(names):
        raise ConfigError(f"feature names must be unique, got {names}")

    models = []
    for k, md in enumerate(raw.get("models") or [{"name": "gmf", "kind": "gmf"}, {"name": "mlp", "kind": "mlp"}]):
        where = f"models[{k}]"
        _check_keys(md, ("name", "kind", "features"), where)
        kind = _require(md, "kind", where)
        if kind not in ("gmf", "mlp", "aux"):
            raise ConfigError(f"{where}: kind must be gmf, mlp or aux")
        feats = tuple(md.get("features") or ())
        for fname in feats:
            if fname not in names:
                raise ConfigError(f"{where}: unknown feature {fname!r}")
        if kind == "aux" and not feats:
            raise ConfigError(f"{where}: aux models need at least one feature")
        models.append(ModelDecl(str(md.get("name", kind)), kind, feats))
    mnames = [m.name for m in models]
    if len(set(mnames)) != len(mnames):
        raise ConfigError(f"model names must be unique, got {mnames}")

    fusions = []
    for k, fu in enumerate(raw.get("fusions") or []):
        where = f"fusions[{k}]"
        _check_keys(fu, ("name", "components", "weights"), where)
        comps = tuple(_require(fu, "components", where))
        for c in comps:
            if c not in mnames:
                raise ConfigError(f"{where}: unknown component {c!r}")
        if len(comps) < 2 or len(set(comps)) != len(comps):
            raise ConfigError(f"{where}: needs at least two distinct components")
        w = fu.get("weights")
        fusions.append(FusionDecl(str(_require(fu, "name", where)), comps,
                                  None if w is None else tuple(float(x) for x in w)))

    tr = dict(raw.get("train") or {})
    step = float(tr.pop("weight_step", 0.1))
    freeze = bool(tr.pop("freeze_bodies", False))
    allowed = {f.name for f in fields(TrainConfig)} - {"seed"}
    _check_keys(tr, allowed, "train")
    seed = int(raw.get("seed", 0))
    try:
        train_cfg = TrainConfig(**tr, seed=seed)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None

    bl = dict((raw.get("baselines") or {}).get("bpr") or {})
    _check_keys(bl, ("lr", "reg", "epochs", "batch_size"), "baselines.bpr")

    return ExperimentConfig(
        interactions=base / str(_require(data, "interactions", "data")),
        format=fmt,
        eval_negatives=int(data.get("eval_negatives", 100)),
        features=features, models=models, fusions=fusions, train=train_cfg,
        weight_step=step, freeze_bodies=freeze, bpr=BPRDecl(**bl), seed=seed,
        out=base / str(raw.get("out", "nhr-out")),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, path.parent)


def validate_paths(cfg: ExperimentConfig):
    if not cfg.interactions.is_file():
        raise ConfigError(f"interaction file {cfg.interactions} does not exist")
    for f in cfg.features:
        if f.kind == "text":
            if not f.path.is_dir():
                raise ConfigError(f"feature {f.name!r}: text directory {f.path} does not exist")
        elif not f.path.is_file():
            raise ConfigError(f"feature {f.name!r}: file {f.path} does not exist")
