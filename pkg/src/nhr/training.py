"""Epoch loop, pretraining of independent components, fusion-weight search, fine-tuning."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureTable, SplitDataset
from .errors import ConfigError, TrainingError
from .evaluation import evaluate, score_candidates, target_positions
from .models import FusedModel, NeuralScorer, build_model, fuse, save_checkpoint
from .sampling import EvalCandidates, PositiveIndex, sample_epoch
from .tensor import Adam, bce_sum, derive_seed, make_rng, sigmoid

log = logging.getLogger(__name__)

STUDIED_PF = (8, 16, 32, 64)


@dataclass
class TrainConfig:
    pf: int = 8
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    text_batch_size: int = 32
    negative_ratio: int = 4
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    k: int = 10

    def __post_init__(self):
        for name in ("pf", "batch_size", "text_batch_size", "negative_ratio", "max_epochs", "patience", "k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"TrainConfig.{name} must be positive")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.pf not in STUDIED_PF:
            log.info("pf=%d is outside the studied set %s", self.pf, STUDIED_PF)

    def batch_size_for(self, model) -> int:
        return self.text_batch_size if model.uses_text else self.batch_size


@dataclass
class EpochRecord:
    epoch: int
    loss_sum: float | None
    loss_mean: float | None
    val_hr: float | None
    val_ndcg: float | None
    seconds: float = 0.0


@dataclass
class TrainReport:
    model: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""

    @property
    def best(self) -> EpochRecord | None:
        for rec in self.epochs:
            if rec.epoch == self.best_epoch:
                return rec
        return None

    def deterministic_dict(self) -> dict:
        """Report content without wall-clock times."""
        epochs = []
        for rec in self.epochs:
            d = asdict(rec)
            d.pop("seconds")
            epochs.append(d)
        return {"model": self.model, "epochs": epochs, "best_epoch": self.best_epoch,
                "stop_reason": self.stop_reason}

    def to_jsonl(self) -> str:
        """One JSON line per epoch plus a summary line; wall-clock times excluded."""
        d = self.deterministic_dict()
        lines = [json.dumps({"model": self.model, **e}, sort_keys=True) for e in d["epochs"]]
        lines.append(json.dumps({"model": self.model, "best_epoch": self.best_epoch,
                                 "stop_reason": self.stop_reason, "summary": True}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def timing_jsonl(self) -> str:
        return "".join(
            json.dumps({"model": self.model, "epoch": r.epoch, "seconds": round(r.seconds, 4)}) + "\n"
            for r in self.epochs
        )


def _snapshot(model):
    return [p.value.copy() for _, p in model.named_parameters()]


def _restore(model, snap):
    for (_, p), value in zip(model.named_parameters(), snap):
        p.value[...] = value


def _round(x):
    return None if x is None else round(float(x), 10)


def train_epoch(model: NeuralScorer, opt: Adam, plan, features, epoch: int) -> float:
    """One pass of minibatch Adam on summed BCE. Returns the epoch's summed loss."""
    total = 0.0
    for b, (users, items, labels) in enumerate(plan.batches()):
        opt.zero_grad()
        logits = model.logits(users, items, features)
        pred = sigmoid(logits.astype(np.float64))
        loss = bce_sum(pred, labels)
        if not np.isfinite(loss) or not np.all(np.isfinite(logits)):
            raise TrainingError(
                f"{model.kind}: non-finite loss at epoch {epoch}, batch {b} (lr={opt.lr})"
            )
        model.backward(pred - labels)
        opt.step()
        total += loss
    opt.zero_grad()
    return total


def train(model: NeuralScorer, split: SplitDataset, features: Mapping[str, FeatureTable] | None,
          cfg: TrainConfig, val_candidates: EvalCandidates | None = None, *, tag: str | None = None,
          seed: int | None = None, eval_initial: bool = False) -> TrainReport:
    """Train ``model`` in place and leave it holding its best-validation parameters.

    Every epoch redraws negatives, shuffles, and runs minibatch Adam on the
    summed BCE. With ``val_candidates`` the epoch with the highest validation
    HR@k is kept and training stops after ``cfg.patience`` epochs without
    improvement; otherwise the final epoch is kept. ``eval_initial`` also
    scores the starting parameters as epoch 0 so they can win.
    """
    tag = tag or model.kind
    rng = make_rng(derive_seed(cfg.seed if seed is None else seed, "train", tag))
    opt = Adam(model.trainable_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    index = PositiveIndex(split.positives_by_user, split.num_items)
    batch_size = cfg.batch_size_for(model)
    report = TrainReport(tag)

    best_hr, best_snap, since_best = -1.0, None, 0

    def validate():
        if val_candidates is None:
            return None, None
        r = evaluate(model, None, val_candidates, features, k=cfg.k)
        return r.hr, r.ndcg

    if eval_initial and val_candidates is not None:
        hr, ndcg = validate()
        report.epochs.append(EpochRecord(0, None, None, _round(hr), _round(ndcg)))
        best_hr, best_snap, report.best_epoch = hr, _snapshot(model), 0

    report.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        plan = sample_epoch(split.train, index, cfg.negative_ratio, rng, batch_size)
        loss = train_epoch(model, opt, plan, features, epoch)
        hr, ndcg = validate()
        rec = EpochRecord(epoch, _round(loss), _round(loss / max(len(plan), 1)), _round(hr), _round(ndcg),
                          time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("%s epoch %d loss %.4f val HR %s NDCG %s", tag, epoch, loss, rec.val_hr, rec.val_ndcg)
        if val_candidates is None:
            report.best_epoch = epoch
            continue
        if hr > best_hr:
            best_hr, best_snap, since_best = hr, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stop_reason = "early_stop"
                break
    if best_snap is not None:
        _restore(model, best_snap)
    return report


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    kind: str
    features: tuple[str, ...] = ()


def default_components(features: Mapping[str, FeatureTable] | None,
                       separate_aux: bool = False) -> list[ComponentSpec]:
    """GMF, MLP, plus either one Aux model over all features or one per feature kind."""
    comps = [ComponentSpec("gmf", "gmf"), ComponentSpec("mlp", "mlp")]
    if not features:
        return comps
    if separate_aux:
        for kind in ("categorical", "text"):
            names = tuple(n for n, t in features.items() if t.spec.kind == kind)
            if names:
                comps.append(ComponentSpec(f"aux_{kind}", "aux", names))
    else:
        comps.append(ComponentSpec("aux", "aux", tuple(features)))
    return comps


def pretrain_all(split: SplitDataset, features: Mapping[str, FeatureTable] | None, cfg: TrainConfig,
                 components: Sequence[ComponentSpec] | None = None,
                 val_candidates: EvalCandidates | None = None, out_dir=None):
    """Train each component independently from a fresh Xavier init.

    Returns ``{name: (model, report)}``. With ``out_dir`` each model is also
    written to ``<name>.nhr`` and its report to ``<name>.train.jsonl``.
    """
    if components is None:
        components = default_components(features)
    features = features or {}
    out = {}
    for comp in components:
        specs = []
        for fname in comp.features:
            if fname not in features:
                raise ConfigError(f"component {comp.name!r} needs unknown feature {fname!r}")
            specs.append(features[fname].spec)
        seed = derive_seed(cfg.seed, "init", comp.name)
        model = build_model(comp.kind, split.num_users, split.num_items, cfg.pf, specs, seed)
        report = train(model, split, features, cfg, val_candidates, tag=comp.name,
                       seed=derive_seed(cfg.seed, "sample", comp.name))
        if out_dir is not None:
            from pathlib import Path
            d = Path(out_dir)
            save_checkpoint(model, d / f"{comp.name}.nhr")
            (d / f"{comp.name}.train.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        out[comp.name] = (model, report)
    return out


# --------------------------------------------------------------------------
# fusion weights
# --------------------------------------------------------------------------


def simplex_grid(n: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors of length ``n`` on the probability simplex at resolution ``step``."""
    if n < 2:
        raise ConfigError("fusion-weight search needs at least two components")
    if not step > 0:
        raise ConfigError(f"grid step must be positive, got {step}")
    parts = round(1.0 / step)
    if parts < 1 or abs(parts * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1")
    grid = []
    for cuts in itertools.combinations_with_replacement(range(parts + 1), n - 1):
        counts = np.diff((0, *cuts, parts))
        grid.append(tuple(int(c) / parts for c in counts))
    grid.sort(reverse=True)
    if not grid:
        raise ConfigError("empty fusion-weight grid")
    return grid


def search_fusion_weights(components: Sequence[NeuralScorer], val_candidates: EvalCandidates,
                          features=None, step: float = 0.1, k: int = 10):
    """Exhaustive simplex search for the fusion weights with the best validation HR@k.

    Scoring uses fused-at-init logits, which equal the weighted sum of
    component logits, so each component is scored once. Ties prefer the
    point closest to uniform, then the lexicographically largest vector.
    Returns ``(weights, [(weights, hr), ...])``.
    """
    grid = simplex_grid(len(components), step)
    logits = np.stack([score_candidates(c, val_candidates, features) for c in components])
    uniform = np.full(len(components), 1.0 / len(components))
    results = []
    for w in grid:
        s = np.tensordot(np.asarray(w), logits, axes=1)
        pos = target_positions(s, val_candidates.items, val_candidates.targets)
        results.append((w, float(np.mean(pos <= k))))
    best = min(results, key=lambda r: (-r[1], round(float(np.sum((np.asarray(r[0]) - uniform) ** 2)), 12),
                                       tuple(-x for x in r[0])))
    return list(best[0]), results


def finetune_fused(fused: FusedModel, split: SplitDataset, features, cfg: TrainConfig,
                   val_candidates: EvalCandidates | None = None, tag: str = "fused") -> TrainReport:
    """Continue training a fused model with the same loop as ``train``.

    The fused-at-init parameters are scored as epoch 0 and kept if no later
    epoch beats them on validation.
    """
    return train(fused, split, features, cfg, val_candidates, tag=tag, eval_initial=True)


def build_fused(components: Sequence[NeuralScorer], split: SplitDataset, features, cfg: TrainConfig,
                val_candidates: EvalCandidates, weights=None, step: float = 0.1,
                freeze_bodies: bool = False, tag: str = "fused"):
    """Weight search (unless ``weights`` is given), fusion, then fine-tuning."""
    if weights is None:
        weights, _ = search_fusion_weights(components, val_candidates, features, step, cfg.k)
    fused = fuse(components, weights, freeze_bodies)
    report = finetune_fused(fused, split, features, cfg, val_candidates, tag)
    return fused, weights, report
