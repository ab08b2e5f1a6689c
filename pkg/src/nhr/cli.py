"""Command line entry point: ingest, pretrain, fuse, baseline, evaluate (and synth for demos).

Output layout under ``--out``::

    data/         split files, remap tables, feature tables, candidate sets, manifest.json
    checkpoints/  one .nhr file per model plus index.json
    reports/      training JSON-lines, fusion-weight searches, evaluation.json / .txt
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .artifacts import MANIFEST, ingest, load_artifacts, sha256_file
from .baselines import bpr_fit, poprank_fit
from .config import ExperimentConfig, load_config, validate_paths
from .errors import ConfigError, NHRError, StaleArtifactError
from .evaluation import SummaryRow, evaluate, format_table
from .models import build_model, load_checkpoint, save_checkpoint
from .synthetic import planted_clusters, write_planted
from .tensor import derive_seed, make_rng
from .training import build_fused, search_fusion_weights, train

log = logging.getLogger("nhr")

INDEX = "index.json"
BASELINE_NAMES = {"poprank": "PopRank", "bpr": "BPR"}


class Workspace:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.out
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"

    def prepare(self):
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(parents=True, exist_ok=True)

    def data_hash(self) -> str:
        path = self.data / MANIFEST
        if not path.is_file():
            raise StaleArtifactError(f"no ingest manifest at {path}; run `nhr ingest` first")
        return sha256_file(path)

    def read_index(self) -> dict:
        path = self.checkpoints / INDEX
        if not path.is_file():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def record(self, name: str, role: str, model):
        path = self.checkpoints / f"{name}.nhr"
        save_checkpoint(model, path)
        index = self.read_index()
        index[name] = {"kind": model.kind, "role": role, "sha256": sha256_file(path),
                       "data_manifest": self.data_hash()}
        (self.checkpoints / INDEX).write_text(json.dumps(index, sort_keys=True, indent=1) + "\n",
                                              encoding="utf-8")

    def load(self, name: str, expected_kind: str | None = None):
        entry = self.read_index().get(name)
        if entry is None:
            raise ConfigError(f"no checkpoint named {name!r}; run the command that produces it first")
        path = self.checkpoints / f"{name}.nhr"
        if entry["data_manifest"] != self.data_hash():
            raise StaleArtifactError(f"checkpoint {name!r} was trained on different ingest artifacts")
        if not path.is_file() or sha256_file(path) != entry["sha256"]:
            raise StaleArtifactError(f"checkpoint {path} is missing or changed")
        return load_checkpoint(path, expected_kind)


def _emit(fmt: str, payload: dict, table: str | None = None):
    if fmt == "table" and table is not None:
        sys.stdout.write(table)
    else:
        sys.stdout.write(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def cmd_ingest(cfg: ExperimentConfig, args) -> int:
    validate_paths(cfg)
    ws = Workspace(cfg)
    manifest = ingest(cfg, ws.data)
    summary = {k: v for k, v in manifest.items() if k != "files"}
    lines = [f"{k:<18} {v}" for k, v in sorted(summary.items())]
    _emit(args.format, summary, "\n".join(lines) + "\n")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    art = load_artifacts(ws.data)
    ws.prepare()
    names = args.models.split(",") if args.models else [m.name for m in cfg.models]
    summary = {}
    for name in names:
        decl = cfg.model(name)
        specs = [art.features[f].spec for f in decl.features]
        model = build_model(decl.kind, art.split.num_users, art.split.num_items, cfg.train.pf, specs,
                            derive_seed(cfg.seed, "init", name))
        report = train(model, art.split, art.features, cfg.train, art.val_candidates, tag=name,
                       seed=derive_seed(cfg.seed, "sample", name))
        ws.record(name, "component", model)
        (ws.reports / f"{name}.train.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        (ws.reports / f"{name}.timing.jsonl").write_text(report.timing_jsonl(), encoding="utf-8")
        best = report.best
        summary[name] = {"best_epoch": report.best_epoch, "val_hr": best.val_hr if best else None,
                         "val_ndcg": best.val_ndcg if best else None, "stop_reason": report.stop_reason}
    table = "".join(f"{n:<12} best epoch {s['best_epoch']:>3}  val HR {s['val_hr']}  NDCG {s['val_ndcg']}\n"
                    for n, s in summary.items())
    _emit(args.format, summary, table)
    return 0


def _parse_weights(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--weights must be a comma-separated list of numbers, got {text!r}") from None


def cmd_fuse(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    art = load_artifacts(ws.data)
    ws.prepare()
    fusions = cfg.fusions
    if args.fusion:
        fusions = [f for f in fusions if f.name == args.fusion]
        if not fusions:
            raise ConfigError(f"no fusion named {args.fusion!r} in the config")
    if not fusions:
        raise ConfigError("the config declares no fusions")
    summary = {}
    for decl in fusions:
        comps = [ws.load(c) for c in decl.components]
        weights = _parse_weights(args.weights) if args.weights else decl.weights
        search = None
        if weights is None:
            weights, grid = search_fusion_weights(comps, art.val_candidates, art.features,
                                                  cfg.weight_step, cfg.train.k)
            search = [{"weights": list(w), "val_hr": round(hr, 10)} for w, hr in grid]
        fused, weights, report = build_fused(comps, art.split, art.features, cfg.train, art.val_candidates,
                                             weights=weights, freeze_bodies=cfg.freeze_bodies, tag=decl.name)
        weights = [float(w) for w in weights]
        ws.record(decl.name, "fusion", fused)
        (ws.reports / f"{decl.name}.train.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        (ws.reports / f"{decl.name}.timing.jsonl").write_text(report.timing_jsonl(), encoding="utf-8")
        (ws.reports / f"{decl.name}.fusion.json").write_text(
            json.dumps({"components": list(decl.components), "weights": weights, "grid": search},
                       sort_keys=True, indent=1) + "\n", encoding="utf-8")
        best = report.best
        summary[decl.name] = {"weights": weights, "best_epoch": report.best_epoch,
                              "val_hr": best.val_hr if best else None}
    table = "".join(f"{n:<12} weights {s['weights']}  best epoch {s['best_epoch']}  val HR {s['val_hr']}\n"
                    for n, s in summary.items())
    _emit(args.format, summary, table)
    return 0


def cmd_baseline(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    art = load_artifacts(ws.data)
    ws.prepare()
    pop = poprank_fit(art.split.train)
    ws.record("poprank", "baseline", pop)
    b = cfg.bpr
    bpr = bpr_fit(art.split.train, cfg.train.pf, b.lr, b.reg, b.epochs, make_rng(derive_seed(cfg.seed, "bpr")),
                  positives=art.split.positives_by_user, batch_size=b.batch_size)
    ws.record("bpr", "baseline", bpr)
    (ws.reports / "bpr.train.jsonl").write_text(
        "".join(json.dumps({"epoch": e + 1, "mean_triple_loss": round(v, 10)}) + "\n"
                for e, v in enumerate(bpr.history)), encoding="utf-8")
    summary = {"poprank": "fitted", "bpr": {"epochs": b.epochs, "final_loss": round(bpr.history[-1], 6)
                                            if bpr.history else None}}
    _emit(args.format, summary, f"PopRank fitted\nBPR fitted, final mean triple loss {summary['bpr']['final_loss']}\n")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    art = load_artifacts(ws.data)
    ws.prepare()
    index = ws.read_index()
    if not index:
        raise ConfigError("no checkpoints to evaluate; run pretrain/fuse/baseline first")
    order = [n for n in ("poprank", "bpr") if n in index]
    order += [m.name for m in cfg.models if m.name in index]
    order += [f.name for f in cfg.fusions if f.name in index]
    order += sorted(n for n in index if n not in order)
    k = args.k if args.k is not None else cfg.train.k
    reports = []
    for name in order:
        model = ws.load(name)
        tag = BASELINE_NAMES.get(name, name)
        reports.append(evaluate(model, art.split, art.test_candidates, art.features, k=k,
                                strict=args.strict_hr, tag=tag))
    payload = {"k": k, "reports": [r.to_dict(per_user=args.per_user) for r in reports]}
    shown = list(reports)
    if args.compare:
        other = json.loads(Path(args.compare).read_text(encoding="utf-8"))
        for d in other["reports"]:
            shown.append(SummaryRow(f"{d['model']} ({Path(args.compare).name})", d["k"], d["hr"], d["ndcg"],
                                    d["candidates_fingerprint"]))
    table = format_table(shown)
    (ws.reports / "evaluation.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                                                encoding="utf-8")
    (ws.reports / "evaluation.txt").write_text(table, encoding="utf-8")
    _emit(args.format, payload, table)
    return 0


def cmd_synth(args) -> int:
    """Write a planted-cluster demo dataset and a matching config."""
    out = Path(args.dir)
    ds = planted_clusters(args.users, args.items, args.clusters, args.per_user, seed=args.seed if args.seed else 0,
                          in_cluster=0.85, feature_noise=0.1, text_coverage=0.7)
    write_planted(ds, out)
    config = {
        "seed": 0,
        "out": "run",
        "data": {"interactions": "interactions.tsv", "format": "tsv", "eval_negatives": 100},
        "features": [
            {"name": "segment", "entity": "user", "kind": "categorical", "path": "user_features.tsv",
             "embedding_dim": 8},
            {"name": "genre", "entity": "item", "kind": "categorical", "path": "item_features.tsv",
             "embedding_dim": 8},
            {"name": "text", "entity": "item", "kind": "text", "path": "item_text", "embedding_dim": 16},
        ],
        "models": [
            {"name": "GMF", "kind": "gmf"},
            {"name": "MLP", "kind": "mlp"},
            {"name": "NHR-aux", "kind": "aux", "features": ["segment", "genre", "text"]},
        ],
        "fusions": [
            {"name": "NCF", "components": ["GMF", "MLP"]},
            {"name": "NHR-combined", "components": ["GMF", "MLP", "NHR-aux"]},
        ],
        "train": {"pf": 8, "max_epochs": 10, "patience": 3},
        "baselines": {"bpr": {"epochs": 10}},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    sys.stdout.write(f"wrote planted dataset and {out / 'config.yaml'}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the config seed (u64)")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--k", type=int, help="ranking cutoff (default 10)")
    common.add_argument("--format", choices=("json", "table"), default="table")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nhr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse, split, encode features, draw candidates")
    pt = sub.add_parser("pretrain", parents=[common], help="train every declared component")
    pt.add_argument("--models", help="comma-separated subset of model names")
    fu = sub.add_parser("fuse", parents=[common], help="weight search, fusion and fine-tuning")
    fu.add_argument("--weights", help="explicit comma-separated fusion weights; skips the grid search")
    fu.add_argument("--fusion", help="only run the named fusion")
    sub.add_parser("baseline", parents=[common], help="fit PopRank and BPR")
    ev = sub.add_parser("evaluate", parents=[common], help="HR@k / NDCG@k for every checkpoint")
    ev.add_argument("--per-user", action="store_true", help="include per-user records in JSON output")
    ev.add_argument("--strict-hr", action="store_true", help="score a hit as 1/k instead of 1")
    ev.add_argument("--compare", help="evaluation.json from another run to add to the table")
    sy = sub.add_parser("synth", help="write a planted-cluster demo dataset and config")
    sy.add_argument("dir")
    sy.add_argument("--users", type=int, default=500)
    sy.add_argument("--items", type=int, default=500)
    sy.add_argument("--clusters", type=int, default=10)
    sy.add_argument("--per-user", type=int, default=8)
    sy.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "fuse": cmd_fuse,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg.seed = args.seed
            cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.k is not None:
            if args.k < 1:
                raise ConfigError("--k must be >= 1")
            cfg.train = dataclasses.replace(cfg.train, k=args.k)
        return COMMANDS[args.command](cfg, args)
    except NHRError as exc:
        sys.stderr.write(f"nhr {args.command}: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"nhr {args.command}: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
