"""Acceptance suite: the eight end-to-end properties the package must satisfy.

Each test carries an ``acceptance(number, title)`` marker; the terminal
summary prints one ``[PASS]`` / ``[FAIL]`` line per criterion (see conftest).
Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import json
import math

import numpy as np
import pytest
import yaml
from scipy import stats

from nhr import cli
from nhr.data import leave_one_out_split
from nhr.errors import ConfigError
from nhr.evaluation import evaluate, hr_at_k, ndcg_at_k, rank_candidates
from nhr.models import build_model, fuse
from nhr.sampling import EvalCandidates, PositiveIndex, draw_negatives, sample_epoch, sample_eval_candidates
from nhr.synthetic import planted_clusters, planted_feature_tables
from nhr.tensor import Adam, bce_loss, make_rng, sigmoid
from nhr.training import TrainConfig, build_fused, pretrain_all, train_epoch
from oracles import (
    analytic_grads,
    batch_loss,
    brute_force_metrics,
    gradcheck_problem,
    max_relative_error,
    numeric_grads,
    relu_margins,
)


class _Table:
    kind = "table"

    def __init__(self, scores):
        self.scores = scores

    def score(self, users, items, features=None):
        return self.scores[np.asarray(users), np.asarray(items)]


# --------------------------------------------------------------------------
# 1. analytic gradients vs central differences
# --------------------------------------------------------------------------


@pytest.mark.acceptance(1, "gradient oracle (GMF, MLP, Aux, Fused; h=1e-3, float64, rel err < 1e-4)")
@pytest.mark.parametrize("kind", ["gmf", "mlp", "aux", "fused"])
def test_gradient_oracle(kind, specs, tables):
    model, users, items, labels = gradcheck_problem(kind, specs, tables, pf=8, num_users=10, num_items=10)
    assert model.pf == (24 if kind == "fused" else 8)
    # central differences are only meaningful away from ReLU kinks
    assert relu_margins(model, users, items, tables).min() > 10 * 1e-3
    analytic = analytic_grads(model, users, items, labels, tables)
    numeric = numeric_grads(model, lambda: batch_loss(model, users, items, labels, tables), h=1e-3)
    assert set(analytic) == set(numeric) == {n for n, _ in model.named_parameters()}
    err = max_relative_error(analytic, numeric)
    print(f"{kind}: max relative error {err:.2e}")
    assert err < 1e-4


# --------------------------------------------------------------------------
# 2. a small model can memorise a small dataset
# --------------------------------------------------------------------------


@pytest.mark.acceptance(2, "toy overfit (50x20 planted, GMF pf=8: BCE < 0.05 within 500 epochs, train HR@10 = 1)")
def test_toy_overfit():
    ds = planted_clusters(50, 20, 4, 5, seed=1)
    split = leave_one_out_split(ds.log)
    model = build_model("gmf", 50, 20, 8, seed=3)
    cfg = TrainConfig(pf=8)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    index = PositiveIndex(split.positives_by_user, split.num_items)
    rng = make_rng(5)

    # train BCE over every (user, item) cell of the training matrix: train
    # positives labelled 1, never-interacted items labelled 0; held-out
    # validation/test items are neither
    train_pos = np.zeros((50, 20), dtype=bool)
    train_pos[split.train.users, split.train.items] = True
    any_pos = np.zeros((50, 20), dtype=bool)
    for u, items in enumerate(split.positives_by_user):
        any_pos[u, list(items)] = True
    cells = train_pos | ~any_pos
    U, I = np.nonzero(cells)

    bce = math.inf
    for epoch in range(1, 501):
        plan = sample_epoch(split.train, index, cfg.negative_ratio, rng, cfg.batch_size)
        train_epoch(model, opt, plan, None, epoch)
        p = sigmoid(model.logits(U, I).astype(np.float64))
        bce = float(bce_loss(p, train_pos[U, I]).mean())
        if bce < 0.05:
            break
    print(f"train BCE {bce:.4f} after {epoch} epochs")
    assert bce < 0.05

    # every training positive ranked against all of its user's non-positive items
    hits = []
    for u, i in zip(split.train.users.tolist(), split.train.items.tolist()):
        negatives = np.flatnonzero(~any_pos[u])
        ranked = rank_candidates(model, u, np.append(negatives, i))
        hits.append(hr_at_k(ranked, i, 10))
    print(f"train-candidate HR@10 {np.mean(hits):.4f} over {len(hits)} positives")
    assert np.mean(hits) == 1.0


# --------------------------------------------------------------------------
# 3. a random scorer lands on the analytic expectation
# --------------------------------------------------------------------------


@pytest.mark.acceptance(3, "random-scorer calibration (101 candidates, HR@10 = 0.099 +/- 0.02)")
def test_random_scorer_calibration():
    num_users, num_items = 3000, 1000
    rng = make_rng(17)
    items = np.stack([rng.choice(num_items, size=101, replace=False) for _ in range(num_users)])
    cands = EvalCandidates(np.arange(num_users), items)
    scorer = _Table(rng.random((num_users, num_items)))
    report = evaluate(scorer, None, cands, k=10)
    expected_hr = 10 / 101
    expected_ndcg = sum(1 / math.log2(p + 1) for p in range(1, 11)) / 101
    print(f"HR@10 {report.hr:.4f} (expected {expected_hr:.4f}), NDCG@10 {report.ndcg:.4f} "
          f"(expected {expected_ndcg:.4f})")
    assert len(report.users) == num_users >= 2000
    assert abs(report.hr - expected_hr) <= 0.02
    assert abs(report.ndcg - expected_ndcg) <= 0.02


# --------------------------------------------------------------------------
# 4. metrics agree with a brute-force recomputation
# --------------------------------------------------------------------------


@pytest.mark.acceptance(4, "metric oracles (10^4 score vectors to 1e-9; NDCG at position 3 = 0.5)")
def test_metric_oracles():
    rng = make_rng(23)
    n_vectors, num_items = 10_000, 400
    sizes = rng.integers(2, 120, n_vectors)
    ks = rng.integers(1, 21, n_vectors)
    coarse = rng.random(n_vectors) < 0.3  # rounded scores produce ties
    worst = 0.0
    for v in range(n_vectors):
        items = rng.choice(num_items, size=sizes[v], replace=False)
        scores = rng.normal(size=sizes[v])
        if coarse[v]:
            scores = np.round(scores)
        target = items[rng.integers(sizes[v])]
        row = np.zeros((1, num_items))
        row[0, items] = scores
        ranked = rank_candidates(_Table(row), 0, items)
        hr, ndcg = hr_at_k(ranked, target, ks[v]), ndcg_at_k(ranked, target, ks[v])
        bf_hr, bf_ndcg = brute_force_metrics(scores, items, target, ks[v])
        worst = max(worst, abs(hr - bf_hr), abs(ndcg - bf_ndcg))
    print(f"max |package - brute force| = {worst:.1e}")
    assert worst <= 1e-9

    # the vectorised evaluation path on the same kind of data
    items = np.stack([rng.choice(num_items, size=101, replace=False) for _ in range(2000)])
    scores = np.round(rng.normal(size=(2000, num_items)), 1)
    report = evaluate(_Table(scores), None, EvalCandidates(np.arange(2000), items), k=10)
    oracle = np.array([brute_force_metrics(scores[u, items[u]], items[u], items[u, -1], 10) for u in range(2000)])
    assert np.max(np.abs(report.hits - oracle[:, 0])) <= 1e-9
    assert np.max(np.abs(report.ndcgs - oracle[:, 1])) <= 1e-9

    ranked = [7, 3, 9, 1, 4]
    assert ndcg_at_k(ranked, 9, 10) == 0.5


# --------------------------------------------------------------------------
# 5. fusion at initialisation is the weighted sum of component logits
# --------------------------------------------------------------------------


@pytest.mark.acceptance(5, "fusion identity (10^3 inputs to 1e-6; weights off the simplex rejected)")
def test_fusion_identity(specs, tables):
    rng = make_rng(31)
    gmf = build_model("gmf", 10, 10, 8, seed=1)
    mlp = build_model("mlp", 10, 10, 8, seed=2)
    aux = build_model("aux", 10, 10, 8, specs, seed=3)
    for m in (gmf, mlp, aux):  # non-zero biases so the bias rule is exercised
        m.head.b.value[...] = rng.normal()
    users, items = rng.integers(0, 10, 1000), rng.integers(0, 10, 1000)
    worst = 0.0
    for comps in ([gmf, mlp], [gmf, mlp, aux], [mlp, aux]):
        weights = rng.dirichlet(np.ones(len(comps)))
        weights[-1] = 1.0 - weights[:-1].sum()
        fused = fuse(comps, weights)
        expected = sum(w * m.logits(users, items, tables).astype(np.float64) for w, m in zip(weights, comps))
        got = fused.logits(users, items, tables).astype(np.float64)
        worst = max(worst, float(np.max(np.abs(got - expected))))
    print(f"max |fused - weighted sum| = {worst:.1e}")
    assert worst <= 1e-6

    for bad in ([0.6, 0.6], [0.5, 0.49], [1.5, -0.5], [0.5, 0.5 + 1e-6], [math.nan, 1.0]):
        with pytest.raises(ConfigError):
            fuse([gmf, mlp], bad)
    fuse([gmf, mlp], [0.3, 0.7 + 5e-10])  # within the 1e-9 tolerance


# --------------------------------------------------------------------------
# 6. negative sampling is sound
# --------------------------------------------------------------------------


@pytest.mark.acceptance(6, "sampler soundness (0 collisions in 10^5 draws; chi-square p > 0.01; epochs differ)")
def test_sampler_soundness():
    split = leave_one_out_split(planted_clusters(300, 400, 6, 6, seed=2).log)
    index = PositiveIndex(split.positives_by_user, split.num_items)
    rng = make_rng(41)

    collisions = draws = 0
    plans = []
    while draws < 100_000:
        plan = sample_epoch(split.train, index, 4, rng)
        neg = plan.labels == 0
        collisions += sum(i in split.positives_by_user[u]
                          for u, i in zip(plan.users[neg].tolist(), plan.items[neg].tolist()))
        draws += int(neg.sum())
        plans.append(plan)
    print(f"{collisions} collisions in {draws} negative draws")
    assert draws >= 100_000 and collisions == 0

    first, second = plans[0], plans[1]
    assert not np.array_equal(first.items[first.labels == 0], second.items[second.labels == 0])

    positives = [frozenset(range(0, 60, 4))]
    one_user = PositiveIndex(positives, 60)
    sample = draw_negatives(np.zeros(1_000_000, dtype=np.int64), one_user, make_rng(43))
    eligible = np.array(sorted(set(range(60)) - positives[0]))
    counts = np.bincount(sample, minlength=60)
    _, p = stats.chisquare(counts[eligible])
    print(f"chi-square p = {p:.3f} over {len(eligible)} eligible items")
    assert counts[list(positives[0])].sum() == 0
    assert p > 0.01


# --------------------------------------------------------------------------
# 7. features that carry the planted signal make the fused model better
# --------------------------------------------------------------------------


@pytest.mark.acceptance(7, "planted-signal hybrid gain (fused val HR@10 >= GMF + 0.03)")
def test_hybrid_gain():
    ds = planted_clusters(500, 500, 10, 8, seed=11, in_cluster=0.85, feature_noise=0.1)
    split = leave_one_out_split(ds.log)
    features = planted_feature_tables(ds, embedding_dim=8)
    val = sample_eval_candidates(split, 100, make_rng(1), target="val")
    cfg = TrainConfig(pf=8, max_epochs=20, patience=5, seed=0)
    trained = pretrain_all(split, features, cfg, val_candidates=val)
    comps = [trained[name][0] for name in ("gmf", "mlp", "aux")]
    fused, weights, report = build_fused(comps, split, features, cfg, val, tag="nhr")
    gmf_hr = evaluate(trained["gmf"][0], None, val, features).hr
    nhr_hr = evaluate(fused, None, val, features).hr
    print(f"GMF val HR@10 {gmf_hr:.4f}, fused (weights {weights}) {nhr_hr:.4f}, gain {nhr_hr - gmf_hr:+.4f}")
    assert nhr_hr == pytest.approx(report.best.val_hr, abs=1e-9)
    assert nhr_hr - gmf_hr >= 0.03


# --------------------------------------------------------------------------
# 8. every command is reproducible byte for byte
# --------------------------------------------------------------------------


def _report_files(out):
    """Everything a run writes except wall-clock timings."""
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and not p.name.endswith(".timing.jsonl")}


@pytest.mark.acceptance(8, "determinism (repeated commands give byte-identical reports)")
def test_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["synth", str(data), "--users", "60", "--items", "200", "--clusters", "4",
                     "--per-user", "6", "--seed", "5"]) == 0
    cfg = yaml.safe_load((data / "config.yaml").read_text())
    cfg["train"]["max_epochs"] = 3
    cfg["baselines"]["bpr"]["epochs"] = 3
    (data / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))

    runs, stdout = [], []
    for name in ("a", "b"):
        out = tmp_path / name
        capsys.readouterr()
        for verb in ("ingest", "pretrain", "fuse", "baseline", "evaluate"):
            assert cli.main([verb, "--config", str(data / "config.yaml"), "--seed", "123",
                             "--out", str(out), "--format", "json"]) == 0, verb
        stdout.append(capsys.readouterr().out)
        runs.append(_report_files(out))

    a, b = runs
    assert set(a) == set(b)
    assert {"reports/evaluation.json", "reports/NHR-combined.train.jsonl", "data/manifest.json",
            "checkpoints/index.json"} <= set(a)
    differing = [name for name in a if a[name] != b[name]]
    print(f"{len(a)} files compared, {len(differing)} differ")
    assert not differing
    assert stdout[0] == stdout[1]
    assert len(json.loads((tmp_path / "a" / "reports" / "evaluation.json").read_text())["reports"]) == 7

    # re-running a single verb in place rewrites the same bytes
    before = _report_files(tmp_path / "a")
    assert cli.main(["evaluate", "--config", str(data / "config.yaml"), "--seed", "123",
                     "--out", str(tmp_path / "a")]) == 0
    assert _report_files(tmp_path / "a") == before
