"""End-to-end tests of the ``nhr`` command line on a small planted dataset."""

import json
import shutil

import pytest
import yaml

from nhr import cli
from nhr.errors import ProtocolError

PIPELINE = ("ingest", "pretrain", "fuse", "baseline", "evaluate")


def make_dataset(root, seed=3):
    """A 60-user planted dataset with a config trimmed to two epochs per model."""
    assert cli.main(["synth", str(root), "--users", "60", "--items", "200", "--clusters", "4",
                     "--per-user", "6", "--seed", str(seed)]) == 0
    path = root / "config.yaml"
    cfg = yaml.safe_load(path.read_text())
    cfg["train"]["max_epochs"] = 2
    cfg["baselines"]["bpr"]["epochs"] = 2
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


def run(config, *args, out=None):
    argv = [args[0], "--config", str(config), *args[1:]]
    if out is not None:
        argv += ["--out", str(out)]
    return cli.main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = make_dataset(root / "dataset")
    out = root / "run"
    for verb in PIPELINE:
        assert run(config, verb, out=out) == 0, verb
    return config, out


def _copy(workspace, tmp_path):
    config, out = workspace
    shutil.copytree(out, tmp_path / "run")
    return config, tmp_path / "run"


def _manifest(out):
    return json.loads((out / "data" / "manifest.json").read_text())


class TestIngest:
    def test_rerun_gives_identical_manifest(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        before = (out / "data" / "manifest.json").read_bytes()
        assert run(config, "ingest", out=out) == 0
        assert (out / "data" / "manifest.json").read_bytes() == before

    def test_json_summary(self, workspace, tmp_path, capsys):
        config, _ = workspace
        assert run(config, "ingest", "--format", "json", out=tmp_path / "o") == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["num_users"] == 60 and summary["eval_negatives"] == 100
        assert "files" not in summary

    def test_missing_text_dir_is_config_error(self, tmp_path, capsys):
        config = make_dataset(tmp_path / "d")
        shutil.rmtree(tmp_path / "d" / "item_text")
        assert run(config, "ingest", out=tmp_path / "o") == 2
        assert "text directory" in capsys.readouterr().err
        assert not (tmp_path / "o" / "data" / "manifest.json").exists()

    def test_seed_changes_candidates(self, workspace, tmp_path):
        config, out = workspace
        assert run(config, "ingest", "--seed", "7", out=tmp_path / "o") == 0
        other = _manifest(tmp_path / "o")
        assert other["seed"] == 7
        assert other["test_fingerprint"] != _manifest(out)["test_fingerprint"]

    def test_too_many_negatives_is_data_error(self, tmp_path, capsys):
        assert cli.main(["synth", str(tmp_path / "d"), "--users", "20", "--items", "60", "--clusters", "2",
                         "--per-user", "5"]) == 0
        assert run(tmp_path / "d" / "config.yaml", "ingest", out=tmp_path / "o") == 3
        assert "distinct negatives" in capsys.readouterr().err


class TestTrainingVerbs:
    def test_workspace_layout(self, workspace):
        _, out = workspace
        index = json.loads((out / "checkpoints" / "index.json").read_text())
        assert set(index) == {"GMF", "MLP", "NHR-aux", "NCF", "NHR-combined", "poprank", "bpr"}
        assert index["NCF"]["role"] == "fusion" and index["GMF"]["role"] == "component"
        for name in ("GMF", "MLP", "NHR-aux", "NCF", "NHR-combined"):
            assert (out / "reports" / f"{name}.train.jsonl").is_file()
            assert (out / "reports" / f"{name}.timing.jsonl").is_file()

    def test_weight_search_recorded(self, workspace):
        _, out = workspace
        record = json.loads((out / "reports" / "NCF.fusion.json").read_text())
        assert record["components"] == ["GMF", "MLP"]
        assert len(record["grid"]) == 11
        best = max(g["val_hr"] for g in record["grid"])
        assert {"weights": record["weights"], "val_hr": best} in record["grid"]

    def test_explicit_weights_skip_search(self, workspace, tmp_path, capsys):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "fuse", "--fusion", "NCF", "--weights", "0.5,0.5", "--format", "json", out=out) == 0
        assert json.loads(capsys.readouterr().out)["NCF"]["weights"] == [0.5, 0.5]
        record = json.loads((out / "reports" / "NCF.fusion.json").read_text())
        assert record["grid"] is None and record["weights"] == [0.5, 0.5]

    @pytest.mark.parametrize("weights", ["0.7,0.7", "abc", "1.0"])
    def test_bad_weights_are_config_errors(self, workspace, tmp_path, weights):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "fuse", "--fusion", "NCF", "--weights", weights, out=out) == 2

    def test_unknown_fusion(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "fuse", "--fusion", "nope", out=out) == 2

    def test_pretrain_before_ingest(self, workspace, tmp_path, capsys):
        config, _ = workspace
        assert run(config, "pretrain", out=tmp_path / "empty") == 3
        assert "nhr ingest" in capsys.readouterr().err

    def test_unknown_model_subset(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "pretrain", "--models", "GMF,Nope", out=out) == 2


class TestEvaluate:
    def test_table_has_row_per_model(self, workspace, tmp_path, capsys):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "evaluate", out=out) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["model", "HR@10", "NDCG@10"]
        names = [line.split()[0] for line in lines[2:]]
        for model in ("PopRank", "BPR", "GMF", "MLP", "NHR-aux", "NCF", "NHR-combined"):
            assert names.count(model) == 1
        assert any(line.startswith("Im.%") for line in lines)
        assert lines[-1] == f"candidates: {_manifest(out)['test_fingerprint']}"
        assert "WARNING" not in "\n".join(lines)

    def test_json_reports_share_candidates(self, workspace, tmp_path, capsys):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "evaluate", "--format", "json", "--k", "5", "--per-user", out=out) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["k"] == 5
        fp = _manifest(out)["test_fingerprint"]
        for report in payload["reports"]:
            assert report["candidates_fingerprint"] == fp
            assert report["users"] == 60 and len(report["per_user"]) == 60
            assert 0 <= report["ndcg"] <= report["hr"] <= 1

    def test_strict_hr_scales_hits(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "evaluate", out=out) == 0
        plain = json.loads((out / "reports" / "evaluation.json").read_text())
        assert run(config, "evaluate", "--strict-hr", out=out) == 0
        strict = json.loads((out / "reports" / "evaluation.json").read_text())
        for a, b in zip(plain["reports"], strict["reports"]):
            assert b["hr"] == pytest.approx(a["hr"] / 10)
            assert b["ndcg"] == a["ndcg"]

    def test_compare_with_other_seed_warns(self, workspace, tmp_path, capsys):
        config, out = workspace
        other = tmp_path / "o"
        for verb in ("ingest", "baseline"):
            assert run(config, verb, "--seed", "11", out=other) == 0
        capsys.readouterr()
        assert run(config, "evaluate", "--seed", "11", "--compare", str(out / "reports" / "evaluation.json"),
                   out=other) == 0
        text = capsys.readouterr().out
        assert "evaluation.json)" in text
        assert "WARNING" in text

    def test_reingest_makes_checkpoints_stale(self, workspace, tmp_path, capsys):
        config, out = _copy(workspace, tmp_path)
        assert run(config, "ingest", "--seed", "9", out=out) == 0
        capsys.readouterr()
        assert run(config, "evaluate", out=out) == 3
        assert "different ingest artifacts" in capsys.readouterr().err

    def test_edited_checkpoint_is_stale(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        path = out / "checkpoints" / "GMF.nhr"
        path.write_bytes(path.read_bytes()[:-1] + b"\x01")
        assert run(config, "evaluate", out=out) == 3

    def test_edited_data_is_stale(self, workspace, tmp_path):
        config, out = _copy(workspace, tmp_path)
        with open(out / "data" / "test_candidates.tsv", "a") as fh:
            fh.write("\n")
        assert run(config, "evaluate", out=out) == 3

    def test_nothing_to_evaluate(self, workspace, tmp_path):
        config, _ = workspace
        assert run(config, "ingest", out=tmp_path / "o") == 0
        assert run(config, "evaluate", out=tmp_path / "o") == 2


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert cli.main(["ingest", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_invalid_yaml(self, tmp_path):
        (tmp_path / "c.yaml").write_text("data: [unclosed\n")
        assert cli.main(["ingest", "--config", str(tmp_path / "c.yaml")]) == 2

    def test_unknown_key(self, workspace, tmp_path):
        config, _ = workspace
        cfg = yaml.safe_load(config.read_text())
        cfg["surprise"] = 1
        path = config.parent / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert cli.main(["ingest", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    @pytest.mark.parametrize("flag", [["--seed", "-1"], ["--k", "0"]])
    def test_bad_global_flags(self, workspace, tmp_path, flag):
        config, _ = workspace
        assert run(config, "ingest", *flag, out=tmp_path / "o") == 2

    def test_protocol_error_maps_to_4(self, workspace, monkeypatch, capsys):
        def broken(cfg, args):
            raise ProtocolError("test item absent from candidates")

        monkeypatch.setitem(cli.COMMANDS, "evaluate", broken)
        config, out = workspace
        assert run(config, "evaluate", out=out) == 4
        assert "nhr evaluate: test item absent" in capsys.readouterr().err

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["ingest"])
        assert exc.value.code == 2


class TestDeterminism:
    def test_repeated_pipeline_is_byte_identical(self, workspace, tmp_path):
        config, out = workspace
        again = tmp_path / "again"
        for verb in PIPELINE:
            assert run(config, verb, out=again) == 0
        for sub in ("data", "checkpoints", "reports"):
            files = sorted(p.relative_to(out) for p in (out / sub).rglob("*")
                           if p.is_file() and not p.name.endswith(".timing.jsonl"))
            assert files
            for rel in files:
                assert (again / rel).read_bytes() == (out / rel).read_bytes(), rel
