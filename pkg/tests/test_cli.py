import json

import numpy as np
import pytest

from speechcare import cli
from speechcare.data import read_manifest
from speechcare.metrics import PredictionSet, wer

FAST = {"synth": {"n_records": 40}, "train": {"epochs": 2}, "data": {"validation_fraction": 0.25}}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = write_config(root / "cfg.json", FAST)
    assert cli.main(["synth", "--config", cfg, "--seed", "7", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    runs = tmp_path_factory.mktemp("runs")
    manifest = str(corpus / "data" / "manifest.jsonl")
    assert cli.main(["train", "--config", str(corpus / "cfg.json"), "--seed", "7",
                     "--manifest", manifest, "--out", str(runs)]) == 0
    (run_dir,) = list(runs.iterdir())
    (runs / "train_predictions.jsonl").write_bytes((run_dir / "predictions.jsonl").read_bytes())
    assert cli.main(["evaluate", "--run", str(run_dir), "--manifest", manifest, "--binary"]) == 0
    return run_dir


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_verb_is_usage_error(self):
        assert cli.main(["fly"]) == cli.EXIT_USAGE

    def test_missing_required_flag_is_usage_error(self):
        assert cli.main(["wer", "--ref", "x"]) == cli.EXIT_USAGE

    def test_negative_seed_is_usage_error(self):
        assert cli.main(["--seed", "-3", "synth"]) == cli.EXIT_USAGE

    def test_missing_file_is_data_error(self, tmp_path):
        assert cli.main(["wer", "--ref", str(tmp_path / "nope"), "--hyp", str(tmp_path / "nope")]) == cli.EXIT_DATA

    def test_malformed_manifest_is_data_error(self, tmp_path):
        bad = tmp_path / "m.jsonl"
        bad.write_text("{not json\n")
        assert cli.main(["train", "--manifest", str(bad), "--out", str(tmp_path)]) == cli.EXIT_DATA

    @pytest.mark.parametrize("cfg,field", [
        ({"train": {"lr_text": -1}}, "train.lr_text"),
        ({"train": {"epochz": 3}}, "epochz"),
        ({"model": {"fusion": "magic"}}, "model.fusion"),
        ({"model": {"heads": 3}}, "model.heads"),
        ({"data": {"split": "random"}}, "data.split"),
        ({"extras": {}}, "extras"),
    ])
    def test_bad_config_names_field(self, corpus, tmp_path, capsys, cfg, field):
        path = write_config(tmp_path / "bad.json", cfg)
        code = cli.main(["train", "--config", path, "--manifest", str(corpus / "data" / "manifest.jsonl"),
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA
        assert field in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numeric_failure(self, corpus, tmp_path):
        cfg = {"train": {"epochs": 2, "lr_acoustic": 1e30, "lr_text": 1e30, "lr_other": 1e30}}
        path = write_config(tmp_path / "hot.json", cfg)
        code = cli.main(["train", "--config", path, "--manifest", str(corpus / "data" / "manifest.jsonl"),
                         "--out", str(tmp_path / "runs")])
        assert code == cli.EXIT_NUMERIC


class TestRunDirectory:
    def test_layout(self, trained):
        for name in ("config.json", "result.json", "checkpoint.bin", "predictions.jsonl", "report.json"):
            assert (trained / name).is_file()
        curves = {p.name for p in (trained / "curves").glob("*.csv")}
        assert {"roc_micro.csv", "pr_micro.csv", "information_gain.csv"} <= curves

    def test_result_records_epochs_and_metrics(self, trained):
        result = json.loads((trained / "result.json").read_text())
        assert len(result["train_loss"]) == 2
        assert {"auc_micro", "f1_micro", "log_loss"} <= set(result["metrics"])

    def test_report_confusion_matches_predictions(self, trained):
        report = json.loads((trained / "report.json").read_text())["metrics"]
        preds = PredictionSet.from_jsonl(trained / "predictions.jsonl")
        m = np.zeros((3, 3), int)
        np.add.at(m, (preds.labels, preds.predicted()), 1)
        assert report["confusion_matrix"] == m.tolist()
        assert report["records"] == 40

    def test_reloaded_checkpoint_reproduces_training_predictions(self, trained):
        at_train = (trained.parent / "train_predictions.jsonl").read_text().splitlines()
        by_uid = {row["uid"]: row for row in map(json.loads, (trained / "predictions.jsonl").read_text().splitlines())}
        assert 0 < len(at_train) < len(by_uid)
        for row in map(json.loads, at_train):
            other = by_uid[row["uid"]]
            # float32 sums differ in the last bits when records are batched with different neighbours
            np.testing.assert_allclose(other.pop("probs"), row.pop("probs"), atol=1e-6)
            assert other == row

    def test_binary_subreport_excludes_ad(self, trained):
        report = json.loads((trained / "report.json").read_text())
        preds = PredictionSet.from_jsonl(trained / "predictions.jsonl")
        assert report["binary_mci_vs_control"]["records"] == int((preds.labels != 2).sum())

    def test_fusion_trace_weights_sum_to_one(self, trained):
        rows = [json.loads(line) for line in (trained / "fusion_trace.jsonl").read_text().splitlines()]
        assert len(rows) == 40
        for row in rows:
            assert abs(sum(row["gate_weights"]) - 1) < 1e-5

    def test_run_ids_are_unique_per_invocation(self, corpus, tmp_path):
        manifest = str(corpus / "data" / "manifest.jsonl")
        cfg = write_config(tmp_path / "c.json", {"train": {"epochs": 1}, "model": {"modalities": ["demographic"],
                                                                                   "fusion": "single"}})
        for _ in range(2):
            assert cli.main(["train", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "r")]) == 0
        dirs = sorted(p.name for p in (tmp_path / "r").iterdir())
        assert len(dirs) == 2 and dirs[1] == dirs[0] + "-1"


class TestDeterminism:
    def test_train_and_evaluate_twice_give_identical_predictions(self, corpus, trained, tmp_path):
        manifest = str(corpus / "data" / "manifest.jsonl")
        assert cli.main(["train", "--config", str(corpus / "cfg.json"), "--seed", "7",
                         "--manifest", manifest, "--out", str(tmp_path)]) == 0
        (run_dir,) = list(tmp_path.iterdir())
        assert cli.main(["evaluate", "--run", str(run_dir), "--manifest", manifest]) == 0
        assert (run_dir / "predictions.jsonl").read_bytes() == (trained / "predictions.jsonl").read_bytes()
        assert (run_dir / "checkpoint.bin").read_bytes() == (trained / "checkpoint.bin").read_bytes()

    def test_global_flags_before_or_after_verb(self, tmp_path):
        assert cli.main(["--seed", "3", "synth", "--n-records", "4", "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["synth", "--seed", "3", "--n-records", "4", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()


class TestAblate:
    def test_duplicate_variants_tie(self, corpus, tmp_path):
        cfg = {"train": {"epochs": 1}, "seeds": 2,
               "variants": [{"name": "demo", "model": {"modalities": ["demographic"], "fusion": "single"}},
                            {"name": "demo", "model": {"modalities": ["demographic"], "fusion": "single"}}]}
        path = write_config(tmp_path / "ab.json", cfg)
        assert cli.main(["ablate", "--config", path, "--manifest", str(corpus / "data" / "manifest.jsonl"),
                         "--out", str(tmp_path)]) == 0
        table = json.loads((tmp_path / "ablation.json").read_text())
        rows = table["rows"]
        assert len(rows) == 2
        assert set(rows[0]) == {"variant", "auc_mean", "auc_std", "f1_mean", "f1_std", "p_vs_primary", "d_vs_primary"}
        assert rows[0]["auc_mean"] == rows[1]["auc_mean"]
        assert rows[1]["d_vs_primary"] == 0.0 and rows[1]["p_vs_primary"] is None

    def test_single_variant_rejected(self, corpus, tmp_path):
        path = write_config(tmp_path / "ab.json", {"variants": [{"name": "agf"}]})
        assert cli.main(["ablate", "--config", path, "--manifest", str(corpus / "data" / "manifest.jsonl"),
                         "--out", str(tmp_path)]) == cli.EXIT_DATA


class TestOtherVerbs:
    def test_impute_fills_education_and_keeps_paths_valid(self, corpus, tmp_path):
        src = corpus / "data" / "manifest.jsonl"
        assert any(r.education is None for r in read_manifest(src))
        assert cli.main(["impute", "--manifest", str(src), "--out", str(tmp_path / "imp")]) == 0
        filled = read_manifest(tmp_path / "imp" / "manifest.jsonl")
        assert all(r.education is not None for r in filled)
        assert cli.main(["preprocess", "--manifest", str(tmp_path / "imp" / "manifest.jsonl"),
                         "--out", str(tmp_path / "pre")]) == 0
        rows = (tmp_path / "pre" / "preprocess.jsonl").read_text().splitlines()
        assert len(rows) == 40 and json.loads(rows[0])["frames"] == 250

    def test_audit_before_after(self, trained, tmp_path):
        preds = str(trained / "predictions.jsonl")
        assert cli.main(["audit", "--predictions", preds, "--after", preds, "--attributes", "gender",
                         "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "fairness.json").read_text())
        assert report["before"] == report["after"]
        assert report["comparison"]["gender"]["2"]["eoo_gap_change"] == 0

    def test_wer_per_line_and_aggregate(self, tmp_path, capsys):
        refs, hyps = ["a b c d", "the cat sat"], ["a x c", "the cat sat on mat"]
        (tmp_path / "r.txt").write_text("\n".join(refs))
        (tmp_path / "h.txt").write_text("\n".join(hyps))
        assert cli.main(["wer", "--ref", str(tmp_path / "r.txt"), "--hyp", str(tmp_path / "h.txt"),
                         "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "wer.json").read_text())
        assert [p["wer"] for p in report["pairs"]] == [wer(r, h) for r, h in zip(refs, hyps)]
        assert report["aggregate_wer"] == 4 / 7

    def test_wer_line_count_mismatch(self, tmp_path):
        (tmp_path / "r.txt").write_text("a\nb\n")
        (tmp_path / "h.txt").write_text("a\n")
        assert cli.main(["wer", "--ref", str(tmp_path / "r.txt"), "--hyp", str(tmp_path / "h.txt")]) == cli.EXIT_DATA
