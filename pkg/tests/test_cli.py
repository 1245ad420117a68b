"""End-to-end command line flows on a small trained checkpoint."""

import json

import pytest
from click.testing import CliRunner

from visflow.cli import main


TASK = {"grid_side": 2, "n_colors": 2, "sys_len": 1, "query_len": 2, "seed": 5}

CONFIG = {
    "seed": 5,
    "model": {"layers": 4, "heads": 2, "hidden": 16, "ffn": 32,
              "vocab": 8, "max_seq": 16},
    "task": TASK,
    "train": {"steps": 25, "batch": 4, "learning_rate": 3e-3},
    "data": {"train_count": 32, "eval_count": 8},
}


def run_ok(*args):
    result = CliRunner().invoke(main, list(args), catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def run_fail(*args):
    result = CliRunner().invoke(main, list(args))
    assert result.exit_code != 0
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Task spec, config, eval dataset, and a trained checkpoint."""
    ws = tmp_path_factory.mktemp("cli")
    (ws / "task.json").write_text(json.dumps(TASK))
    (ws / "config.json").write_text(json.dumps(CONFIG))
    run_ok("gen-data", "--spec", str(ws / "task.json"), "--count", "8",
           "--split", "1", "--out", str(ws / "data"))
    run_ok("train", "--config", str(ws / "config.json"), "--out", str(ws / "run"))
    return ws


@pytest.fixture(scope="module")
def ckpt(workspace):
    return str(workspace / "run" / "checkpoint.bin")


@pytest.fixture(scope="module")
def data(workspace):
    return str(workspace / "data" / "dataset.jsonl")


class TestGenData:
    def test_writes_one_line_per_example(self, workspace):
        lines = (workspace / "data" / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 8
        assert all(json.loads(l) for l in lines)

    def test_byte_deterministic(self, workspace, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run_ok("gen-data", "--spec", str(workspace / "task.json"),
                   "--count", "8", "--split", "1", "--out", str(out))
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
        assert (a / "dataset.jsonl").read_bytes() == \
               (workspace / "data" / "dataset.jsonl").read_bytes()

    def test_missing_spec_fails_cleanly(self, tmp_path):
        result = run_fail("gen-data", "--spec", str(tmp_path / "no.json"),
                          "--count", "2", "--out", str(tmp_path / "o"))
        assert "Error" in result.stderr or "error" in result.stderr


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.bin").is_file()
        lines = (run / "loss_curve.csv").read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == CONFIG["train"]["steps"] + 1
        metrics = json.loads((run / "metrics.json").read_text())
        assert set(metrics) == {"final_loss", "train_accuracy", "eval_accuracy"}
        assert 0.0 <= metrics["eval_accuracy"] <= 1.0

    def test_byte_deterministic(self, workspace, tmp_path):
        out = tmp_path / "again"
        run_ok("train", "--config", str(workspace / "config.json"), "--out", str(out))
        for name in ("checkpoint.bin", "loss_curve.csv", "metrics.json"):
            assert (out / name).read_bytes() == \
                   (workspace / "run" / name).read_bytes(), name

    def test_bad_config_fails_cleanly(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({**CONFIG, "seed": None}))
        result = run_fail("train", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert result.stderr.startswith("error:")


class TestSaliency:
    def test_flow_profile(self, ckpt, data, tmp_path):
        run_ok("saliency", "--ckpt", ckpt, "--data", data, "--out", str(tmp_path))
        lines = (tmp_path / "flow_profile.csv").read_text().splitlines()
        assert lines[0] == "layer,s_sys,s_img,s_ins,s_vv,s_vt,s_vt_rx"
        assert len(lines) == CONFIG["model"]["layers"] + 1
        first = lines[1].split(",")
        assert first[0] == "0"
        # Causality makes the image-to-instruction column segment empty.
        assert float(first[5]) == 0.0


class TestPerturb:
    def test_windows_and_alias(self, ckpt, data, tmp_path):
        run_ok("perturb", "--ckpt", ckpt, "--data", data, "--kind", "vt",
               "--windows", "first2,last2", "--out", str(tmp_path))
        lines = (tmp_path / "consistency.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header == ["window_start", "window_end", "kind", "c_label",
                          "c_score", "e", "d", "n_examples"]
        rows = [l.split(",") for l in lines[1:]]
        assert [(r[0], r[1], r[2]) for r in rows] == [
            ("0", "1", "vt_block"), ("2", "3", "vt_block")]
        for r in rows:
            assert 0.0 <= float(r[3]) <= 1.0
            assert r[7] == "8"

    def test_paired_kind_reports_bias(self, ckpt, data, tmp_path):
        run_ok("perturb", "--ckpt", ckpt, "--data", data, "--kind", "paired",
               "--windows", "1", "--out", str(tmp_path))
        lines = (tmp_path / "consistency.csv").read_text().splitlines()
        rows = [l.split(",") for l in lines[1:]]
        # The log bias ratio is attached to the vv row of each pair.
        assert [r[2] for r in rows] == ["vv_block", "vt_block"]
        assert rows[1][6] == ""

    def test_bad_window_fails_cleanly(self, ckpt, data, tmp_path):
        result = run_fail("perturb", "--ckpt", ckpt, "--data", data, "--kind",
                          "vt", "--windows", "7", "--out", str(tmp_path))
        assert result.stderr.startswith("error:")


class TestPruneEval:
    def test_preset_schedule(self, ckpt, data, tmp_path):
        run_ok("prune-eval", "--ckpt", ckpt, "--data", data,
               "--schedule", "none", "--out", str(tmp_path))
        report = json.loads((tmp_path / "prune_eval.json").read_text())
        assert report["baseline_accuracy"] == report["pruned_accuracy"]
        assert report["accuracy_drop_points"] == 0.0

    def test_stage_file_schedule(self, ckpt, data, tmp_path):
        stage_file = tmp_path / "sched.json"
        stage_file.write_text(json.dumps({"stages": [
            {"filter_layer": 1, "filter_ratio": 50.0, "criterion": "phi_sh"}]}))
        run_ok("prune-eval", "--ckpt", ckpt, "--data", data,
               "--schedule", str(stage_file), "--out", str(tmp_path))
        report = json.loads((tmp_path / "prune_eval.json").read_text())
        seq = 1 + 4 + 2 + 1
        assert len(report["keep_map"][0]) == seq
        assert len(report["keep_map"][1]) == seq - 2  # half of 4 image tokens
        assert set(report["cost"]) == {"baseline_tflops", "pruned_tflops",
                                       "ratio_percent", "eta", "segments"}

    def test_unknown_preset_fails_cleanly(self, ckpt, data, tmp_path):
        result = run_fail("prune-eval", "--ckpt", ckpt, "--data", data,
                          "--schedule", "nope", "--out", str(tmp_path))
        assert result.stderr.startswith("error:")


class TestCost:
    def test_json_on_stdout(self):
        result = run_ok("cost", "--arch", "llava-7b", "--n-image", "576",
                        "--schedule", "aggressive")
        obj = json.loads(result.output)
        assert obj["baseline_tflops"] == pytest.approx(2.99, abs=0.02)
        assert obj["pruned_tflops"] == pytest.approx(0.73, abs=0.02)
        assert [s["n_tokens"] for s in obj["segments"]] == [576, 288, 72]

    def test_stage_file_taken_literally(self, tmp_path):
        stage_file = tmp_path / "sched.json"
        stage_file.write_text(json.dumps({"stages": [
            {"filter_layer": 2, "filter_ratio": 50.0, "criterion": "phi_sh"}]}))
        result = run_ok("cost", "--arch", "llava-13b", "--n-image", "576",
                        "--schedule", str(stage_file))
        obj = json.loads(result.output)
        # Literal stage stays at layer 2 even though the 13B preset moves to 3.
        assert [s["start_layer"] for s in obj["segments"]] == [0, 2]

    def test_unknown_arch_fails_cleanly(self):
        result = run_fail("cost", "--arch", "gpt-99", "--n-image", "10",
                          "--schedule", "aggressive")
        assert result.stderr.startswith("error:")


class TestAblate:
    def test_grid_rows(self, ckpt, data, tmp_path):
        run_ok("ablate", "--ckpt", ckpt, "--data", data,
               "--grid", "k=1,2:r=50,75", "--out", str(tmp_path))
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0] == "filter_layer,ratio,accuracy,drop_points,eta"
        assert len(lines) == 1 + 4
        ks = [l.split(",")[0] for l in lines[1:]]
        assert ks == ["1", "1", "2", "2"]


class TestEntry:
    def test_version(self):
        result = run_ok("--version")
        assert "visflow" in result.output
