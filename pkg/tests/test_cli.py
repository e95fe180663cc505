import json

import numpy as np
import pytest

from semihoc.cli import main
from semihoc.datagen import load_features
from semihoc.hierarchy import load_hierarchy


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus one short training run."""
    root = tmp_path_factory.mktemp("ws")
    assert run(
        "gen", "--out", root / "data", "--seed", 1, "--branching", 2, "--depth", 3,
        "--dim", 8, "--train-per-leaf", 8, "--test-per-leaf", 4, "--labels-per-class", 3,
    ) == 0
    assert run(
        "train", "--features", root / "data" / "features.bin",
        "--hierarchy", root / "data" / "hierarchy.txt", "--out", root / "run",
        "--method", "semihoc", "--epochs", 3, "--labeled-batch-size", 8,
        "--unlabeled-ratio", 2, "--lr", 0.05, "--hidden-dim", 32, "--seed", 0, "--quiet",
    ) == 0
    return root


class TestGen:
    def test_outputs_exist(self, workspace):
        assert (workspace / "data" / "hierarchy.txt").exists()
        assert (workspace / "data" / "features.bin").exists()

    def test_same_seed_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            assert run(
                "gen", "--out", tmp_path / sub, "--seed", 7, "--branching", 2, "--depth", 2,
                "--dim", 4, "--train-per-leaf", 3, "--test-per-leaf", 1,
            ) == 0
        assert (tmp_path / "a" / "features.bin").read_bytes() == (tmp_path / "b" / "features.bin").read_bytes()
        assert (tmp_path / "a" / "hierarchy.txt").read_bytes() == (tmp_path / "b" / "hierarchy.txt").read_bytes()

    def test_refuses_nonempty_dir_without_force(self, tmp_path):
        out = tmp_path / "data"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run("gen", "--out", out) == 1
        assert run("gen", "--out", out, "--force") == 0

    def test_invalid_config_exit_one(self, tmp_path):
        assert run("gen", "--out", tmp_path / "x", "--ood-fraction", "1.5") == 1


class TestTrain:
    def test_run_dir_contents(self, workspace):
        assert (workspace / "run" / "config.json").exists()
        assert (workspace / "run" / "metrics.csv").exists()
        assert (workspace / "run" / "ckpt_epoch0003.bin").exists()

    def test_config_snapshot_reproduces_run(self, workspace, tmp_path):
        snapshot = workspace / "run" / "config.json"
        assert run(
            "train", "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "again", "--config", snapshot, "--quiet",
        ) == 0
        a = (workspace / "run" / "metrics.csv").read_bytes()
        b = (tmp_path / "again" / "metrics.csv").read_bytes()
        assert a == b

    def test_unknown_config_key_exit_one(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 0.1}))
        code = run(
            "train", "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "r", "--config", bad,
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "learning_rate" in err and "lr" in err

    def test_resume_equals_uninterrupted(self, workspace, tmp_path):
        args = [
            "train", "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--method", "semihoc", "--epochs", 4, "--labeled-batch-size", 8,
            "--unlabeled-ratio", 2, "--lr", 0.05, "--hidden-dim", 32, "--seed", 0,
            "--checkpoint-every", 2, "--quiet",
        ]
        assert run(*args, "--out", tmp_path / "full") == 0
        assert run(*args, "--out", tmp_path / "resumed", "--resume", tmp_path / "full" / "ckpt_epoch0002.bin") == 0
        full = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        resumed = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
        assert resumed[1:] == full[3:]

    def test_no_age_gating_flag(self, workspace, tmp_path):
        assert run(
            "train", "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "ng", "--method", "semihoc", "--no-age-gating",
            "--epochs", 2, "--labeled-batch-size", 8, "--unlabeled-ratio", 2,
            "--lr", 0.05, "--hidden-dim", 32, "--seed", 0, "--quiet",
        ) == 0
        cfg = json.loads((tmp_path / "ng" / "config.json").read_text())
        assert cfg["method"] == "semihoc-no-gate"


class TestEval:
    def test_eval_outputs(self, workspace, tmp_path):
        assert run(
            "eval", "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
            "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "ev", "--split", "test",
        ) == 0
        for name in ("predictions.txt", "bmhd.csv", "decomposition_id.csv", "decomposition_ood.csv", "confidence_bins.csv"):
            assert (tmp_path / "ev" / name).exists()

    def test_eval_deterministic(self, workspace, tmp_path):
        for sub in ("e1", "e2"):
            assert run(
                "eval", "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
                "--features", workspace / "data" / "features.bin",
                "--hierarchy", workspace / "data" / "hierarchy.txt",
                "--out", tmp_path / sub,
            ) == 0
        for name in ("predictions.txt", "bmhd.csv", "confidence_bins.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()

    def test_train_split_emits_diagnostics(self, workspace, tmp_path):
        assert run(
            "eval", "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
            "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "tr", "--split", "train",
        ) == 0
        assert (tmp_path / "tr" / "diagnostics.csv").exists()

    def test_hash_mismatch_refused(self, workspace, tmp_path):
        other = tmp_path / "other"
        assert run(
            "gen", "--out", other, "--seed", 2, "--branching", 2, "--depth", 2,
            "--dim", 8, "--train-per-leaf", 3, "--test-per-leaf", 1,
        ) == 0
        code = run(
            "eval", "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
            "--features", other / "features.bin",
            "--hierarchy", other / "hierarchy.txt",
            "--out", tmp_path / "bad",
        )
        assert code == 2

    def test_eval_from_prediction_dump(self, workspace, tmp_path):
        assert run(
            "eval", "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
            "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "src",
        ) == 0
        assert run(
            "eval", "--predictions", tmp_path / "src" / "predictions.txt",
            "--features", workspace / "data" / "features.bin",
            "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--out", tmp_path / "dump",
        ) == 0
        assert (tmp_path / "src" / "bmhd.csv").read_bytes() == (tmp_path / "dump" / "bmhd.csv").read_bytes()


class TestInspect:
    def test_inspect_all(self, workspace, capsys):
        assert run(
            "inspect", "--hierarchy", workspace / "data" / "hierarchy.txt",
            "--features", workspace / "data" / "features.bin",
            "--checkpoint", workspace / "run" / "ckpt_epoch0003.bin",
        ) == 0
        out = capsys.readouterr().out
        assert "nodes:" in out and "samples:" in out and "epochs completed: 3" in out

    def test_nothing_to_inspect(self):
        assert run("inspect") == 1


class TestOracleCheck:
    def test_all_pass(self, capsys):
        assert run("oracle-check", "--cases", 20, "--seed", 7) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4

    @pytest.mark.parametrize("fault", ["tree", "fusion", "cutoff", "gradient"])
    def test_injected_fault_detected(self, fault, capsys):
        assert run("oracle-check", "--cases", 10, "--seed", 7, "--inject-fault", fault) == 2
        out = capsys.readouterr().out
        assert "FAIL" in out

    def test_reproducible_case_set(self, capsys):
        assert run("oracle-check", "--cases", 15, "--seed", 3) == 0
        first = capsys.readouterr().out
        assert run("oracle-check", "--cases", 15, "--seed", 3) == 0
        assert capsys.readouterr().out == first
