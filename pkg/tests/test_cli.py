import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from metaif.checkpoint import load_state
from metaif.cli import main
from metaif.influence import InfluenceVector
from metaif.schemas import check_csv
from metaif.storage import read_container

MINIMAL = str(Path(__file__).resolve().parents[1] / "configs" / "minimal.json")


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert main(["train", "--config", MINIMAL, "--out", str(out)]) == 0
    return out


class TestTrain:
    def test_outputs(self, ckpt):
        manifest = json.loads((ckpt / "manifest.json").read_text())
        assert manifest["converged"] is True
        assert (ckpt / "config.json").exists() and (ckpt / "lambda.bin").exists()
        assert load_state(ckpt).converged

    def test_deterministic(self, ckpt, tmp_path):
        assert main(["train", "--config", MINIMAL, "--out", str(tmp_path)]) == 0
        a = read_container(ckpt / "lambda.bin")[1]["values"]
        b = read_container(tmp_path / "lambda.bin")[1]["values"]
        assert a.tobytes() == b.tobytes()

    def test_non_convergence_exit_code(self, tmp_path):
        cfg = json.loads(Path(MINIMAL).read_text())
        cfg["bilevel"]["outer_max_iters"] = 1
        cfg["bilevel"]["outer_tol"] = 1e-14
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 4
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["converged"] is False

    @pytest.mark.parametrize("extra", [["--delta", "-1"], ["--config", "/nonexistent.json"]])
    def test_config_errors(self, tmp_path, extra, capsys):
        args = ["train", "--out", str(tmp_path)] + (extra if "--config" in extra else ["--config", MINIMAL] + extra)
        assert main(args) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_config_field(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bilevel": {"delta": 1.0, "gamma": 2}}))
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


class TestAttributeAndEdit:
    def test_task_if_all(self, ckpt, tmp_path):
        assert main(["attribute", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
        got = rows(tmp_path / "attribute.csv")
        assert [r["task_id"] for r in got] == ["0", "1", "2", "3", "4"]
        assert all(r["status"] == "ok" for r in got)
        assert check_csv(tmp_path / "attribute.csv") == ("attribute/1", 5)
        inf = InfluenceVector.load(tmp_path / "influence" / "task_if_task2")
        assert inf.kind == "task" and inf.task_id == 2

    def test_instance_targets_and_failures(self, ckpt, tmp_path):
        code = main(["attribute", "--checkpoint", str(ckpt), "--method", "instance_val",
                     "--targets", "1:0", "1:999", "8:0", "--backend", "neumann", "--out", str(tmp_path)])
        assert code == 0
        got = rows(tmp_path / "attribute.csv")
        assert [r["status"] for r in got] == ["ok", "error", "error"]
        assert got[0]["backend"] == "neumann"
        assert (tmp_path / "influence" / "instance_val_task1_ex0.bin").exists()

    def test_bad_target_syntax(self, ckpt, tmp_path):
        assert main(["attribute", "--checkpoint", str(ckpt), "--method", "instance_train",
                     "--targets", "3", "--out", str(tmp_path)]) == 2

    def test_oracle_timing(self, ckpt, tmp_path):
        assert main(["attribute", "--checkpoint", str(ckpt), "--targets", "0",
                     "--oracle-timing", "--out", str(tmp_path)]) == 0
        r = rows(tmp_path / "attribute.csv")[0]
        assert float(r["retrain_seconds"]) > 0 and float(r["speedup"]) > 0

    def test_edit(self, ckpt, tmp_path):
        main(["attribute", "--checkpoint", str(ckpt), "--targets", "0", "1", "--out", str(tmp_path)])
        stems = [str(tmp_path / "influence" / f"task_if_task{k}") for k in (0, 1)]
        assert main(["edit", "--checkpoint", str(ckpt), "--influence", *stems, "--out", str(tmp_path / "e")]) == 0
        lam = read_container(tmp_path / "e" / "edited_lambda.bin")[1]["values"]
        base = load_state(ckpt).lambda_star
        want = base - sum(InfluenceVector.load(s).delta for s in stems)
        np.testing.assert_allclose(lam, want, atol=1e-14)
        summary = json.loads((tmp_path / "e" / "edited_lambda.json").read_text())
        assert len(summary["applied"]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["attribute", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2


class TestExperiments:
    def test_compare_oracle_on_checkpoint(self, ckpt, tmp_path):
        assert main(["compare-oracle", "--checkpoint", str(ckpt), "--removals", "task:1", "val_instance:2:0",
                     "--out", str(tmp_path)]) == 0
        got = rows(tmp_path / "compare_oracle.csv")
        assert {r["method"] for r in got} == {"retrain", "task_if", "direct_if", "instance_val"}
        task_if = [r for r in got if r["method"] == "task_if"][0]
        assert float(task_if["cosine_to_oracle"]) > 0.9
        assert float(task_if["l2_to_oracle"]) < float(task_if["l2_base_to_oracle"])
        assert check_csv(tmp_path / "compare_oracle.csv")[0] == "compare_oracle/1"

    def test_bad_removal(self, ckpt, tmp_path):
        assert main(["compare-oracle", "--checkpoint", str(ckpt), "--removals", "task", "--out", str(tmp_path)]) == 2

    def test_harmful_scan(self, tmp_path):
        assert main(["harmful-scan", "--config", MINIMAL, "--seeds", "0", "--task-fraction", "0.4",
                     "--sample-fraction", "0.5", "--fractions", "0", "0.4", "1", "--out", str(tmp_path)]) == 0
        got = rows(tmp_path / "detection.csv")
        assert len(got) == 6
        full = [r for r in got if r["fraction_checked"] == "1.0"]
        assert all(float(r["fraction_found"]) == 1.0 for r in full)
        assert check_csv(tmp_path / "detection.csv") == ("detection/1", 6)

    def test_harmful_scan_needs_corruption(self, tmp_path):
        assert main(["harmful-scan", "--config", MINIMAL, "--seeds", "0", "--out", str(tmp_path)]) == 2

    def test_effectiveness(self, tmp_path):
        assert main(["effectiveness", "--config", MINIMAL, "--seeds", "0", "--fractions", "0", "0.2",
                     "--random-repeats", "2", "--out", str(tmp_path)]) == 0
        got = rows(tmp_path / "effectiveness_task.csv")
        assert len(got) == 6
        assert check_csv(tmp_path / "effectiveness_task.csv")[0] == "effectiveness/1"


class TestSchemaCheck:
    def test_invalid_file(self, tmp_path, capsys):
        p = tmp_path / "x.csv"
        p.write_text("schema,seed\nnope,1\n")
        assert main(["schema-check", str(p)]) == 2
        assert "INVALID" in capsys.readouterr().out

    def test_console_script_entry(self):
        res = subprocess.run([sys.executable, "-m", "metaif.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and "0.1.0" in res.stdout
