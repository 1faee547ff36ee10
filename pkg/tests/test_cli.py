"""End-to-end CLI runs on tiny data, plus the exit-code contract."""
import json
import shutil

import pytest

import cli
from conftest import read_csv

TINY_DATA = ["--num-tasks", "2", "--classes-per-task", "2", "--train-per-class", "8",
             "--test-per-class", "4", "--height", "8", "--width", "8", "--cutoff", "2",
             "--noise-scale", "0.5", "--pretext-classes", "2", "--seed", "5"]
TINY_RUN = {
    "train": {"lr": 0.05, "batch_size": 8, "pretrain_epochs": 1, "precision": "f64",
              "eval_batch_size": 16},
    "schedule": {"total_epochs": 3},
    "model": {"input_shape": [1, 8, 8]},
}


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def data_dir(tmp_path, capsys):
    directory = tmp_path / "data"
    code, out, _ = run(capsys, "gen-data", "--out", str(directory), *TINY_DATA)
    assert code == 0
    assert json.loads(out)["num_tasks"] == 2
    return directory


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


class TestExitCodes:
    def test_unknown_flag_is_a_usage_error(self, capsys):
        code, _, err = run(capsys, "verify", "--bogus")
        assert code == 64
        assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_missing_command(self, capsys):
        assert run(capsys)[0] == 64

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--ckpt", str(tmp_path / "absent"), "--data",
                           str(tmp_path), "--task", "1")
        assert code == 6
        assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 6

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"bogus": 1}}))
        code, _, _ = run(capsys, "train", "--data", str(tmp_path), "--config", str(path),
                         "--out", str(tmp_path / "out"))
        assert code == 2

    def test_degenerate_data_spec(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--out", str(tmp_path), "--height", "8",
                         "--width", "8", "--cutoff", "9")
        assert code == 2

    def test_resume_rejects_a_new_config(self, tmp_path, config_path, capsys):
        code, _, _ = run(capsys, "train", "--data", str(tmp_path), "--out", str(tmp_path),
                         "--resume", str(tmp_path), "--config", str(config_path))
        assert code == 64

    def test_bad_seed_list(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--data", str(tmp_path), "--out", str(tmp_path),
                         "--grid", "--seeds", "1,x")
        assert code == 64

    def test_too_few_verify_cases(self, capsys):
        assert run(capsys, "verify", "--cases", "1")[0] == 64


def test_verify_writes_a_passing_report(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--cases", "4", "--seed", "1", "--out", str(tmp_path))
    assert code == 0
    assert json.loads(out)["passed"] is True
    assert json.loads((tmp_path / "verify_report.json").read_text())["failed_checks"] == []


def test_theory_small_run(tmp_path, capsys):
    code, out, _ = run(capsys, "theory", "--instances", "2", "--tasks", "2", "--out",
                       str(tmp_path))
    assert code == 0
    summary = json.loads(out)
    assert summary["instances"] == 2 and summary["violations"] == 0
    assert summary["max_drift_probe"] < 1e-8
    assert (tmp_path / "theory_report.csv").exists()


def test_train_eval_diag_resume(tmp_path, data_dir, config_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--data", str(data_dir), "--config", str(config_path),
                          "--bn-mode", "xconv", "--out", str(out), "--checkpoint-after", "2")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["norm_mode"] == "xconv_bn" and summary["schedule"] == "hierarchical"
    for name in ("metrics.json", "acc_matrix.csv", "deltas.csv", "logs.json"):
        assert (out / name).is_file()
    for name in ("checkpoint_after_1", "checkpoint_after_2", "checkpoint"):
        assert (out / name / "manifest.json").is_file()

    code, stdout, _ = run(capsys, "eval", "--ckpt", str(out / "checkpoint"), "--data",
                          str(data_dir), "--task", "1", "--moments", "t-both", "--out",
                          str(tmp_path / "eval.json"))
    assert code == 0
    assert 0.0 <= json.loads(stdout)["accuracy"] <= 1.0
    assert (tmp_path / "eval.json").is_file()

    code, stdout, _ = run(capsys, "diag", "--ckpt-after-1", str(out / "checkpoint_after_1"),
                          "--ckpt-final", str(out / "checkpoint"), "--data", str(data_dir),
                          "--out", str(tmp_path / "diag"))
    assert code == 0
    from_diag = read_csv(tmp_path / "diag" / "deltas.csv")
    from_train = read_csv(out / "deltas.csv")
    assert [row["layer"] for row in from_diag] == [row["layer"] for row in from_train]
    for diag_row, train_row in zip(from_diag, from_train):
        assert float(diag_row["delta1"]) == pytest.approx(float(train_row["delta1"]), abs=1e-9)

    resumed = tmp_path / "resumed"
    code, stdout, _ = run(capsys, "train", "--data", str(data_dir), "--out", str(resumed),
                          "--resume", str(out / "checkpoint_after_1"))
    assert code == 0
    assert read_csv(resumed / "acc_matrix.csv") == read_csv(out / "acc_matrix.csv")


def grid(capsys, data_dir, config_path, out, *extra):
    code, stdout, _ = run(capsys, "train", "--data", str(data_dir), "--config", str(config_path),
                          "--grid", "--seeds", "0", "--out", str(out), *extra)
    assert code == 0
    return json.loads(stdout)


def fixed_cell(calls):
    """Stand-in for one grid run: hierarchical + xconv wins except on delta2 - delta0."""
    def cell(data_dir, cell_document, schedule, norm_mode, seed, out):
        calls.append((schedule, norm_mode, seed, cell_document["schedule"]["total_epochs"]))
        best = schedule == "hierarchical" and norm_mode == "xconv_bn"
        return {"schedule": schedule, "norm_mode": norm_mode, "seed": seed,
                "acc": 0.9 if best else 0.5, "fgt": 0.05 if best else 0.3,
                "median_delta1": 0.1 if best else 0.2,
                "median_delta2_minus_delta0": 0.4 if best else 0.2}
    return cell


class TestGrid:
    def test_grid_resumes_from_its_ledger(self, tmp_path, data_dir, config_path, capsys,
                                          monkeypatch):
        out = tmp_path / "grid"
        summary = grid(capsys, data_dir, config_path, out)
        assert summary["cells"] == 6 and summary["ran"] == 6
        rows = read_csv(out / "grid.csv")
        assert {(row["schedule"], row["norm_mode"]) for row in rows} == {
            (schedule, norm_mode) for schedule in ("plain_ft", "hierarchical")
            for norm_mode in ("shared_bn", "task_bn", "xconv_bn")}
        assert len(read_csv(out / "orderings.csv")) == 8

        # an identical rerun reads every cell from the ledger
        calls = []
        monkeypatch.setattr(cli, "grid_cell", fixed_cell(calls))
        summary = grid(capsys, data_dir, config_path, out)
        assert calls == [] and summary["ran"] == 0
        assert read_csv(out / "grid.csv") == rows

    def test_changed_config_reruns_every_cell(self, tmp_path, data_dir, config_path, capsys,
                                              monkeypatch):
        calls = []
        monkeypatch.setattr(cli, "grid_cell", fixed_cell(calls))
        out = tmp_path / "grid"
        grid(capsys, data_dir, config_path, out)
        assert len(calls) == 6

        config_path.write_text(json.dumps({**TINY_RUN, "schedule": {"total_epochs": 4}}))
        summary = grid(capsys, data_dir, config_path, out)
        assert summary["ran"] == 6
        assert [epochs for *_, epochs in calls] == [3] * 6 + [4] * 6

    def test_changed_data_reruns_every_cell(self, tmp_path, data_dir, config_path, capsys,
                                            monkeypatch):
        calls = []
        monkeypatch.setattr(cli, "grid_cell", fixed_cell(calls))
        out = tmp_path / "grid"
        grid(capsys, data_dir, config_path, out)

        shutil.rmtree(data_dir)
        reseeded = TINY_DATA[:-1] + ["6"]
        assert run(capsys, "gen-data", "--out", str(data_dir), *reseeded)[0] == 0
        summary = grid(capsys, data_dir, config_path, out)
        assert summary["ran"] == 6 and len(calls) == 12

    def test_grid_reports_ablation_orderings(self, tmp_path, data_dir, config_path, capsys,
                                             monkeypatch):
        monkeypatch.setattr(cli, "grid_cell", fixed_cell([]))
        out = tmp_path / "grid"
        orderings = grid(capsys, data_dir, config_path, out)["orderings"]
        failing = [ordering for ordering in orderings if not ordering["holds"]]
        assert len(orderings) == 8
        assert [(o["metric"], o["lhs"], o["rhs"]) for o in failing] == [
            ("median_delta2_minus_delta0", "hierarchical+xconv_bn", "hierarchical+task_bn")]
        rows = read_csv(out / "orderings.csv")
        assert [row["holds"] for row in rows] == ["True"] * 7 + ["False"]


class TestGenDataLearnability:
    NOISE_ONLY = ["--prototype-scale", "0.001", "--noise-scale", "10", "--test-per-class",
                  "60"]

    def test_degenerate_tasks_are_a_data_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "data"), *TINY_DATA,
                           *self.NOISE_ONLY)
        assert code == 3
        assert "degenerate" in json.loads(err.strip().splitlines()[-1])["message"]
        assert not (tmp_path / "data" / "manifest.json").exists()

    def test_allow_degenerate_writes_the_dataset(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out", str(tmp_path / "data"), *TINY_DATA,
                           *self.NOISE_ONLY, "--allow-degenerate")
        assert code == 0
        assert json.loads(out)["num_tasks"] == 2
        assert (tmp_path / "data" / "manifest.json").is_file()
