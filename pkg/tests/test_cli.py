import subprocess
import sys

import pytest

from mpcdistill import io
from mpcdistill.cli import main

TINY = """\
[generation]
N = 120
M = 5
m = 20
n_q = 6
[solver]
multistart = min, max
[learner]
n_trees = 5
max_leaf_nodes = 20
m_variants = 10, 20
[evaluation]
n_eval = 4
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "tiny.ini").write_text(TINY)
    cfg = str(d / "tiny.ini")
    out = str(d / "out")
    assert main(["generate", "--config", cfg, "--out", out]) == 0
    assert main(["train", "--config", cfg, "--out", out]) == 0
    assert main(["evaluate", "--config", cfg, "--out", out, "--nominal", "--sanity"]) == 0
    return d


def test_pipeline_outputs(run_dir):
    out = run_dir / "out"
    for name in ("dataset.csv", "dataset.json", "dataset.timing.json", "config.ini", "model_m10.json",
                 "model_m20.json", "train_report.json", "nominal_model.json", "eval_report.csv", "eval_report.json"):
        assert (out / name).exists(), name
    rep = io.read_json(out / "eval_report.json", io.EVAL_REPORT)
    assert rep["aggregates"]["completed"] == 4
    assert set(rep["config"]["policies"]) == {"model_m10", "model_m20", "ideal_replay", "nominal"}
    rows = io.read_eval_rows(out / "eval_report.csv")
    for r in rows:
        assert abs(r["J_ideal_replay"] - r["J_ideal"]) <= 1e-9


def test_generate_is_byte_identical_on_rerun(run_dir, capsys):
    out2 = run_dir / "again"
    assert main(["generate", "--config", str(run_dir / "tiny.ini"), "--out", str(out2)]) == 0
    for name in ("dataset.csv", "dataset.json"):
        assert (out2 / name).read_bytes() == (run_dir / "out" / name).read_bytes()
    assert "data economy" in capsys.readouterr().out


def test_written_config_reproduces_run(run_dir):
    out3 = run_dir / "from_written"
    assert main(["generate", "--config", str(run_dir / "out" / "config.ini"), "--out", str(out3)]) == 0
    assert (out3 / "dataset.csv").read_bytes() == (run_dir / "out" / "dataset.csv").read_bytes()


def test_seed_flag_changes_dataset(run_dir):
    out4 = run_dir / "seeded"
    assert main(["generate", "--config", str(run_dir / "tiny.ini"), "--out", str(out4), "--seed", "11"]) == 0
    assert (out4 / "dataset.csv").read_bytes() != (run_dir / "out" / "dataset.csv").read_bytes()


def test_report_writes_tables(run_dir, capsys):
    out = run_dir / "out"
    files = [out / n for n in ("dataset.csv", "dataset.json", "dataset.timing.json", "train_report.json",
                               "eval_report.json")]
    assert main(["report", "--out", str(run_dir / "tables"), *map(str, files)]) == 0
    written = sorted(p.name for p in (run_dir / "tables").iterdir())
    assert written == sorted([
        "dataset_samples_control_hist.csv", "dataset_param_ratio_hist.csv", "dataset_control_hist.csv",
        "dataset.timing_solve_time_cdf.csv", "train_report_confusion.csv", "eval_report_cost_comparison.csv",
    ])
    assert capsys.readouterr().out.count("wrote") == 6


def test_report_without_files_is_usage_error(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "at least one input" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[generation]\nN = -3\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "generation.N" in capsys.readouterr().err


def test_unknown_override_exit_code(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--set", "generation.nope=1"]) == 2
    assert "generation.nope" in capsys.readouterr().err


def test_corrupt_dataset_exit_code(tmp_path, capsys):
    (tmp_path / "dataset.csv").write_text("garbage\n")
    assert main(["train", "--out", str(tmp_path)]) == 3
    assert "line 1" in capsys.readouterr().err


def test_evaluate_without_models_is_usage_error(tmp_path):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mpcdistill", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "generate" in res.stdout


def test_sanity_replay_recovers_full_advantage(run_dir):
    agg = io.read_json(run_dir / "out" / "eval_report.json", io.EVAL_REPORT)["aggregates"]
    assert agg["advantage_defined"]
    assert agg["recovered_advantage"]["ideal_replay"] == pytest.approx(1.0, abs=1e-6)
    assert agg["ordering"]["ideal_replay"]


def test_nominal_passed_as_learned_recovers_nothing(run_dir):
    out = run_dir / "out"
    dup = run_dir / "dup"
    nominal = str(out / "nominal_model.json")
    assert main(["evaluate", "--config", str(run_dir / "tiny.ini"), "--out", str(dup),
                 "--model", nominal, "--nominal-model", nominal]) == 0
    agg = io.read_json(dup / "eval_report.json", io.EVAL_REPORT)["aggregates"]
    assert agg["recovered_advantage"]["nominal_model"] == 0.0
