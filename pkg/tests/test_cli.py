import csv
import io
import json
import sys
import textwrap

import pytest

from paretotune.cli import UsageError, main, parse_valid
from paretotune.evaluator import FunctionEvaluator
from paretotune.optimizer import SessionOptions, run_session
from paretotune.pareto import read_front_csv
from paretotune.space import parse_space
from paretotune.surrogate import ForestParams

OBJ = ("ate_m", "runtime_s")
FIVE_ROWS = [(0.0558, 22.2), (0.0420, 14.6), (0.0332, 15.2), (0.0302, 15.8), (0.0269, 17.2)]
SLICE = {
    "name": "kfusion-slice",
    "parameters": [
        {"name": "volume_resolution", "type": "ordinal", "values": [64, 256], "default": 256},
        {"name": "compute_size_ratio", "type": "ordinal", "values": [1, 4], "default": 1},
        {"name": "tracking_rate", "type": "ordinal", "values": [1, 3], "default": 1},
        {"name": "integration_rate", "type": "ordinal", "values": [2], "default": 2},
        {"name": "mu", "type": "ordinal", "values": [0.025, 0.1, 0.175, 0.25], "default": 0.1},
        {"name": "icp_threshold", "type": "ordinal", "values": [0.002, 0.01], "default": 0.01},
        {"name": "pyramid_level1", "type": "ordinal", "values": [2, 5], "default": 5},
        {"name": "pyramid_level2", "type": "ordinal", "values": [5], "default": 5},
        {"name": "pyramid_level3", "type": "ordinal", "values": [2, 4], "default": 4},
    ],
}
FAST = ["--trees", "15"]


@pytest.fixture
def slice_file(tmp_path):
    path = tmp_path / "slice.space"
    path.write_text(json.dumps(SLICE))
    return str(path)


@pytest.fixture
def rows_journal(tmp_path):
    space = parse_space({"parameters": [{"name": "row", "type": "int_range", "lo": 0, "hi": 4, "default": 0}]})
    ev = FunctionEvaluator(lambda c: dict(zip(OBJ, FIVE_ROWS[c["row"]])), OBJ)
    path = tmp_path / "rows.jsonl"
    run_session(space, ev, SessionOptions(rs=5, forest_params=ForestParams(n_trees=5)), path)
    return str(path)


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_tune_rejects_zero_rs(slice_file, tmp_path, capsys):
    code = main(["tune", "--space", slice_file, "--evaluator", "builtin:synth-kfusion", "--rs", "0",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "--rs" in capsys.readouterr().err


@pytest.mark.parametrize("argv, message", [
    (["--evaluator", "builtin:synth-kfusion", "--rs", "99999"], "cardinality"),
    (["--evaluator", "builtin:nope"], "unknown builtin"),
    (["--evaluator", "ssh:host"], "builtin:NAME"),
    (["--evaluator", "cmd:./run.sh"], "--objectives"),
    (["--evaluator", "builtin:synth-kfusion", "--valid", "ate_m>0.05"], "--valid"),
    (["--evaluator", "builtin:synth-kfusion", "--valid", "power<3"], "unknown objective"),
    (["--evaluator", "builtin:synth-kfusion", "--rs", "20", "--budget", "10"], "total_budget"),
])
def test_tune_usage_errors(slice_file, tmp_path, capsys, argv, message):
    code = main(["tune", "--space", slice_file, "--out", str(tmp_path / "o"), *argv])
    assert code == 2
    assert message in capsys.readouterr().err


def test_missing_space_file(tmp_path, capsys):
    code = main(["tune", "--space", str(tmp_path / "none.space"), "--evaluator", "builtin:synth-kfusion",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_tune_outputs_and_determinism(slice_file, tmp_path):
    fronts = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["tune", "--space", slice_file, "--evaluator", "builtin:synth-kfusion", "--rs", "30",
                     "--seed", "4", "--out", str(out), *FAST])
        assert code == 0
        fronts.append((out / "front.csv").read_bytes())
        assert (out / "journal.jsonl").exists()
    assert fronts[0] == fronts[1]
    out = tmp_path / "a"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] in ("converged", "budget-exhausted")
    assert summary["front_size"] <= summary["valid_samples"] <= summary["total_samples"]
    points = rows((out / "points.csv").read_text())
    assert points[0][-3:] == ["source", "iteration", "error"]
    assert len(points) - 1 == summary["total_samples"]
    assert {r[-3] for r in points[1:]} <= {"random", "active-learning"}
    front = read_front_csv(fronts[0].decode(), OBJ)
    assert len(front) == summary["front_size"]
    # the default configuration is in the slice, so speedups are reported
    assert set(summary["speedup"]) == set(OBJ)


def test_pareto_reproduces_tune_front(slice_file, tmp_path):
    out = tmp_path / "run"
    assert main(["tune", "--space", slice_file, "--evaluator", "builtin:synth-kfusion", "--rs", "30",
                 "--out", str(out), *FAST]) == 0
    target = tmp_path / "again.csv"
    assert main(["pareto", "--samples", str(out / "journal.jsonl"), "--out", str(target)]) == 0
    assert target.read_bytes() == (out / "front.csv").read_bytes()


def test_tune_with_validity_threshold(slice_file, tmp_path):
    out = tmp_path / "run"
    assert main(["tune", "--space", slice_file, "--evaluator", "builtin:synth-kfusion", "--rs", "30",
                 "--valid", "ate_m<0.05", "--out", str(out), *FAST]) == 0
    front = read_front_csv((out / "front.csv").read_text(), OBJ)
    assert front and all(e.objectives[0] < 0.05 for e in front)


def test_tune_resume_and_existing_journal(slice_file, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["tune", "--space", slice_file, "--evaluator", "builtin:synth-kfusion", "--rs", "30",
            "--out", str(out), *FAST]
    assert main(args) == 0
    first = (out / "front.csv").read_bytes()
    assert main(args) == 2
    assert "--resume" in capsys.readouterr().err
    assert main(args + ["--resume"]) == 0
    assert (out / "front.csv").read_bytes() == first


def test_pareto_five_rows(rows_journal, tmp_path):
    target = tmp_path / "front.csv"
    assert main(["pareto", "--samples", rows_journal, "--out", str(target)]) == 0
    table = rows(target.read_text())
    assert table[0] == ["row", "ate_m", "runtime_s", "provenance"]
    assert sorted(int(r[0]) for r in table[1:]) == [1, 2, 3, 4]


def test_report_five_rows(rows_journal, tmp_path, capsys):
    target = tmp_path / "summary.json"
    assert main(["report", "--samples", rows_journal, "--ref", "0.06,23.0", "--out", str(target)]) == 0
    table = capsys.readouterr().out
    assert "front size       4" in table
    summary = json.loads(target.read_text())
    assert summary["speedup"]["runtime_s"] == pytest.approx(22.2 / 14.6)
    assert abs(summary["speedup"]["runtime_s"] - 1.52) <= 0.005
    assert abs(summary["speedup"]["ate_m"] - 2.07) <= 0.01
    assert summary["best"]["runtime_s"]["config"] == {"row": 1}
    assert summary["best"]["ate_m"]["config"] == {"row": 4}
    # hand-computed staircase area of the four front rows under (0.06, 23.0)
    area = ((0.06 - 0.0269) * (23.0 - 17.2) + (0.06 - 0.0302) * (17.2 - 15.8)
            + (0.06 - 0.0332) * (15.8 - 15.2) + (0.06 - 0.0420) * (15.2 - 14.6))
    assert summary["hypervolume"] == pytest.approx(area, rel=1e-9)


def test_report_default_on_front(rows_journal, tmp_path, capsys):
    default = tmp_path / "default.json"
    default.write_text(json.dumps({"row": 1}))
    target = tmp_path / "summary.json"
    assert main(["report", "--samples", rows_journal, "--default", str(default), "--out", str(target)]) == 0
    summary = json.loads(target.read_text())
    assert summary["speedup"]["runtime_s"] == 1.0


def test_report_ref_violation(rows_journal, capsys):
    assert main(["report", "--samples", rows_journal, "--ref", "0.03,23.0"]) == 2
    assert "exceeds reference" in capsys.readouterr().err


def test_single_sample_journal(tmp_path):
    space = parse_space({"parameters": [{"name": "x", "type": "ordinal", "values": [3]}]})
    path = tmp_path / "one.jsonl"
    run_session(space, FunctionEvaluator(lambda c: {"f": 0.5, "g": 1.5}, ["f", "g"]),
                SessionOptions(rs=1, forest_params=ForestParams(n_trees=2)), path)
    target = tmp_path / "front.csv"
    assert main(["pareto", "--samples", str(path), "--out", str(target)]) == 0
    assert target.read_text() == "x,f,g,provenance\n3,0.5,1.5,measured\n"


def test_corrupt_journal_exit_code(rows_journal, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    with open(rows_journal) as fh:
        bad.write_text(fh.read()[:-5])
    assert main(["pareto", "--samples", str(bad)]) == 4
    assert "last valid record" in capsys.readouterr().err
    assert main(["report", "--samples", str(bad)]) == 4
    assert main(["pareto", "--samples", str(tmp_path / "absent.jsonl")]) == 2


def test_evaluator_failure_exit_code(slice_file, tmp_path, capsys):
    script = tmp_path / "fail.py"
    script.write_text(textwrap.dedent('''
        import json, sys
        for line in sys.stdin:
            print(json.dumps({"id": json.loads(line)["id"], "error": "segfault"}), flush=True)
    '''))
    code = main(["tune", "--space", slice_file, "--evaluator", f"cmd:{sys.executable} {script}",
                 "--objectives", "ate_m,runtime_s", "--rs", "10", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "segfault" in capsys.readouterr().err
    code = main(["tune", "--space", slice_file, "--evaluator", f"cmd:{tmp_path / 'nothing-here'}",
                 "--objectives", "ate_m,runtime_s", "--rs", "10", "--out", str(tmp_path / "p")])
    assert code == 3


def test_sample_bounds_and_exhaustive(tmp_path, capsys):
    space = tmp_path / "two.space"
    space.write_text(json.dumps({"parameters": [{"name": "a", "type": "boolean"}, {"name": "b", "type": "boolean"}]}))
    assert main(["sample", "--space", str(space), "--n", "5", "--seed", "1"]) == 2
    assert "cardinality 4" in capsys.readouterr().err
    assert main(["sample", "--space", str(space), "--n", "4", "--seed", "1"]) == 0
    table = rows(capsys.readouterr().out)
    assert table[0] == ["a", "b"]
    assert sorted(map(tuple, table[1:])) == [("false", "false"), ("false", "true"), ("true", "false"), ("true", "true")]


def test_sample_with_builtin_metrics(tmp_path, monkeypatch):
    target = tmp_path / "s.csv"
    monkeypatch.setenv("PARETOTUNE_SEED", "8")
    assert main(["sample", "--space", "synth-kfusion.space", "--n", "3000", "--evaluator", "builtin:synth-kfusion",
                 "--out", str(target)]) == 0
    table = rows(target.read_text())
    assert table[0][-3:] == ["ate_m", "runtime_s", "error"]
    assert len(table) == 3001
    assert len({tuple(r[:9]) for r in table[1:]}) == 3000
    assert all(float(r[9]) > 0 and float(r[10]) > 0 and r[11] == "" for r in table[1:])
    again = tmp_path / "t.csv"
    assert main(["sample", "--space", "synth-kfusion.space", "--n", "3000", "--out", str(again)]) == 0
    assert [r[:9] for r in rows(again.read_text())] == [r[:9] for r in table]


def test_space_command(capsys):
    assert main(["space", "synth-elasticfusion.space"]) == 0
    assert "cardinality 442368" in capsys.readouterr().out
    assert main(["space", "--dump", "synth-kfusion"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["parameters"]) == 9
    assert main(["space", "--dump", "nope"]) == 2


def test_parse_valid():
    assert parse_valid(["ate_m<0.05", " runtime_s < 3e-2 "]) == {"ate_m": 0.05, "runtime_s": 0.03}
    assert parse_valid(None) is None
    with pytest.raises(UsageError):
        parse_valid(["ate_m<=0.05"])


def test_argparse_usage_exit_code(capsys):
    assert main(["tune"]) == 2
    assert main([]) == 2
