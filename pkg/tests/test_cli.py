import csv
import json

import pytest

from c2fed.cli import main

SMALL = ["federation.num_phases=2", "training.epochs=1", "training.lcdc_epochs=1",
         "metrics.single_task_reference=false", "prompts.prompt_len=2", "prompts.num_prompts=2"]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


def test_run_writes_outputs(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path)] + _sets(SMALL + ["outputs.w_snapshots=true"])) == 0
    for name in ("config.yaml", "accuracy_matrix.csv", "metrics.json", "loss_trace.csv", "message_log.jsonl",
                 "w_snapshots.json", "tasks.json"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "loss_trace.csv") as fh:
        assert next(csv.reader(fh)) == ["run_id", "stage", "round", "client", "step", "component", "value"]
    assert "Avg" in json.loads(capsys.readouterr().out)


def test_unknown_key_exit_two(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--set", "training.warp=9"]) == 2
    assert "training.warp" in capsys.readouterr().err


def test_baseline_log_has_no_dist_reports(tmp_path):
    assert main(["run", "--out", str(tmp_path)] + _sets(SMALL + ["mode=baseline"])) == 0
    kinds = {json.loads(line)["kind"] for line in (tmp_path / "message_log.jsonl").read_text().splitlines()}
    assert "DistReport" not in kinds and "PromptUpload" in kinds


def test_echoed_config_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--out", str(a)] + _sets(SMALL + ["seed=5"])) == 0
    assert main(["run", "--config", str(a / "config.yaml"), "--out", str(b)]) == 0
    for name in ("accuracy_matrix.csv", "metrics.json", "loss_trace.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_single_point_sweep_equals_run(tmp_path):
    assert main(["run", "--out", str(tmp_path / "run")] + _sets(SMALL + ["seed=2"])) == 0
    assert main(["sweep", "--out", str(tmp_path / "sw"), "--seeds", "2"] + _sets(SMALL)) == 0
    got = tmp_path / "sw" / "default" / "seed_2"
    assert (got / "accuracy_matrix.csv").read_bytes() == (tmp_path / "run" / "accuracy_matrix.csv").read_bytes()


def test_sweep_modes_by_seeds(tmp_path):
    rc = main(["sweep", "--out", str(tmp_path), "--grid", "mode=baseline,lcdc-only,cpa-only,full",
               "--seeds", "0,1,2"] + _sets(SMALL))
    assert rc == 0
    runs = sorted(p.parent for p in tmp_path.glob("*/seed_*/metrics.json"))
    assert len(runs) == 12
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(r["n_seeds"] == "3" for r in rows)
    assert {"Avg_mean", "Avg_std", "CT_mean"} <= set(rows[0])


def test_p_zero_row_equals_cpa_only(tmp_path):
    assert main(["sweep", "--out", str(tmp_path / "p"), "--grid", "training.p_use_comp=0.0,0.3,0.5",
                 "--seeds", "0,1"] + _sets(SMALL + ["mode=full"])) == 0
    assert main(["sweep", "--out", str(tmp_path / "c"), "--seeds", "0,1"] + _sets(SMALL + ["mode=cpa-only"])) == 0
    with open(tmp_path / "p" / "summary.csv") as fh:
        rows = {r["point"]: r for r in csv.DictReader(fh)}
    assert len(rows) == 3
    for s in (0, 1):
        a = (tmp_path / "p" / "training.p_use_comp=0.0" / f"seed_{s}" / "accuracy_matrix.csv").read_bytes()
        b = (tmp_path / "c" / "default" / f"seed_{s}" / "accuracy_matrix.csv").read_bytes()
        assert a == b


def test_sweep_bad_grid_exit_two(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--grid", "mode=fast"]) == 2
    assert main(["sweep", "--out", str(tmp_path), "--seeds", "a,b"]) == 2


def test_sweep_partial_failure(tmp_path, capsys):
    # a run that times out fails at runtime, the other grid point still completes
    rc = main(["sweep", "--out", str(tmp_path), "--grid", "federation.timeout_ticks=100",
               "--grid", "federation.latency_ticks=0,200"] + _sets(SMALL))
    assert rc == 1
    assert "failed" in capsys.readouterr().err
    assert (tmp_path / "federation.timeout_ticks=100__federation.latency_ticks=0" / "seed_0" / "metrics.json").exists()


def test_metrics_verb(tmp_path, capsys):
    main(["run", "--out", str(tmp_path)] + _sets(SMALL))
    saved = json.loads((tmp_path / "metrics.json").read_text())
    capsys.readouterr()
    assert main(["metrics", str(tmp_path)]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again["Avg"] == saved["Avg"] and again["FM"] == saved["FM"]
    assert main(["metrics", str(tmp_path), "--variant", "sum"]) == 0
    assert main(["metrics", str(tmp_path / "missing")]) == 1


def test_gen_bench(tmp_path):
    assert main(["gen-bench", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "benchmark.json").read_text())
    assert doc["tasks"] and doc["schedule"]


def test_self_test_pass_fault_and_repeat(tmp_path, capsys):
    assert main(["self-test", "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out
    assert main(["self-test"]) == 0
    assert capsys.readouterr().out == first
    assert main(["self-test", "--inject-fault", "flip-second-moment"]) == 1
    out = capsys.readouterr().out
    assert "FAIL pooled-moments" in out
    assert json.loads((tmp_path / "self_test.json").read_text())[0]["passed"]
