import csv
import json

import pytest

from igenet import cli, harness

SMALL = {
    "network.num_nodes": 3,
    "frame.subcarriers": 64,
    "frame.cp_len": 8,
    "frame.symbols_per_slot": 2,
    "estimation.power_strategy": "random",
    "run.trials": 2,
}


@pytest.fixture(scope="module")
def small_cfg():
    return harness.load_config(overrides=SMALL)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("run")
    harness.run_experiment(small_cfg, "estimation-error", out_dir=out)
    return out


# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = harness.load_config()
    assert cfg["network"]["num_nodes"] == 9 and cfg["frame"]["subcarriers"] == 1024
    assert set(cfg["experiments"]) == set(harness.EXPERIMENT_NAMES)
    assert len(harness.EXPERIMENT_NAMES) == 12


@pytest.mark.parametrize("over", [
    {"network.num_nodes": 1},
    {"power.p_min_mw": 1300.0},
    {"network.min_dist_m": 200},
    {"schedule.backend": "mosek"},
    {"estimation.beta": 1.5},
    {"channel.antennas": "many"},
])
def test_invalid_values(over):
    with pytest.raises(harness.ConfigInvalid):
        harness.load_config(overrides=over)


def test_unknown_fields_rejected(tmp_path):
    with pytest.raises(harness.ConfigInvalid):
        harness.load_config(overrides={"network.nodes": 4})
    with pytest.raises(harness.ConfigInvalid):
        harness.load_config({"experiments": {"nope": {}}})
    with pytest.raises(harness.ConfigInvalid):
        harness.load_config({"experiments": {"to-sweep": {"bogus": 1}}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(harness.ConfigInvalid):
        harness.load_config(bad)


def test_file_and_overrides_layer(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"network": {"num_nodes": 5}, "power": {"p_max_mw": 1000.0}}))
    cfg = harness.load_config(f, {"power.p_max_mw": 1100.0})
    assert cfg["network"]["num_nodes"] == 5 and cfg["power"]["p_max_mw"] == 1100.0
    assert cfg["network"]["area_side_m"] == 100


def test_parse_value():
    assert harness.parse_value("3") == 3 and harness.parse_value("[1, 2]") == [1, 2]
    assert harness.parse_value("true") is True and harness.parse_value("scs") == "scs"


def test_hash_and_seeds():
    a, b = harness.load_config(), harness.load_config()
    assert harness.config_hash(a) == harness.config_hash(b)
    assert harness.config_hash(a) != harness.config_hash(harness.load_config(overrides={"run.master_seed": 1}))
    assert harness.trial_seed(0, 3) == harness.trial_seed(0, 3) != harness.trial_seed(0, 4)


def test_scenario_overrides():
    cfg = harness.load_config()
    dense = harness.scenario_for(cfg, "convergence")
    assert dense["schedule"]["use_delta"] is False and dense["traffic"]["max_slots"] == 2
    assert cfg["schedule"]["use_delta"] is True  # the base config is untouched


# ---------------------------------------------------------------- runs


def test_run_writes_csv_and_summary(run_dir, small_cfg):
    rows = list(csv.DictReader(open(run_dir / "estimation-error.csv")))
    assert len(rows) == 2 * 4 * 4  # trials x links^2
    h = harness.config_hash(small_cfg)
    assert all(r["config_hash"] == h for r in rows)
    s = json.loads((run_dir / "estimation-error.summary.json").read_text())
    assert s["succeeded"] == 2 and s["failed"] == 0 and s["config_hash"] == h
    assert s["seeds"] == [harness.trial_seed(0, k) for k in range(2)]
    assert {r["seed"] for r in rows} == {str(x) for x in s["seeds"]}


def test_rerun_is_byte_identical(run_dir, small_cfg, tmp_path):
    harness.run_experiment(small_cfg, "estimation-error", out_dir=tmp_path, workers=2)
    for name in ("estimation-error.csv", "estimation-error.summary.json"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_unknown_experiment(small_cfg):
    with pytest.raises(harness.ConfigInvalid):
        harness.run_experiment(small_cfg, "fig-99")


def test_trial_failure_is_recorded(small_cfg, tmp_path):
    cfg = harness.load_config(small_cfg, {"network.min_density_per_km2": 1e6})
    rep = harness.run_experiment(cfg, "estimation-error", out_dir=tmp_path)
    assert rep.summary["failed"] == 2 and rep.summary["metrics"] is None
    assert "PlacementInfeasible" in rep.failures[0]["error"]
    with pytest.raises(harness.MissingData):
        harness.report([tmp_path])


def test_bound_curves_small(tmp_path):
    cfg = harness.load_config(overrides={"experiments.bound-curves.orders": [4, 16],
                                         "experiments.bound-curves.deltas": [0.01],
                                         "experiments.bound-curves.empirical_n": [25],
                                         "experiments.bound-curves.empirical_trials": 200})
    rep = harness.run_experiment(cfg, "bound-curves", out_dir=tmp_path)
    m = rep.summary["metrics"]
    assert m["qpsk_max_upper_bound"] == 0.0
    assert 70 <= m["threshold_n_k"]["16-QAM@0.01"] <= 95


# ---------------------------------------------------------------- report


def _summary(tmp_path, name, metrics, h="abc", failed=0):
    doc = {"experiment": name, "config_hash": h, "trials": 3, "failed": failed, "failures": [], "metrics": metrics,
           "succeeded": 3 - failed, "seeds": [1, 2, 3], "master_seed": 0, "code_version": "x"}
    (tmp_path / f"{name}.summary.json").write_text(json.dumps(doc))


def test_report_empty_is_missing_data(tmp_path):
    with pytest.raises(harness.MissingData):
        harness.report([tmp_path])


def test_synthetic_report(tmp_path):
    _summary(tmp_path, "estimation-error", {"median_abs_err_db": 0.42, "frac_within_2p5db": 0.97,
                                            "mean_abs_err_db": 0.6})
    _summary(tmp_path, "power-overhead", {"mean_overhead": 0.05, "p99_overhead": 0.07, "median_overhead": 0.01})
    text = harness.report([tmp_path], out=tmp_path / "report.txt")
    assert "median_abs_err_db = 0.42" in text
    lines = {ln.split()[0]: ln for ln in text.splitlines() if ln.startswith("AC-")}
    assert lines["AC-1"].split()[1] == "PASS"
    assert lines["AC-8"].split()[1] == "FAIL"
    assert lines["AC-2"].split()[1] == "n/a"
    assert (tmp_path / "report.txt").read_text() == text


def test_report_threshold_edges(tmp_path):
    _summary(tmp_path, "estimation-error", {"median_abs_err_db": 1.0, "frac_within_2p5db": 0.9499})
    (row,) = [r for r in harness.evaluate_criteria(harness.load_summaries(tmp_path)) if r[0] == "AC-1"]
    assert row[2] == "FAIL"


def test_report_hash_mismatch(tmp_path):
    _summary(tmp_path, "estimation-error", {"median_abs_err_db": 0.4, "frac_within_2p5db": 1.0}, h="a")
    _summary(tmp_path, "to-sweep", {"median_spread_db": 0.1}, h="b")
    with pytest.raises(harness.ConfigMismatch):
        harness.report([tmp_path])


def test_report_on_real_run(run_dir):
    text = harness.report([run_dir])
    assert any(ln.startswith("AC-1 ") and ("PASS" in ln or "FAIL" in ln) for ln in text.splitlines())


# ---------------------------------------------------------------- CLI


def _sets():
    return [a for k, v in SMALL.items() for a in ("--set", f"{k}={json.dumps(v)}")]


def test_cli_gen_estimate_schedule(tmp_path, capsys):
    assert cli.main(["gen", "--seed", "2", "--out", str(tmp_path)] + _sets()) == 0
    topo = json.loads((tmp_path / "topology.json").read_text())
    assert len(topo["nodes"]) == 3 and len(topo["links"]) == 4
    assert sum(1 for _ in open(tmp_path / "gains.csv")) == 1 + 16
    assert cli.main(["estimate", "--seed", "2", "--out", str(tmp_path)] + _sets()) == 0
    assert sum(1 for _ in open(tmp_path / "estimate.csv")) == 1 + 16
    assert cli.main(["schedule", "--seed", "2", "--out", str(tmp_path)] + _sets()) == 0
    gap = json.loads((tmp_path / "gap.json").read_text())
    assert gap["f3"] >= gap["f2"] * (1 - 1e-9)
    header = open(tmp_path / "schedule_joint.csv").readline().strip()
    assert header == "block,link,active,power_mw"


def test_cli_experiment_and_report(tmp_path, capsys):
    assert cli.main(["experiment", "--name", "estimation-error", "--trials", "1", "--out", str(tmp_path)]
                    + _sets()) == 0
    assert cli.main(["report", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "acceptance" in out and "AC-1" in out


def test_cli_error_codes(tmp_path, capsys):
    assert cli.main(["gen", "--set", "network.num_nodes=0", "--out", str(tmp_path)]) == 2
    assert cli.main(["gen", "--set", "oops", "--out", str(tmp_path)]) == 2
    assert cli.main(["report", str(tmp_path / "nothing")]) == 3
