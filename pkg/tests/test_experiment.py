import json

import numpy as np
import pytest

from reramft import nn
from reramft.faults import FaultModel
from reramft.harness import experiment
from reramft.harness.experiment import CSV_COLUMNS, ExperimentSpec, evaluate_with_faults, sweep

from conftest import MNIST_DIR, REF_MODEL


@pytest.fixture(scope="module")
def small_test(mnist_test):
    return mnist_test.subset(1000)


def test_zero_rate_equals_clean_accuracy(ref_model, small_test):
    for scheme in ("two_column", "offset", "differential"):
        stats = evaluate_with_faults(ref_model, scheme, FaultModel(0, 0), small_test, trials=5)
        assert stats.acc_mean == nn.evaluate_accuracy(ref_model, small_test)
        assert stats.acc_std == 0.0 and stats.mismatch_cell == 0.0


def test_all_stuck_on_two_column_is_chance(ref_model, mnist_test):
    stats = evaluate_with_faults(ref_model, "two_column", FaultModel(0, 1), mnist_test, trials=1)
    assert stats.acc_mean <= 0.2


def test_determinism_and_seed_dependence(ref_model, small_test):
    fm = FaultModel.from_rate(0.02)
    a = evaluate_with_faults(ref_model, "two_column", fm, small_test, trials=100, seed=3)
    b = evaluate_with_faults(ref_model, "two_column", fm, small_test, trials=100, seed=3)
    c = evaluate_with_faults(ref_model, "two_column", fm, small_test, trials=100, seed=4)
    assert a.summary() == b.summary()
    assert a.accuracies != c.accuracies
    assert len(a.accuracies) == 100 and a.acc_mean == pytest.approx(np.mean(a.accuracies))
    assert a.acc_min <= a.acc_mean <= a.acc_max


def test_fixed_device_reuses_mask(ref_model, small_test):
    stats = evaluate_with_faults(ref_model, "offset", FaultModel.from_rate(0.02), small_test, trials=4,
                                 fixed_device=True)
    assert len(set(stats.accuracies)) == 1


def test_jobs_do_not_change_results(ref_model, small_test):
    fm = FaultModel.from_rate(0.05)
    a = evaluate_with_faults(ref_model, "differential", fm, small_test, trials=6, seed=1, jobs=1)
    b = evaluate_with_faults(ref_model, "differential", fm, small_test, trials=6, seed=1, jobs=2)
    assert a.summary() == b.summary()


def test_faults_lower_accuracy(ref_model, mnist_test):
    clean = evaluate_with_faults(ref_model, "two_column", FaultModel(0, 0), mnist_test, trials=1)
    faulty = evaluate_with_faults(ref_model, "two_column", FaultModel.from_rate(0.01), mnist_test, trials=100)
    assert clean.acc_mean >= faulty.acc_mean


def spec_for(tmp_path, **kw):
    base = dict(model_path=str(REF_MODEL), dataset=str(MNIST_DIR), schemes=["differential"], ratios=[0.0],
                trials=3, seed=7, out=str(tmp_path / "r.csv"), eval_subset=500)
    base.update(kw)
    rates = base.pop("rates", [0.01])
    return ExperimentSpec.from_rates(rates, **base)


def test_single_point_sweep_matches_direct(tmp_path, ref_model, mnist_test):
    report = sweep(spec_for(tmp_path))
    assert len(report.points) == 1
    p = report.points[0]
    direct = evaluate_with_faults(ref_model, "differential", FaultModel.from_rate(0.01), mnist_test.subset(500),
                                  trials=3, seed=7)
    assert p["status"] == "ok" and p["accuracies"] == direct.accuracies
    assert p["acc_mean"] == direct.acc_mean and p["mismatch_weight"] == direct.mismatch_weight
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == ",".join(CSV_COLUMNS) and len(text) == 2
    js = json.loads((tmp_path / "r.json").read_text())
    assert js["config"]["seed"] == 7 and js["provenance"]["biases_faulted"] is False


def test_grid_size_and_pruned_points(tmp_path):
    report = sweep(spec_for(tmp_path, schemes=["two_column", "offset"], rates=[0.0, 0.02], ratios=[0.0, 0.5]))
    assert len(report.points) == 8
    pruned = [p for p in report.points if p["prune_ratio"] == 0.5]
    assert all(p["measured_prune_ratio"] == pytest.approx(0.5, abs=1e-5) for p in pruned)
    for p in report.points:
        assert p["expectation_E_prime"] == pytest.approx(p["p_off"] * (1 - p["measured_prune_ratio"]) + p["p_on"])


def test_resume_recomputes_nothing(tmp_path, monkeypatch):
    spec = spec_for(tmp_path, rates=[0.01, 0.02], ratios=[0.0, 0.3])
    first = sweep(spec)
    calls = []
    real = experiment.evaluate_with_faults
    monkeypatch.setattr(experiment, "evaluate_with_faults", lambda *a, **k: calls.append(1) or real(*a, **k))
    again = sweep(spec)
    assert calls == [] and again.csv_text() == first.csv_text()
    # simulate an interruption after three of four points
    progress = tmp_path / "r.csv.progress.jsonl"
    lines = progress.read_text().splitlines()
    progress.write_text("\n".join(lines[:-1]) + "\n")
    resumed = sweep(spec)
    assert len(calls) == 1 and resumed.csv_text() == first.csv_text()


def test_resume_rejects_other_config(tmp_path):
    sweep(spec_for(tmp_path))
    with pytest.raises(ValueError, match="different sweep"):
        sweep(spec_for(tmp_path, seed=8))


def test_failed_point_recorded_and_sweep_continues(tmp_path, monkeypatch):
    real = experiment.evaluate_with_faults

    def flaky(model, scheme, *a, **k):
        if scheme == "offset":
            raise RuntimeError("simulated failure")
        return real(model, scheme, *a, **k)

    monkeypatch.setattr(experiment, "evaluate_with_faults", flaky)
    report = sweep(spec_for(tmp_path, schemes=["offset", "differential"]))
    assert [p["status"] for p in report.points] == ["error", "ok"]
    assert "simulated failure" in report.points[0]["error"]
    row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "offset" and row[CSV_COLUMNS.index("acc_mean")] == ""


def test_jobs_give_identical_csv(tmp_path):
    a = sweep(spec_for(tmp_path / "a", rates=[0.01, 0.05], trials=4), jobs=1)
    b = sweep(spec_for(tmp_path / "b", rates=[0.01, 0.05], trials=4), jobs=2)
    assert a.csv_text() == b.csv_text()


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        spec_for(tmp_path, ratios=[])
    with pytest.raises(ValueError):
        spec_for(tmp_path, trials=0)
    with pytest.raises(ValueError):
        spec_for(tmp_path, schemes=["quad"])
