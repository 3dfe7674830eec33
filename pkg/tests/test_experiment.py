import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexgrid import experiment as exp
from flexgrid._io import read_csv
from flexgrid.dispatch import DispatchTrace
from flexgrid.experiment import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    ReportError,
    comfort_excursion,
    consolidate,
    emit_reports,
    event_mae,
    run_experiment,
    substream,
)
from flexgrid.fqi import RetrainResult, load_qfunction

SMALL = dict(
    n_houses=2, warmup_days=2, window_days=2, eval_days=2, fqi_iterations=2,
    regressor_params={"n_estimators": 5}, event_starts=["10:00", "15:00"], event_duration_min=10,
)


def trace(achieved, minutes=None, baseline=0.0):
    minutes = minutes or list(range(len(achieved)))
    return DispatchTrace(0, [], len(minutes), minutes=minutes, target=[0.0] * len(minutes),
                         achieved=list(achieved), baseline=baseline)


# -- consolidation ---------------------------------------------------------------


def test_consolidate_three_values():
    c = consolidate([trace([2.0]), trace([4.0]), trace([9.0])])
    assert c.median[0] == 4.0
    assert c.std[0] == pytest.approx(2.944, abs=1e-3)
    assert c.count == 3


def test_consolidate_single_and_duplicated():
    one = consolidate([trace([1.0, 5.0, 3.0])])
    np.testing.assert_array_equal(one.median, [1.0, 5.0, 3.0])
    np.testing.assert_array_equal(one.std, 0.0)
    trs = [trace([1.0, 2.0]), trace([3.0, 7.0]), trace([4.0, 4.0])]
    a, b = consolidate(trs), consolidate(trs * 2)
    np.testing.assert_allclose(a.median, b.median)
    np.testing.assert_allclose(a.std, b.std)


def test_consolidate_relative_removes_baselines():
    c = consolidate([trace([10.0, 12.0], baseline=10.0), trace([20.0, 22.0], baseline=20.0)], relative=True)
    np.testing.assert_array_equal(c.median, [0.0, 2.0])
    np.testing.assert_array_equal(c.std, [0.0, 0.0])


def test_consolidate_rejects_bad_input():
    with pytest.raises(ValueError):
        consolidate([])
    with pytest.raises(ValueError):
        consolidate([trace([1.0, 2.0]), trace([1.0, 2.0], minutes=[1, 2])])


@given(st.lists(st.lists(st.floats(-100, 100), min_size=4, max_size=4), min_size=1, max_size=9))
def test_median_within_range(rows):
    c = consolidate([trace(r) for r in rows])
    arr = np.array(rows)
    assert np.all(c.median >= arr.min(axis=0) - 1e-9)
    assert np.all(c.median <= arr.max(axis=0) + 1e-9)
    assert np.all(c.std >= 0)


# -- comfort excursion -----------------------------------------------------------


def test_comfort_excursion():
    sps = np.full((4, 1), 20.0)
    assert comfort_excursion(np.array([[20.0], [20.9], [21.3], [20.0]]), sps) == pytest.approx(0.3)
    assert comfort_excursion(np.array([[20.0], [19.0], [19.0], [20.0]]), sps) == 0.0


def test_setpoint_step_recovery_is_excluded():
    temps = np.array([[20.0], [20.0], [20.3], [20.6], [21.0]])
    sps = np.array([[20.0], [21.5], [21.5], [21.5], [21.5]])
    # 20.0 vs 21.5 is 0.5 below the band until the house catches up
    assert comfort_excursion(temps, sps) == 0.0
    assert comfort_excursion(temps, sps, exclude_recovery=False) == pytest.approx(0.5)


# -- configuration ---------------------------------------------------------------


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    assert (cfg.n_houses, cfg.warmup_days, cfg.eval_days, cfg.k) == (8, 30, 10, 4)
    assert cfg.event_windows() == [(585, 655), (885, 955)]
    path = tmp_path / "c.yaml"
    path.write_text("seed: 4\neval_days: 1\nevent_starts: ['09:30']\n")
    loaded = ExperimentConfig.from_file(path)
    assert loaded.seed == 4 and loaded.event_windows() == [(555, 625)]
    assert ExperimentConfig.from_dict(loaded.to_dict()) == loaded


@pytest.mark.parametrize(
    "bad",
    [
        {"colour": "red"},
        {"n_houses": 0},
        {"warmup_days": 10},
        {"amplitude_kw": 3.0},
        {"event_starts": ["10:00", "10:30"]},
        {"event_starts": ["23:50"]},
        {"event_direction": "SIDEWAYS"},
        {"quantizer": "floor"},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_substreams_are_named_and_stable():
    assert substream(0, "weather") == substream(0, "weather")
    assert substream(0, "weather") != substream(0, "noise")
    assert substream(0, "weather") != substream(1, "weather")


# -- small end-to-end runs -------------------------------------------------------


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    run_experiment(ExperimentConfig(**SMALL), out)
    return out


def test_artifacts_written(small_run):
    names = {p.name for p in small_run.iterdir()}
    assert {"run.json", "episodes.csv", "train_log.csv", "rank_events.csv", "dispatch_traces.csv",
            "events.csv", "consolidated_response.csv", "summary.txt", "manifest.json",
            "heatmap_1.csv", "heatmap_2.csv", "models"} <= names
    assert len(list((small_run / "models").glob("qfn_*.pkl"))) == 4
    assert len(read_csv(small_run / "events.csv")) == 4
    rows = read_csv(small_run / "episodes.csv")
    warm = [r for r in rows if int(r["day"]) < 2]
    assert len(warm) == 2 * 2 * 96
    # eval-day intervals touching an event window (with margins) are left out
    windows = ExperimentConfig(**SMALL).event_windows()
    evals = [int(r["minute_of_day"]) for r in rows if int(r["day"]) >= 2]
    assert len(evals) == 2 * 2 * (96 - 2 * 3)
    assert not any(lo < m + 15 and m < hi for m in evals for lo, hi in windows)


def test_models_never_see_their_own_day(small_run):
    meta = json.loads((small_run / "run.json").read_text())
    for path in (small_run / "models").glob("qfn_*.pkl"):
        day = exp._day_index(meta, path.stem.split("_", 2)[2])
        assert load_qfunction(path).meta["last_day"] < day


def test_summary_mae_matches_trace_csv(small_run):
    events = {r["event_id"]: r for r in read_csv(small_run / "events.csv")}
    rows = {}
    for r in read_csv(small_run / "dispatch_traces.csv"):
        rows.setdefault(r["event_id"], {})[int(r["minute"])] = (float(r["target_kw"]), float(r["achieved_kw"]))
    lines = (small_run / "summary.txt").read_text().splitlines()
    reported = {ln.split()[0]: float(ln.split()[4]) for ln in lines if ln[:1].isdigit()}
    for eid, per_minute in rows.items():
        dur = int(events[eid]["duration_min"])
        err = [abs(t - a) for m, (t, a) in per_minute.items() if 0 <= m < dur]
        assert reported[eid] == pytest.approx(np.mean(err), rel=1e-5)
    consolidated = read_csv(small_run / "consolidated_response.csv")
    assert int(consolidated[0]["n_events"]) == 4
    assert len(consolidated) == 15 + 10 + 15


def test_reports_rebuild_identically(small_run):
    before = (small_run / "summary.txt").read_bytes()
    emit_reports(small_run)
    assert (small_run / "summary.txt").read_bytes() == before


def test_manifest_is_reproducible(small_run, tmp_path):
    again = run_experiment(ExperimentConfig(**SMALL), tmp_path / "again")
    a = json.loads((small_run / "manifest.json").read_text())
    b = json.loads((again / "manifest.json").read_text())
    assert a == b
    assert any(k.startswith("models/") for k in a["artifacts"])
    assert a["config"]["seed"] == 0 and a["assumptions"]


def test_missing_artifact_is_report_error(tmp_path, small_run):
    run = tmp_path / "copy"
    run.mkdir()
    for name in ("run.json", "events.csv", "episodes.csv"):
        (run / name).write_bytes((small_run / name).read_bytes())
    with pytest.raises(ReportError, match="dispatch_traces.csv"):
        emit_reports(run)


def test_no_eval_days(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "eval_days": 0})
    out = run_experiment(cfg, tmp_path / "none")
    assert not (out / "rank_events.csv").exists()
    assert not (out / "consolidated_response.csv").exists()
    assert "no DR events were run" in (out / "summary.txt").read_text()


def test_training_fault_aborts_with_phase(tmp_path, monkeypatch):
    def broken(buffers, *args, **kwargs):
        return RetrainResult({}, {h: "boom" for h in buffers}, [])

    monkeypatch.setattr(exp, "retrain_all", broken)
    with pytest.raises(ExperimentError) as info:
        run_experiment(ExperimentConfig(**SMALL), tmp_path / "broken")
    assert info.value.phase.startswith("retrain")


def test_event_mae_window_only():
    minutes = [-2, -1, 0, 1, 2, 3]
    target = np.array([9.0, 9.0, 1.0, 1.0, 9.0, 9.0])
    achieved = np.array([0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    assert event_mae(minutes, target, achieved, duration=2) == 1.0
