import numpy as np
import pytest

from vcotta import harness
from vcotta.bnn import forward_mean
from vcotta.checkpoint import save_checkpoint
from vcotta.harness import ConfigError, load_spec, parse_overrides, prepare_source, run_experiment, run_pipeline, sweep
from vcotta.numcore import argmax_rows
from vcotta.verify import small_spec


@pytest.fixture(scope="module")
def prepared():
    return prepare_source(small_spec())


def test_overrides_parse_nested_values():
    assert parse_overrides(["adapt.tau=0.5", "name=x", "dataset.hidden=[8, 8]"]) == {
        "adapt": {"tau": 0.5}, "name": "x", "dataset": {"hidden": [8, 8]}}


def test_unknown_keys_are_rejected_with_their_path(tmp_path):
    with pytest.raises(ConfigError, match="adapt.learnin_rate"):
        load_spec(overrides=["adapt.learnin_rate=0.1"])
    cfg = tmp_path / "c.yaml"
    cfg.write_text("adapt:\n  augment:\n    jiter: 0.2\n")
    with pytest.raises(ConfigError, match="adapt.augment.jiter"):
        load_spec(cfg)


@pytest.mark.parametrize("item", ["method=magic", "schedule=sideways", "adapt.tau=-1", "seed=abc", "novalue"])
def test_invalid_values(item):
    with pytest.raises(ConfigError):
        load_spec(overrides=[item])


def test_yaml_echo_round_trips(tmp_path):
    spec = load_spec(overrides=["adapt.tau=0.3", "dataset.hidden=32,32", "schedule=gradual"])
    p = tmp_path / "echo.yaml"
    p.write_text(harness.dump_spec(spec))
    again = load_spec(p)
    assert again.to_dict() == spec.to_dict()
    assert again.config_hash() == spec.config_hash()
    assert again.dataset.hidden == (32, 32)


def test_source_only_matches_frozen_model(prepared):
    spec = small_spec(method="source_only")
    record, _, state = run_pipeline(spec, prepared)
    assert state is None
    from vcotta.stream import build_schedule

    stream = build_schedule(spec.schedule, prepared.test, spec.schedule_params, harness._rngs(spec.seed)["schedule"])
    errs = [np.mean(argmax_rows(forward_mean(prepared.source, x)) != y) for _, _, x, y in stream.labeled()]
    assert [e["error"] for e in record.entries] == pytest.approx(errs, abs=0)


def test_entropy_baseline_moves_the_model(prepared):
    spec = small_spec(method="entropy_min_baseline")
    spec.adapt.learning_rate = 0.5
    record, _, _ = run_pipeline(spec, prepared)
    src, _, _ = run_pipeline(small_spec(method="source_only"), prepared)
    assert len(record) == len(src)
    assert [e["error"] for e in record.entries] != [e["error"] for e in src.entries]


def test_repeat_runs_are_byte_identical(tmp_path):
    outs = []
    for _ in range(2):
        spec = small_spec()
        spec.output_dir = str(tmp_path / "run")
        run_experiment(spec)
        outs.append({f: (tmp_path / "run" / f).read_bytes()
                     for f in ("batches.csv", "segments.csv", "config.yaml", "source.ckpt", "teacher.ckpt")})
    assert outs[0] == outs[1]
    header = outs[0]["batches.csv"].decode().splitlines()[0]
    assert header.split(",") == list(harness.BATCH_COLUMNS)


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path))
    spec = small_spec(method="source_only")
    spec.name = "envrun"
    run_experiment(spec)
    assert (tmp_path / "envrun" / "segments.csv").exists()


def test_record_csv_round_trip(prepared, tmp_path):
    record, _, _ = run_pipeline(small_spec(), prepared)
    p = tmp_path / "b.csv"
    p.write_text(harness.record_csv(record))
    assert harness.record_csv(harness.read_record_csv(p)) == harness.record_csv(record)


def test_loads_source_from_checkpoint(prepared, tmp_path):
    path = tmp_path / "src.ckpt"
    save_checkpoint(prepared.source, path)
    spec = small_spec()
    spec.source_checkpoint = str(path)
    a, _, _ = run_pipeline(spec, None)
    b, _, _ = run_pipeline(small_spec(), prepared)
    assert harness.record_csv(a) == harness.record_csv(b)


def test_mixture_sweep_has_four_rows(tmp_path):
    spec = small_spec()
    spec.output_dir = str(tmp_path)
    rows = sweep(spec, "mixture_weights")
    assert [r["value"] for r in rows] == ["1", "0.5", "0", "adaptive"]
    assert all(r["status"] == "ok" for r in rows)
    assert (tmp_path / "sweep_mixture_weights.csv").read_text().count("\n") == 5
    assert (tmp_path / "mixture_weights_adaptive" / "batches.csv").exists()


def test_single_value_sweep_equals_one_run():
    spec = small_spec()
    rows = sweep(spec, "epsilon_margin", [spec.adapt.epsilon_margin], write=False)
    record = run_experiment(small_spec(), write=False)
    assert rows[0]["error"] == record.segment_mean("error")


def test_order_sweep_adds_mean_and_std():
    rows = sweep(small_spec(), "order_seed", ["1", "2", "3"], write=False)
    assert [r["value"] for r in rows] == ["1", "2", "3", "mean", "std"]
    errs = [r["error"] for r in rows[:3]]
    assert rows[3]["error"] == pytest.approx(np.mean(errs))
    assert rows[4]["error"] == pytest.approx(np.std(errs))


def test_sweep_records_failures_and_continues():
    rows = sweep(small_spec(), "n_augment", ["0", "2"], write=False)
    assert rows[0]["status"].startswith("failed") and np.isnan(rows[0]["error"])
    assert rows[1]["status"] == "ok"


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ConfigError):
        sweep(small_spec(), "momentum", ["1"], write=False)
    with pytest.raises(ConfigError):
        sweep(small_spec(), "learning_rate", [], write=False)
