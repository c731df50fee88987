import yaml

from vcotta.cli import main
from vcotta.verify import small_spec

SMALL = [f"--set={k}={v}" for k, v in {
    "dataset.dim": 8, "dataset.hidden": "16", "dataset.classes": 4, "dataset.train_per_class": 60,
    "dataset.test_per_class": 30, "pretrain.epochs": 10, "warmup.epochs": 2, "adapt.n_augment": 4,
    "schedule_params.batch_size": 40, "schedule_params.kinds": "gauss_noise,brightness_shift,contrast_scale",
}.items()]


def test_small_flags_match_small_spec(tmp_path):
    from vcotta.harness import load_spec, parse_overrides

    spec = load_spec(overrides=[s.split("=", 1)[1] for s in SMALL])
    assert spec.to_dict() == small_spec().to_dict()
    assert parse_overrides(["a.b=1"]) == {"a": {"b": 1}}


def test_pretrain_warmup_adapt_plot(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VCOTTA_OUTPUT_ROOT", str(tmp_path))
    assert main(["pretrain", *SMALL, "--set=name=p"]) == 0
    det = tmp_path / "p" / "deterministic.ckpt"
    assert det.exists() and (tmp_path / "p" / "deterministic.ckpt.json").exists()

    assert main(["warmup", *SMALL, "--set=name=w", "--from", str(det)]) == 0
    src = tmp_path / "w" / "source.ckpt"
    assert src.exists()

    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"name": "a", "source_checkpoint": str(src)}))
    assert main(["adapt", "--config", str(cfg), *SMALL]) == 0
    assert "mean error" in capsys.readouterr().out
    run = tmp_path / "a"
    assert {"batches.csv", "segments.csv", "config.yaml", "student.ckpt"} <= {p.name for p in run.iterdir()}

    out = tmp_path / "seg.svg"
    assert main(["plot", "--kind", "per_segment_error", "--out", str(out), str(run)]) == 0
    assert out.read_bytes().startswith(b"<?xml")


def test_sweep_command(tmp_path, capsys):
    code = main(["sweep", *SMALL, f"--set=output_dir={tmp_path}", "--axis", "mixture_weights"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("axis,value") and len(lines) == 5
    assert (tmp_path / "sweep_mixture_weights.csv").exists()


def test_config_errors_exit_nonzero(capsys):
    assert main(["adapt", "--set", "adapt.bogus=1"]) == 2
    assert "adapt.bogus" in capsys.readouterr().err


def test_missing_checkpoint_exits_nonzero(tmp_path, capsys):
    assert main(["warmup", *SMALL, "--from", str(tmp_path / "none.ckpt")]) == 3


def test_verify_selected_criteria(capsys):
    assert main(["verify", "--criteria", "2,5,6"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(line.startswith("[PASS]") for line in out)
