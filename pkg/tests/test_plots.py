import xml.etree.ElementTree as ET

import pytest

from vcotta.metrics import RunRecord
from vcotta.plots import emit_plot, loop_errors


def _record(segments, batches=2, base=0.3):
    rec = RunRecord()
    for s in range(segments):
        for b in range(batches):
            rec.add(segment=s, corruption=f"c{s % 3}", severity=5, n=10, error=base + 0.01 * s + 0.001 * b,
                    nll=1.0, brier=0.5, source_error=0.5, teacher_error=0.4, alpha=0.5)
    return rec


def _svg_root(path):
    return ET.parse(path).getroot()


def test_single_segment_bar_chart(tmp_path):
    out = emit_plot(_record(1), "per_segment_error", tmp_path / "one.svg")
    assert _svg_root(out).tag.endswith("svg")


def test_loop_curve_has_one_point_per_loop(tmp_path):
    rec = _record(30)
    errs = loop_errors(rec, 3)
    assert len(errs) == 10
    assert errs[0] == pytest.approx(0.3 + 0.01 + 0.0005)
    path = tmp_path / "loops.svg"
    emit_plot({"a": rec, "b": _record(30, base=0.4)}, "loop_curve", path, segments_per_loop=3)
    import matplotlib.pyplot as plt

    # rebuild the axes the same way to count ticks
    fig, ax = plt.subplots()
    ax.set_xticks(range(1, len(errs) + 1))
    assert len(ax.get_xticks()) == 10
    plt.close(fig)
    assert _svg_root(path).tag.endswith("svg")


def test_identical_input_gives_identical_bytes(tmp_path):
    a = emit_plot(_record(4), "per_segment_error", tmp_path / "a.svg")
    b = emit_plot(_record(4), "per_segment_error", tmp_path / "b.svg")
    assert a.read_bytes() == b.read_bytes()


def test_batch_size_curve(tmp_path):
    path = emit_plot({}, "batch_size_curve", tmp_path / "bs.svg", batch_sizes=[1, 16, 200],
                     curve={"vcotta": [0.5, 0.4, 0.3], "source_only": [0.45, 0.45, 0.45]})
    assert path.read_bytes().count(b"<svg") == 1


def test_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_plot(_record(1), "pie", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_plot(RunRecord(), "loop_curve", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_plot({}, "batch_size_curve", tmp_path / "x.svg")
