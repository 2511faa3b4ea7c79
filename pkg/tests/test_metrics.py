import math

import pytest

from der.errors import MetricsFormatError
from der.metrics import (
    METRICS_COLUMNS,
    MemorySink,
    MetricsRow,
    MetricsWriter,
    SummaryPoint,
    band_overlap_fraction,
    eval_curve,
    read_metrics,
    read_summary,
    summarize,
    write_summary,
)

ROWS = [
    MetricsRow(t_step=8, L_tot=0.5, L_ind=1.25, mean_abs_delta=0.1, eta=0.8, epsilon=0.9, selected_count=13),
    MetricsRow(t_step=9, L_tot=0.25, epsilon=0.89),
    MetricsRow(t_step=10, eval_return=7.5),
]


def test_writer_and_reader_agree(tmp_path):
    path = tmp_path / "run" / "metrics.csv"
    with MetricsWriter(path) as writer:
        for row in ROWS:
            writer.append(row)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert lines[2] == "9,0.25,,,,0.89000000000000001,,"
    assert read_metrics(path) == ROWS


def test_writer_refuses_bad_rows(tmp_path):
    with MetricsWriter(tmp_path / "m.csv") as writer:
        writer.append(MetricsRow(t_step=5))
        with pytest.raises(ValueError, match="does not follow"):
            writer.append(MetricsRow(t_step=5))
        with pytest.raises(ValueError, match="not finite"):
            writer.append(MetricsRow(t_step=6, L_tot=math.nan))
        assert writer.rows_written == 1


def test_memory_sink_keeps_ordering():
    sink = MemorySink()
    sink.append(MetricsRow(t_step=1))
    with pytest.raises(ValueError):
        sink.append(MetricsRow(t_step=1))


def _write(path, text):
    path.write_text(",".join(METRICS_COLUMNS) + "\n" + text, encoding="utf-8")
    return path


def test_malformed_cell_reports_line(tmp_path):
    path = _write(tmp_path / "m.csv", "1,0.5,,,,,,\n2,oops,,,,,,\n")
    with pytest.raises(MetricsFormatError) as info:
        read_metrics(path)
    assert info.value.line == 3
    assert str(info.value).startswith(f"{path}:3:")


@pytest.mark.parametrize(
    "body, line",
    [
        ("1,0.5,,,,,\n", 2),
        ("3,,,,,,,\n2,,,,,,,\n", 3),
        (",1,,,,,,\n", 2),
        ("1,inf,,,,,,\n", 2),
    ],
)
def test_structural_errors_report_line(tmp_path, body, line):
    with pytest.raises(MetricsFormatError) as info:
        read_metrics(_write(tmp_path / "m.csv", body))
    assert info.value.line == line


def test_bad_header_and_missing_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("step,loss\n1,2\n", encoding="utf-8")
    with pytest.raises(MetricsFormatError, match=":1:"):
        read_metrics(path)
    with pytest.raises(MetricsFormatError):
        read_metrics(tmp_path / "absent.csv")


def _runs(*curves):
    return [[MetricsRow(t_step=10 * (k + 1), eval_return=r) for k, r in enumerate(c)] for c in curves]


def test_summarize_percentiles_across_seeds():
    points = summarize({"der": _runs([1.0, 4.0], [2.0, 5.0], [3.0, 6.0], [4.0])}, eval_interval=10)
    assert [(p.eval_index, p.t_step, p.n_seeds) for p in points] == [(0, 10, 4)]
    (point,) = points
    assert point.mean == pytest.approx(2.5)
    assert point.p25 == pytest.approx(1.75)
    assert point.p75 == pytest.approx(3.25)


def _evals(*steps_and_returns):
    return [MetricsRow(t_step=step, eval_return=ret) for step, ret in steps_and_returns]


def test_summary_steps_follow_eval_checkpoints_not_ordinals():
    # 50-step episodes with a 20-step interval: evaluations fire at 50, 100, 150
    rows = _evals((50, 1.0), (100, 2.0), (150, 3.0))
    points = summarize({"der": [rows]}, eval_interval=20)
    assert [p.t_step for p in points] == [40, 100, 140]
    assert [p.mean_eval_step for p in points] == [50.0, 100.0, 150.0]


def test_summary_aligns_seeds_with_uneven_episode_lengths():
    a = _evals((100, 1.0), (150, 2.0), (250, 3.0), (300, 4.0))
    b = _evals((90, 3.0), (160, 4.0), (230, 5.0), (290, 6.0))
    c = _evals((75, 5.0), (230, 6.0))
    points = summarize({"der": [a, b], "short": [a, c]}, eval_interval=70)
    der = [p for p in points if p.mode == "der"]
    assert [p.t_step for p in der] == [70, 140, 210, 280]
    assert [p.mean_eval_step for p in der] == [95.0, 155.0, 240.0, 295.0]
    assert [p.mean for p in der] == [2.0, 3.0, 4.0, 5.0]
    short = [p for p in points if p.mode == "short"]
    assert [(p.eval_index, p.t_step) for p in short] == [(0, 70), (1, 210)]


def test_summary_file_round_trip_and_determinism(tmp_path):
    points = summarize({"der": _runs([1.0, 2.0], [3.0, 4.0]), "joint-baseline": _runs([0.5, 0.5])}, 10)
    a = write_summary(points, tmp_path / "a.csv")
    b = write_summary(points, tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    assert read_summary(a) == points


def test_band_overlap_fraction():
    points = [
        SummaryPoint("a", 0, 10, 12.0, 5, 1.0, 0.0, 2.0),
        SummaryPoint("b", 0, 10, 11.0, 5, 1.5, 1.0, 3.0),
        SummaryPoint("a", 1, 20, 22.0, 5, 1.0, 0.0, 1.0),
        SummaryPoint("b", 1, 20, 20.0, 5, 5.0, 4.0, 6.0),
    ]
    assert band_overlap_fraction(points, "a", "b") == 0.5
    with pytest.raises(ValueError):
        band_overlap_fraction(points, "a", "c")


def test_eval_curve_skips_rows_without_evaluation():
    assert eval_curve(ROWS) == [(10, 7.5)]
