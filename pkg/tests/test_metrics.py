import pytest

from ministar.adapters.metrics_csv import CsvSink, read_metrics
from ministar.adapters.plots import plot_metrics, sma


def test_sink_writes_header_once(tmp_path):
    path = tmp_path / "m" / "rl.csv"
    sink = CsvSink(path, ["version", "loss", "note"])
    sink.append({"version": 1, "loss": 0.5})
    CsvSink(path, ["version", "loss", "note"]).append({"version": 2, "loss": 0.25, "note": "x"})
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["version,loss,note", "1,0.5,", "2,0.25,x"]
    assert read_metrics(path) == [{"version": 1.0, "loss": 0.5}, {"version": 2.0, "loss": 0.25}]


def test_sink_refuses_mismatched_columns(tmp_path):
    path = tmp_path / "rl.csv"
    sink = CsvSink(path, ["a", "b"])
    with pytest.raises(ValueError):
        sink.append({"c": 1})
    with pytest.raises(ValueError):
        CsvSink(path, ["a"])


def test_sma():
    assert sma([1, 2, 3, 4], 1) == [1, 2, 3, 4]
    assert sma([2.0, 4.0, 6.0, 8.0], 2) == [2.0, 3.0, 5.0, 7.0]
    assert sma([], 5) == []


def test_plot_metrics_writes_png(tmp_path):
    path = tmp_path / "rl.csv"
    sink = CsvSink(path, ["version", "total", "win_rate"])
    for v in range(1, 25):
        sink.append({"version": v, "total": 1.0 / v, "win_rate": None if v % 3 else v / 30})
    png = plot_metrics(path, tmp_path / "out" / "rl.png", x="version")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_plot_with_too_few_rows(tmp_path):
    path = tmp_path / "sl.csv"
    CsvSink(path, ["epoch", "loss"]).append({"epoch": 1, "loss": 2.0})
    png = plot_metrics(path, tmp_path / "sl.png")
    assert png.exists() and png.stat().st_size > 0
