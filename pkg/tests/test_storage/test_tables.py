"""
Tests the CSV writers.
"""

import numpy as np

from finematch.core.models import RetrievalReport
from finematch.storage.tables import (
    LOSS_COLUMNS,
    append_row,
    format_float,
    format_report,
    read_matrix,
    write_matrix,
    write_report,
)


def test_format_float():
    assert format_float(0.1) == "0.1"
    assert format_float(1.0 / 3.0) == "0.333333333"
    assert format_float(2.0) == "2"


def test_append_row_writes_header_once(tmp_path):
    path = tmp_path / "loss.csv"

    append_row(path, LOSS_COLUMNS, [1, 0.001] + [0.5] * 7)
    append_row(path, LOSS_COLUMNS, [2, 0.0005] + [0.25] * 7)

    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LOSS_COLUMNS)
    assert lines[1].startswith("1,0.001,0.5")
    assert lines[2].startswith("2,0.0005,0.25")
    assert len(lines) == 3


def test_matrix_round_trip(tmp_path):
    matrix = np.array([[0.5, -1.25], [3.0, 0.0625], [1e-3, 7.0]])

    write_matrix(matrix, tmp_path / "sim.csv")

    assert np.array_equal(read_matrix(tmp_path / "sim.csv"), matrix)
    assert (tmp_path / "sim.csv").read_text().splitlines()[0] == "0.5,-1.25"


def test_report(tmp_path):
    report = RetrievalReport(i2t={1: 0.5, 5: 1.0}, t2i={1: 0.25, 5: 0.75})

    write_report(report, tmp_path / "report.csv")

    assert (tmp_path / "report.csv").read_text().splitlines() == [
        "direction,k,recall",
        "i2t,1,0.5",
        "i2t,5,1",
        "t2i,1,0.25",
        "t2i,5,0.75",
    ]

    text = format_report(report)
    assert "R@1" in text and "R@5" in text
    assert "50.00" in text and "75.00" in text
