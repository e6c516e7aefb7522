"""
CSV outputs: loss logs, similarity matrices, retrieval reports, sweeps.
Floats are written with nine significant digits.
"""

import csv
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from finematch.core.models import RetrievalReport

LOSS_COLUMNS = (
    "epoch",
    "lr",
    "L_total",
    "L_I2T_E",
    "L_I2T_R",
    "L_I2T_G",
    "L_T2I_E",
    "L_T2I_R",
    "L_T2I_G",
)

SWEEP_COLUMNS = ("alpha1", "alpha2", "beta1", "i2t_r1", "t2i_r1")


def format_float(value: float) -> str:
    return f"{value:.9g}"


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    return str(value)


def write_rows(
    path: Path, columns: Sequence[str] | None, rows: Iterable[Sequence]
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if columns is not None:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def append_row(path: Path, columns: Sequence[str], row: Sequence) -> None:
    """
    Append one row, writing the header first if the file is new.
    """
    new = not path.exists()

    with open(path, "a", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new:
            writer.writerow(columns)
        writer.writerow([_cell(v) for v in row])


def write_matrix(matrix: np.ndarray, path: Path) -> None:
    """
    Row-major matrix dump without a header.
    """
    write_rows(path, None, np.asarray(matrix, dtype=np.float64).tolist())


def read_matrix(path: Path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as handle:
        return np.array([[float(v) for v in row] for row in csv.reader(handle)])


def report_rows(report: RetrievalReport) -> list[tuple[str, int, float]]:
    rows = [("i2t", k, report.i2t[k]) for k in sorted(report.i2t)]
    rows += [("t2i", k, report.t2i[k]) for k in sorted(report.t2i)]
    return rows


def write_report(report: RetrievalReport, path: Path) -> None:
    write_rows(path, ("direction", "k", "recall"), report_rows(report))


def format_report(report: RetrievalReport) -> str:
    """
    Human-readable table of a retrieval report.
    """
    ks = sorted(set(report.i2t) | set(report.t2i))
    header = "direction " + " ".join(f"{'R@' + str(k):>8}" for k in ks)
    lines = [header, "-" * len(header)]

    for name, values in (("I2T", report.i2t), ("T2I", report.t2i)):
        lines.append(
            f"{name:<9} " + " ".join(f"{100.0 * values[k]:>8.2f}" for k in ks)
        )

    return "\n".join(lines)
