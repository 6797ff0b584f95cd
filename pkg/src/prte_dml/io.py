"""CSV ingestion of observed samples and CSV/JSON emission of results."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Union

import numpy as np

from .estimator import EstimateResult
from .montecarlo import MCReport
from .nuisance import Dataset

__all__ = [
    "IngestionError",
    "MissingColumns",
    "MalformedRow",
    "NonBinaryTreatment",
    "ReportWriteError",
    "ingest_csv",
    "write_dataset_csv",
    "emit_report",
    "render_report",
    "TABLE_COLUMNS",
]

TABLE_COLUMNS = ("n", "L", "true", "mean", "bias", "rmse", "coverage")
_NUMBERED = re.compile(r"^([xz])([1-9][0-9]*)$")


class IngestionError(ValueError):
    """Base class of CSV ingestion problems; ``line`` is 1-based (header is line 1)."""

    def __init__(self, message: str, path, line: int):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class MissingColumns(IngestionError):
    """Header lacks ``y``, ``s``, an ``x`` or a ``z`` column, or numbering has gaps."""


class MalformedRow(IngestionError):
    """Wrong field count or a non-numeric / non-finite value."""


class NonBinaryTreatment(IngestionError):
    """Treatment column holds something other than 0 or 1."""


class ReportWriteError(OSError):
    """Report could not be written; the message names the path."""


def _numbered_columns(header: list[str], prefix: str, path) -> list[int]:
    found = {}
    for pos, name in enumerate(header):
        m = _NUMBERED.match(name)
        if m and m.group(1) == prefix:
            found[int(m.group(2))] = pos
    if not found:
        raise MissingColumns(f"no {prefix}1.. column in header", path, 1)
    expected = list(range(1, len(found) + 1))
    if sorted(found) != expected:
        raise MissingColumns(f"{prefix} columns must be numbered 1..{len(found)} without gaps",
                             path, 1)
    return [found[k] for k in expected]


def ingest_csv(path: Union[str, Path], mu0=None, mu1=None) -> Dataset:
    """Read a sample with header ``y, s, x1..xK, z1..zM`` (any column order).

    Feature maps default to the identity on ``(x1..xK)``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumns("file is empty", path, 1) from None
        for name in ("y", "s"):
            if name not in header:
                raise MissingColumns(f"missing column {name!r}", path, 1)
        iy, i_s = header.index("y"), header.index("s")
        ix = _numbered_columns(header, "x", path)
        iz = _numbered_columns(header, "z", path)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(f"expected {len(header)} fields, found {len(row)}", path, line)
            try:
                values = [float(f) for f in row]
            except ValueError as exc:
                raise MalformedRow(f"non-numeric field ({exc})", path, line) from None
            if not all(math.isfinite(v) for v in values):
                raise MalformedRow("non-finite field", path, line)
            if values[i_s] not in (0.0, 1.0):
                raise NonBinaryTreatment(f"s = {row[i_s].strip()} is not 0 or 1", path, line)
            rows.append(values)
    if not rows:
        raise MalformedRow("no data rows", path, 2)
    arr = np.array(rows)
    maps = {k: v for k, v in (("mu0", mu0), ("mu1", mu1)) if v is not None}
    return Dataset(y=arr[:, iy], s=arr[:, i_s], x=arr[:, ix], z=arr[:, iz], **maps)


def write_dataset_csv(data: Dataset, path: Union[str, Path]) -> None:
    """Write ``data`` in the layout read by :func:`ingest_csv`.

    Floats are written with ``repr`` so re-reading is bit-exact.
    """
    k, m = data.x.shape[1], data.z.shape[1]
    header = ["y", "s"] + [f"x{j + 1}" for j in range(k)] + [f"z{j + 1}" for j in range(m)]
    table = np.column_stack([data.y, data.s, data.x, data.z])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def _report_fields(report) -> tuple[list[str], list]:
    if isinstance(report, MCReport):
        return list(TABLE_COLUMNS), [report.n, report.L, report.true_prte, report.mean,
                                     report.bias, report.rmse, report.coverage]
    if isinstance(report, EstimateResult):
        names = ["prte_hat", "se", "ci_lo", "ci_hi", "theta3", "n", "L"]
        return names, [report.prte_hat, report.se, report.ci_lo, report.ci_hi,
                       report.theta.theta3, report.n, report.L]
    raise TypeError(f"cannot emit {type(report).__name__}")


def render_report(report, fmt: str = "json") -> str:
    """Text of a report in ``"json"`` or one-row ``"csv"`` form."""
    if fmt == "json":
        if not isinstance(report, (MCReport, EstimateResult)):
            raise TypeError(f"cannot emit {type(report).__name__}")
        return json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n"
    if fmt == "csv":
        names, values = _report_fields(report)
        cells = [repr(float(v)) if isinstance(v, float) else str(v) for v in values]
        return ",".join(names) + "\n" + ",".join(cells) + "\n"
    raise ValueError(f"unknown format {fmt!r}; use 'csv' or 'json'")


def emit_report(report, fmt: str, path: Union[str, Path]) -> None:
    """Write an :class:`MCReport` or :class:`EstimateResult` to ``path``."""
    text = render_report(report, fmt)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ReportWriteError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
