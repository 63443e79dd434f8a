from __future__ import annotations

import csv
import io
import json
from typing import Any, Sequence

from dual_positioning.errors import ValidationError
from dual_positioning.models import BenchReport, EpochSolution, SweepResult, dataclass_to_dict


FORMATS = ("csv", "wide", "json")
SWEEP_COLUMNS = ["sigma_m", "method", "rmse_m", "crlb_lb_m", "fail_count", "median_us"]
AXES = ("x", "y", "z")
TEXT_COLUMNS = {"epoch_id", "method", "status"}


def fmt(value: float) -> str:
    """Nine significant digits."""
    return f"{float(value):.9g}"


def _table(header: list[str], rows: list[list[str]], comments: Sequence[str] = ()) -> bytes:
    buffer = io.StringIO()
    for line in comments:
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")


def _sweep_long(result: SweepResult) -> bytes:
    rows = [
        [fmt(step.sigma_m), m.method, fmt(m.rmse_m), fmt(step.error_lb_m), str(m.failures), fmt(m.median_us)]
        for step in result.steps
        for m in step.methods
    ]
    return _table(SWEEP_COLUMNS, rows, [f"preset={result.preset} seed={result.master_seed} crlb={result.crlb_mode}"])


def _sweep_wide(result: SweepResult) -> bytes:
    names = result.method_names
    header = ["sigma_m", "crlb_lb_m"]
    for name in names:
        header += [f"{name}_rmse_m", f"{name}_fail_count", f"{name}_median_us"]
    rows = []
    for step in result.steps:
        row = [fmt(step.sigma_m), fmt(step.error_lb_m)]
        for name in names:
            stats = step.stats(name)
            row += [fmt(stats.rmse_m), str(stats.failures), fmt(stats.median_us)]
        rows.append(row)
    return _table(header, rows, [f"preset={result.preset} seed={result.master_seed} crlb={result.crlb_mode}"])


def _epochs(solutions: Sequence[EpochSolution]) -> bytes:
    dim = max((s.position.dim for s in solutions if s.position is not None), default=2)
    header = ["epoch_id", "method", *AXES[:dim], "score", "status"]
    rows = []
    for sol in solutions:
        coords = [fmt(c) for c in sol.position.coords] if sol.position is not None else [""] * dim
        rows.append([sol.epoch_id, sol.method, *coords, fmt(sol.score), sol.status])
    return _table(header, rows)


def _bench(report: BenchReport) -> bytes:
    rows = [[s.method, str(s.calls), fmt(s.median_us), fmt(s.iqr_us), str(s.failures)] for s in report.stats]
    return _table(
        ["method", "calls", "median_us", "iqr_us", "failures"],
        rows,
        [f"preset={report.preset} sigma_m={fmt(report.sigma_m)} ratio={fmt(report.ratio)}"],
    )


def emit_results(results: Any, format: str = "csv") -> bytes:
    """Render results as a delimited table or JSON.

    Input:
        results: `SweepResult`, `BenchReport`, or a list of `EpochSolution`
            (any dataclass for `json`).
        format: `csv` (long sweep table), `wide` (one sweep row per sigma) or `json`.

    Output:
        UTF-8 bytes. Numbers in tables carry nine significant digits.
    """
    if format not in FORMATS:
        raise ValidationError(f"format must be one of {', '.join(FORMATS)}", code="INVALID_VALUE")
    if format == "json":
        return (json.dumps(dataclass_to_dict(results), indent=2) + "\n").encode("utf-8")
    if isinstance(results, SweepResult):
        return _sweep_wide(results) if format == "wide" else _sweep_long(results)
    if isinstance(results, BenchReport):
        return _bench(results)
    if isinstance(results, (list, tuple)) and all(isinstance(r, EpochSolution) for r in results):
        return _epochs(results)
    raise ValidationError(f"cannot render {type(results).__name__} as {format}", code="INVALID_VALUE")


def _coerce(value: str) -> str | float:
    try:
        return float(value)
    except ValueError:
        return value


def read_results_table(data: bytes | str) -> list[dict[str, str | float]]:
    """Parse a table written by `emit_results`; numeric cells come back as floats."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    return [{key: value if key in TEXT_COLUMNS else _coerce(value) for key, value in row.items()} for row in csv.DictReader(lines)]
