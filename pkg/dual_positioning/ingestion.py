from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, TextIO

from dual_positioning.errors import ConfigError, EpochFormatError, Location, ScenarioError, ValidationError
from dual_positioning.models import (
    Anchor,
    Box,
    EpochMeasurements,
    EpochRecord,
    EpochRow,
    LoadedEpoch,
    NoiseModel,
    Position,
    Scenario,
    ScenarioConfig,
    SolverOptions,
)


logger = logging.getLogger(__name__)

DEFAULT_SIGMA_M = 1.0
EPOCH_COLUMNS = {7: 2, 8: 3}
EPOCH_HEADER_2D = "epoch_id,system,anchor_id,x,y,pseudorange_m,sigma_m"
EPOCH_HEADER_3D = "epoch_id,system,anchor_id,x,y,z,pseudorange_m,sigma_m"


# ---------------------------------------------------------------------------
# scenario config (JSON)


def _line_of(text: str, key: str, occurrence: int = 0) -> int | None:
    """1-based line of the n-th `"key"` in `text`, if present."""
    needle = f'"{key}"'
    pos = -1
    for _ in range(occurrence + 1):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


class _ConfigReader:
    def __init__(self, text: str, source: str) -> None:
        self.text = text
        self.source = source

    def fail(self, message: str, code: str, field: str, key: str | None = None, occurrence: int = 0) -> ConfigError:
        line = _line_of(self.text, key, occurrence) if key else None
        return ConfigError(message, code=code, location=Location(self.source, line, field))

    def require(self, obj: dict, key: str, field: str) -> Any:
        if key not in obj:
            raise self.fail(f"missing required field '{key}'", "MISSING_FIELD", field)
        return obj[key]

    def number(self, value: Any, field: str, key: str, occurrence: int = 0) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise self.fail(f"expected a finite number, got {value!r}", "INVALID_VALUE", field, key, occurrence)
        return float(value)

    def vector(self, value: Any, dim: int, field: str, key: str, occurrence: int = 0) -> tuple[float, ...]:
        if not isinstance(value, list):
            raise self.fail("expected a list of coordinates", "INVALID_VALUE", field, key, occurrence)
        if len(value) != dim:
            raise self.fail(
                f"expected {dim} coordinates, got {len(value)}", "DIM_MISMATCH", field, key, occurrence
            )
        return tuple(self.number(v, field, key, occurrence) for v in value)


def parse_scenario(
    text: str,
    *,
    source: str = "<string>",
    defaults: SolverOptions | None = None,
) -> ScenarioConfig:
    """Parse a JSON scenario description.

    Input:
        text: JSON with `dim`, `anchors`, optional `sigma_defaults`, `solver`
            and `ud_region` blocks.
        source: Name used in diagnostics.
        defaults: Solver options the file's `solver` block overrides.

    Output:
        `ScenarioConfig` with a validated `Scenario`, `NoiseModel` and options.

    Raises:
        ConfigError / ScenarioError with a diagnostic code and a
        source/line/field location.
    """
    reader = _ConfigReader(text, source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, code="SYNTAX", location=Location(source, exc.lineno, "")) from exc
    if not isinstance(doc, dict):
        raise reader.fail("top level must be a JSON object", "SYNTAX", "")

    dim_value = reader.require(doc, "dim", "dim")
    if isinstance(dim_value, bool) or dim_value not in (2, 3):
        raise reader.fail(f"dim must be 2 or 3, got {dim_value!r}", "INVALID_VALUE", "dim", "dim")
    dim = int(dim_value)

    sigma_defaults = doc.get("sigma_defaults", {}) or {}
    if not isinstance(sigma_defaults, dict):
        raise reader.fail("sigma_defaults must be an object", "INVALID_VALUE", "sigma_defaults", "sigma_defaults")
    default_sigma = {
        system: reader.number(sigma_defaults.get(system, DEFAULT_SIGMA_M), f"sigma_defaults.{system}", "sigma_defaults")
        for system in ("A", "B")
    }

    raw_anchors = reader.require(doc, "anchors", "anchors")
    if not isinstance(raw_anchors, list):
        raise reader.fail("anchors must be a list", "INVALID_VALUE", "anchors", "anchors")
    grouped: dict[str, list[tuple[int, Position, float, str]]] = {"A": [], "B": []}
    for i, item in enumerate(raw_anchors):
        field = f"anchors[{i}]"
        if not isinstance(item, dict):
            raise reader.fail("anchor entries must be objects", "INVALID_VALUE", field, "anchors")
        system = reader.require(item, "system", f"{field}.system")
        if system not in grouped:
            raise reader.fail(f"system must be 'A' or 'B', got {system!r}", "INVALID_VALUE", f"{field}.system", "system", i)
        ordinal = reader.require(item, "id", f"{field}.id")
        if isinstance(ordinal, bool) or not isinstance(ordinal, int):
            raise reader.fail(f"id must be an integer, got {ordinal!r}", "INVALID_VALUE", f"{field}.id", "system", i)
        coords = reader.vector(reader.require(item, "position", f"{field}.position"), dim, f"{field}.position", "position", i)
        sigma = reader.number(item.get("sigma", default_sigma[system]), f"{field}.sigma", "position", i)
        if sigma < 0.0:
            raise reader.fail("sigma must be >= 0", "INVALID_VALUE", f"{field}.sigma", "position", i)
        grouped[system].append((ordinal, Position(coords), sigma, str(item.get("label", ""))))

    for system, count_code in (("A", "M_LT_2"), ("B", "N_LT_2")):
        if len(grouped[system]) < 2:
            letter = "M" if system == "A" else "N"
            raise ScenarioError(
                f"system {system} has {len(grouped[system])} anchor(s): {letter} < 2",
                code=count_code,
                location=Location(source, _line_of(text, "anchors"), "anchors"),
            )

    anchors: dict[str, tuple[Anchor, ...]] = {}
    sigmas: dict[str, tuple[float, ...]] = {}
    try:
        for system, entries in grouped.items():
            entries.sort(key=lambda e: e[0])
            anchors[system] = tuple(Anchor(system, ordinal, pos, label) for ordinal, pos, _, label in entries)
            sigmas[system] = tuple(sigma for _, _, sigma, _ in entries)
        scenario = Scenario(anchors_a=anchors["A"], anchors_b=anchors["B"], dim=dim)
    except ValidationError as exc:
        raise ScenarioError(exc.message, code=exc.code, location=Location(source, _line_of(text, "anchors"), "anchors")) from exc

    options = _parse_options(reader, doc.get("solver"), defaults or SolverOptions(), scenario)
    ud_region = _parse_region(reader, doc.get("ud_region"), dim)
    return ScenarioConfig(
        scenario=scenario,
        noise=NoiseModel(sigmas["A"], sigmas["B"]),
        options=options,
        ud_region=ud_region,
        source=source,
    )


def _parse_options(reader: _ConfigReader, block: Any, base: SolverOptions, scenario: Scenario) -> SolverOptions:
    if block is None:
        return base
    if not isinstance(block, dict):
        raise reader.fail("solver must be an object", "INVALID_VALUE", "solver", "solver")
    values: dict[str, Any] = {}
    for key, limit in (("ref_a", scenario.m), ("ref_b", scenario.n)):
        if key in block:
            ordinal = block[key]
            if isinstance(ordinal, bool) or not isinstance(ordinal, int) or not 1 <= ordinal <= limit:
                raise reader.fail(f"{key} must be an ordinal in 1..{limit}", "INVALID_VALUE", f"solver.{key}", key)
            values[key] = ordinal
    for key in ("simplified_score", "center_frame"):
        if key in block:
            if not isinstance(block[key], bool):
                raise reader.fail(f"{key} must be true or false", "INVALID_VALUE", f"solver.{key}", key)
            values[key] = block[key]
    if "range_floor_m" in block:
        floor = reader.number(block["range_floor_m"], "solver.range_floor_m", "range_floor_m")
        if floor <= 0.0:
            raise reader.fail("range_floor_m must be > 0", "INVALID_VALUE", "solver.range_floor_m", "range_floor_m")
        values["range_floor_m"] = floor
    return SolverOptions(
        ref_a=values.get("ref_a", base.ref_a),
        ref_b=values.get("ref_b", base.ref_b),
        simplified_score=values.get("simplified_score", base.simplified_score),
        range_floor_m=values.get("range_floor_m", base.range_floor_m),
        center_frame=values.get("center_frame", base.center_frame),
        tolerances=base.tolerances,
    )


def _parse_region(reader: _ConfigReader, block: Any, dim: int) -> Box | None:
    if block is None:
        return None
    if not isinstance(block, dict):
        raise reader.fail("ud_region must be an object", "INVALID_VALUE", "ud_region", "ud_region")
    if "center" in block:
        center = reader.vector(block["center"], dim, "ud_region.center", "center")
        half = reader.number(reader.require(block, "half_width", "ud_region.half_width"), "ud_region.half_width", "half_width")
        return Box.centered(center, half)
    low = reader.vector(reader.require(block, "low", "ud_region.low"), dim, "ud_region.low", "low")
    high = reader.vector(reader.require(block, "high", "ud_region.high"), dim, "ud_region.high", "high")
    try:
        return Box(low, high)
    except ValidationError as exc:
        raise reader.fail("ud_region low must not exceed high", "INVALID_VALUE", "ud_region", "ud_region") from exc


def load_scenario_file(path: Path, defaults: SolverOptions | None = None) -> ScenarioConfig:
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text(encoding="utf-8"), source=str(path), defaults=defaults)


def scenario_to_text(config: ScenarioConfig) -> str:
    """Serialise a `ScenarioConfig` to the JSON accepted by `parse_scenario`."""
    anchors = []
    for anchors_of, sigmas in ((config.scenario.anchors_a, config.noise.sigma_a), (config.scenario.anchors_b, config.noise.sigma_b)):
        for anchor, sigma in zip(anchors_of, sigmas):
            entry: dict[str, Any] = {
                "system": anchor.system,
                "id": anchor.index,
                "position": list(anchor.position.coords),
                "sigma": sigma,
            }
            if anchor.label:
                entry["label"] = anchor.label
            anchors.append(entry)
    opts = config.options
    doc: dict[str, Any] = {
        "dim": config.scenario.dim,
        "anchors": anchors,
        "solver": {
            "ref_a": opts.ref_a,
            "ref_b": opts.ref_b,
            "simplified_score": opts.simplified_score,
            "range_floor_m": opts.range_floor_m,
            "center_frame": opts.center_frame,
        },
    }
    if config.ud_region is not None:
        doc["ud_region"] = {"low": list(config.ud_region.low), "high": list(config.ud_region.high)}
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# epoch CSV


def _data_lines(stream: Iterable[str]) -> Iterable[tuple[int, str]]:
    for number, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield number, line


def _parse_row(fields: list[str], line: int, source: str, dim: int | None) -> EpochRow:
    def where(name: str) -> Location:
        return Location(source, line, name)

    fields = [f.strip() for f in fields]
    if len(fields) not in EPOCH_COLUMNS:
        raise EpochFormatError(
            f"expected 7 (2D) or 8 (3D) columns, got {len(fields)}", code="BAD_ROW", location=where("")
        )
    row_dim = EPOCH_COLUMNS[len(fields)]
    if dim is not None and row_dim != dim:
        raise EpochFormatError(
            f"row is {row_dim}D but the file is {dim}D", code="MIXED_DIMENSION", location=where("")
        )
    epoch_id, system, anchor_id = fields[0], fields[1].upper(), fields[2]
    if not epoch_id:
        raise EpochFormatError("epoch_id is empty", code="BAD_ROW", location=where("epoch_id"))
    if system not in ("A", "B"):
        raise EpochFormatError(f"system must be A or B, got {fields[1]!r}", code="BAD_ROW", location=where("system"))
    names = ["x", "y", "z"][:row_dim] + ["pseudorange_m", "sigma_m"]
    values = []
    for name, text in zip(names, fields[3:]):
        try:
            value = float(text)
        except ValueError:
            raise EpochFormatError(f"{name} is not a number: {text!r}", code="BAD_ROW", location=where(name)) from None
        if not math.isfinite(value):
            raise EpochFormatError(f"{name} is not finite", code="BAD_ROW", location=where(name))
        values.append(value)
    if values[-1] < 0.0:
        raise EpochFormatError("sigma_m must be >= 0", code="BAD_ROW", location=where("sigma_m"))
    return EpochRow(
        epoch_id=epoch_id,
        system=system,
        anchor_id=anchor_id,
        position=tuple(values[:row_dim]),
        pseudorange_m=values[row_dim],
        sigma_m=values[row_dim + 1],
        location=Location(source, line, ""),
    )


def _report(exc: EpochFormatError, strict: bool, diagnostics: list | None) -> None:
    if strict:
        raise exc
    logger.warning("skipping: %s", exc)
    if diagnostics is not None:
        diagnostics.append(exc)


def read_epoch_records(
    stream: Iterable[str],
    *,
    strict: bool = False,
    source: str = "<stream>",
    diagnostics: list | None = None,
) -> list[EpochRecord]:
    """Group epoch CSV rows by epoch id, in order of first appearance."""
    grouped: dict[str, list[EpochRow]] = {}
    dim: int | None = None
    for line, text in _data_lines(stream):
        fields = next(csv.reader([text]))
        if dim is None and not grouped and fields and fields[0].strip().lower() == "epoch_id":
            continue
        try:
            row = _parse_row(fields, line, source, dim)
        except EpochFormatError as exc:
            _report(exc, strict, diagnostics)
            continue
        dim = len(row.position)
        grouped.setdefault(row.epoch_id, []).append(row)
    return [EpochRecord(epoch_id=key, rows=rows) for key, rows in grouped.items()]


def record_to_epoch(record: EpochRecord) -> LoadedEpoch:
    """Build the scenario and measurements of one epoch; anchors are numbered in row order."""
    rows_a = [r for r in record.rows if r.system == "A"]
    rows_b = [r for r in record.rows if r.system == "B"]
    first = record.rows[0].location
    for system, rows in (("A", rows_a), ("B", rows_b)):
        if len(rows) < 2:
            raise EpochFormatError(
                f"epoch {record.epoch_id!r} has {len(rows)} system-{system} row(s); at least 2 are required",
                code="EPOCH_TOO_FEW_ROWS",
                location=Location(first.source, first.line, "system"),
            )
    try:
        scenario = Scenario.from_arrays(
            [r.position for r in rows_a],
            [r.position for r in rows_b],
            labels_a=[r.anchor_id for r in rows_a],
            labels_b=[r.anchor_id for r in rows_b],
        )
    except ValidationError as exc:
        raise EpochFormatError(
            f"epoch {record.epoch_id!r}: {exc.message}", code=exc.code, location=Location(first.source, first.line, "")
        ) from exc
    noise = NoiseModel(tuple(r.sigma_m for r in rows_a), tuple(r.sigma_m for r in rows_b))
    measurements = EpochMeasurements(
        tuple(r.pseudorange_m for r in rows_a),
        tuple(r.pseudorange_m for r in rows_b),
        noise,
        record.epoch_id,
    )
    return LoadedEpoch(epoch_id=record.epoch_id, scenario=scenario, measurements=measurements)


def read_epochs(
    stream: Iterable[str] | str,
    *,
    strict: bool = False,
    source: str = "<stream>",
    diagnostics: list | None = None,
) -> list[LoadedEpoch]:
    """Read the epoch CSV grammar into per-epoch scenarios and measurements.

    Input:
        stream: Text lines (`epoch_id, system, anchor_id, x, y[, z],
            pseudorange_m, sigma_m`); `#` lines and blank lines are ignored.
        strict: Raise on the first malformed row or epoch instead of skipping it.
        diagnostics: Optional list that collects the skipped-row errors.

    Output:
        One `LoadedEpoch` per valid epoch id, in order of first appearance.
        An empty input gives an empty list.
    """
    lines = io.StringIO(stream) if isinstance(stream, str) else stream
    epochs = []
    for record in read_epoch_records(lines, strict=strict, source=source, diagnostics=diagnostics):
        try:
            epochs.append(record_to_epoch(record))
        except EpochFormatError as exc:
            _report(exc, strict, diagnostics)
    return epochs


def read_epochs_file(path: Path, **kwargs: Any) -> list[LoadedEpoch]:
    if not path.exists():
        raise FileNotFoundError(f"epoch file not found: {path}")
    with path.open("r", encoding="utf-8-sig", newline="") as handle:
        return read_epochs(handle, source=str(path), **kwargs)


def write_epochs(epochs: Iterable[LoadedEpoch], stream: TextIO | None = None) -> str:
    """Write epochs in the CSV grammar `read_epochs` accepts; returns the text written."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header_written = False
    for epoch in epochs:
        scenario, meas = epoch.scenario, epoch.measurements
        if not header_written:
            buffer.write("# " + (EPOCH_HEADER_3D if scenario.dim == 3 else EPOCH_HEADER_2D) + "\n")
            header_written = True
        for anchors, rho, sigma in (
            (scenario.anchors_a, meas.rho_a, meas.noise.sigma_a),
            (scenario.anchors_b, meas.rho_b, meas.noise.sigma_b),
        ):
            for anchor, value, s in zip(anchors, rho, sigma):
                writer.writerow(
                    [epoch.epoch_id, anchor.system, anchor.label or f"{anchor.system}{anchor.index}"]
                    + [repr(c) for c in anchor.position.coords]
                    + [repr(value), repr(s)]
                )
    text = buffer.getvalue()
    if stream is not None:
        stream.write(text)
    return text
