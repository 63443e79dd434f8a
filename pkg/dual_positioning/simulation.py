from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from dual_positioning.analysis import crlb_report, rmse
from dual_positioning.errors import (
    DegenerateGeometryError,
    NoSolutionError,
    SolverError,
    ValidationError,
)
from dual_positioning.geometry import derive_seed, forward_model
from dual_positioning.iterative import iterative_solve
from dual_positioning.models import (
    BenchReport,
    BenchStats,
    Box,
    EpochMeasurements,
    LoadedEpoch,
    MethodStats,
    NoiseModel,
    Position,
    Scenario,
    ScenePreset,
    SolverOptions,
    SweepResult,
    SweepStep,
    TruthState,
)
from dual_positioning.solver import cdl_solve


logger = logging.getLogger(__name__)

NOISE_GRID: tuple[float, ...] = tuple(round(0.1 + 0.9 * k, 10) for k in range(12))
RUNS_PER_STEP = 1500
CLOCK_OFFSET_SPAN_M = 1e5
ZERO_STEP_KEY = 0
FIXTURE_STEP_KEY = 9999
CRLB_MODES = ("center", "per_run_mean")

MethodFn = Callable[[Scenario, EpochMeasurements, SolverOptions], "np.ndarray | None"]
_RECOVERABLE = (NoSolutionError, SolverError, DegenerateGeometryError, ArithmeticError, np.linalg.LinAlgError)


def _run_cdl(scenario: Scenario, epoch: EpochMeasurements, options: SolverOptions) -> np.ndarray:
    return cdl_solve(scenario, epoch, options).position.as_array()


def _run_cdl_simplified(scenario: Scenario, epoch: EpochMeasurements, options: SolverOptions) -> np.ndarray:
    return cdl_solve(scenario, epoch, replace(options, simplified_score=True)).position.as_array()


def _run_iterative(scenario: Scenario, epoch: EpochMeasurements, options: SolverOptions) -> np.ndarray | None:
    state = iterative_solve(scenario, epoch)
    return state.position.as_array() if state.converged else None


METHODS: dict[str, MethodFn] = {
    "cdl": _run_cdl,
    "cdl-simplified": _run_cdl_simplified,
    "iterative": _run_iterative,
}


def resolve_methods(methods: Sequence[str]) -> list[str]:
    names = list(dict.fromkeys(methods))
    if not names:
        raise ValidationError("at least one method is required", code="INVALID_VALUE")
    unknown = [m for m in names if m not in METHODS]
    if unknown:
        raise ValidationError(
            f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(METHODS)}", code="INVALID_VALUE"
        )
    return names


def preset_2d() -> ScenePreset:
    """200 m square with system A on the corners and system B on the side midpoints."""
    scenario = Scenario.from_arrays(
        [[0.0, 0.0], [200.0, 0.0], [200.0, 200.0], [0.0, 200.0]],
        [[100.0, 0.0], [200.0, 100.0], [100.0, 200.0], [0.0, 100.0]],
    )
    return ScenePreset(
        name="2d",
        scenario=scenario,
        ud_region=Box((80.0, 80.0), (120.0, 120.0)),
        noise_grid=NOISE_GRID,
        runs_per_step=RUNS_PER_STEP,
        note="anchor layout chosen on the corners and side midpoints of the square",
    )


def preset_3d() -> ScenePreset:
    """Four system-A and six system-B anchors around a 40 m cube centred at (100, 100, 20)."""
    scenario = Scenario.from_arrays(
        [[0.0, 0.0, 60.0], [200.0, 0.0, 120.0], [0.0, 200.0, 180.0], [200.0, 200.0, 90.0]],
        [
            [100.0, -20.0, 150.0],
            [220.0, 100.0, 0.0],
            [100.0, 220.0, 200.0],
            [-20.0, 100.0, 10.0],
            [60.0, 60.0, 250.0],
            [140.0, 140.0, 220.0],
        ],
    )
    return ScenePreset(
        name="3d",
        scenario=scenario,
        ud_region=Box.centered((100.0, 100.0, 20.0), 20.0),
        noise_grid=NOISE_GRID,
        runs_per_step=RUNS_PER_STEP,
        note="anchor heights chosen to keep the geometry well conditioned",
    )


PRESETS: dict[str, Callable[[], ScenePreset]] = {"2d": preset_2d, "3d": preset_3d}


def load_preset(name: str) -> ScenePreset:
    try:
        return PRESETS[name.strip().lower()]()
    except KeyError as exc:
        raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", code="INVALID_VALUE") from exc


def custom_preset(
    name: str,
    scenario: Scenario,
    ud_region: Box,
    *,
    noise_grid: Sequence[float] = NOISE_GRID,
    runs_per_step: int = RUNS_PER_STEP,
) -> ScenePreset:
    """Wrap any scenario and UD region so the harness can sweep it."""
    return ScenePreset(
        name=name,
        scenario=scenario,
        ud_region=ud_region,
        noise_grid=tuple(float(s) for s in noise_grid),
        runs_per_step=runs_per_step,
    )


@dataclass(frozen=True)
class _Draw:
    truth: TruthState
    epoch: EpochMeasurements


def draw_run(preset: ScenePreset, sigma: float, master_seed: int, step_key: int, run: int) -> _Draw:
    """UD position, clock offsets and noisy epoch for one Monte-Carlo run."""
    rng = np.random.default_rng(derive_seed(master_seed, step_key, run))
    point = rng.uniform(preset.ud_region.low, preset.ud_region.high)
    b_a, b_b = rng.uniform(-CLOCK_OFFSET_SPAN_M, CLOCK_OFFSET_SPAN_M, size=2)
    truth = TruthState(Position.of(point), float(b_a), float(b_b))
    noise = NoiseModel.uniform(preset.scenario.m, preset.scenario.n, sigma)
    epoch = forward_model(
        preset.scenario, truth, noise, derive_seed(master_seed, step_key, run, 1), epoch_id=f"{step_key}-{run}"
    )
    return _Draw(truth=truth, epoch=epoch)


def _solve_run(
    preset: ScenePreset,
    draw: _Draw,
    methods: list[str],
    options: SolverOptions,
    timed: bool,
) -> list[tuple[np.ndarray | None, float]]:
    out = []
    truth = draw.truth.p_u.as_array()
    for name in methods:
        start = time.perf_counter_ns() if timed else 0
        try:
            estimate = METHODS[name](preset.scenario, draw.epoch, options)
        except _RECOVERABLE:
            estimate = None
        elapsed_us = (time.perf_counter_ns() - start) / 1000.0 if timed else 0.0
        out.append((None if estimate is None else estimate - truth, elapsed_us))
    return out


def _center_bound(preset: ScenePreset, sigma: float) -> float:
    if sigma == 0.0:
        return 0.0
    noise = NoiseModel.uniform(preset.scenario.m, preset.scenario.n, sigma)
    return crlb_report(preset.scenario, Position.of(preset.ud_region.center), noise).error_lb


def run_sweep(
    preset: ScenePreset,
    methods: Sequence[str] = ("cdl", "iterative"),
    master_seed: int = 20180101,
    *,
    runs: int | None = None,
    noise_grid: Sequence[float] | None = None,
    include_zero_step: bool = False,
    crlb_mode: str = "center",
    keep_errors: bool = False,
    timed: bool = True,
    workers: int = 1,
    options: SolverOptions | None = None,
) -> SweepResult:
    """Monte-Carlo noise sweep over a scene preset.

    Inputs:
        preset: Scene, UD region, default noise grid and run count.
        methods: Registered method names (`cdl`, `cdl-simplified`, `iterative`).
        master_seed: Every run's draws derive from this seed, the step and the run index.

    Output:
        `SweepResult` with one `SweepStep` per sigma. Failed runs are counted,
        not raised. With `timed=False` the result is a pure function of the
        inputs; timing otherwise only affects `median_us`.
    """
    names = resolve_methods(methods)
    if crlb_mode not in CRLB_MODES:
        raise ValidationError(f"crlb_mode must be one of {', '.join(CRLB_MODES)}", code="INVALID_VALUE")
    run_count = preset.runs_per_step if runs is None else int(runs)
    if run_count < 1:
        raise ValidationError("runs must be >= 1", code="INVALID_VALUE")
    if workers < 1:
        raise ValidationError("workers must be >= 1", code="INVALID_VALUE")
    grid = [float(s) for s in (preset.noise_grid if noise_grid is None else noise_grid)]
    if any(s < 0.0 for s in grid):
        raise ValidationError("noise grid values must be >= 0", code="NEGATIVE_SIGMA")
    steps: list[tuple[int, float]] = [(k + 1, s) for k, s in enumerate(grid)]
    if include_zero_step:
        steps.insert(0, (ZERO_STEP_KEY, 0.0))
    opts = options or SolverOptions()

    results: list[SweepStep] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step_key, sigma in steps:
            def one(run: int, step_key: int = step_key, sigma: float = sigma):
                draw = draw_run(preset, sigma, master_seed, step_key, run)
                return draw, _solve_run(preset, draw, names, opts, timed)

            outcomes = list(pool.map(one, range(run_count))) if pool else [one(r) for r in range(run_count)]
            results.append(_reduce_step(preset, sigma, names, outcomes, crlb_mode, keep_errors, timed))
            logger.info("sweep %s sigma=%.3g m done (%d runs)", preset.name, sigma, run_count)
    finally:
        if pool is not None:
            pool.shutdown()
    return SweepResult(preset=preset.name, master_seed=int(master_seed), crlb_mode=crlb_mode, steps=results)


def _reduce_step(
    preset: ScenePreset,
    sigma: float,
    names: list[str],
    outcomes: list,
    crlb_mode: str,
    keep_errors: bool,
    timed: bool,
) -> SweepStep:
    if crlb_mode == "per_run_mean" and sigma > 0.0:
        noise = NoiseModel.uniform(preset.scenario.m, preset.scenario.n, sigma)
        bounds = [crlb_report(preset.scenario, draw.truth.p_u, noise).error_lb for draw, _ in outcomes]
        error_lb = float(np.sqrt(np.mean(np.square(bounds))))
    else:
        error_lb = _center_bound(preset, sigma)

    stats: list[MethodStats] = []
    kept: dict[str, list[list[float]]] = {}
    for index, name in enumerate(names):
        errors = [per_method[index][0] for _, per_method in outcomes if per_method[index][0] is not None]
        times = [per_method[index][1] for _, per_method in outcomes]
        attempted = len(outcomes)
        stats.append(
            MethodStats(
                method=name,
                rmse_m=rmse(errors) if errors else float("nan"),
                attempted=attempted,
                succeeded=len(errors),
                failures=attempted - len(errors),
                median_us=float(np.median(times)) if timed else 0.0,
            )
        )
        if keep_errors:
            kept[name] = [e.tolist() for e in errors]
    return SweepStep(sigma_m=sigma, error_lb_m=error_lb, methods=stats, errors=kept)


def simulate(
    preset: ScenePreset,
    sigma: float,
    master_seed: int = 20180101,
    methods: Sequence[str] = ("cdl", "iterative"),
    **kwargs,
) -> SweepResult:
    """A single-sigma sweep."""
    return run_sweep(preset, methods, master_seed, noise_grid=[sigma], **kwargs)


def benchmark(
    preset: ScenePreset,
    sigma: float = 1.0,
    calls: int = 1000,
    master_seed: int = 20180101,
    methods: Sequence[str] = ("cdl", "iterative"),
    options: SolverOptions | None = None,
) -> BenchReport:
    """Per-call runtime of each method on the same epochs.

    Calls are interleaved across methods epoch by epoch. The ratio is the
    CDL median over the iterative median (NaN when either is missing).
    """
    names = resolve_methods(methods)
    if calls < 1:
        raise ValidationError("calls must be >= 1", code="INVALID_VALUE")
    opts = options or SolverOptions()
    draws = [draw_run(preset, sigma, master_seed, 1, run) for run in range(calls)]
    for name in names:
        try:
            METHODS[name](preset.scenario, draws[0].epoch, opts)
        except _RECOVERABLE:
            pass

    times: dict[str, list[float]] = {name: [] for name in names}
    failures = dict.fromkeys(names, 0)
    for draw in draws:
        for name in names:
            start = time.perf_counter_ns()
            try:
                ok = METHODS[name](preset.scenario, draw.epoch, opts) is not None
            except _RECOVERABLE:
                ok = False
            times[name].append((time.perf_counter_ns() - start) / 1000.0)
            failures[name] += 0 if ok else 1

    stats = []
    for name in names:
        q25, q50, q75 = np.percentile(times[name], [25, 50, 75])
        stats.append(BenchStats(method=name, calls=calls, median_us=float(q50), iqr_us=float(q75 - q25), failures=failures[name]))
    medians = {s.method: s.median_us for s in stats}
    ratio = medians["cdl"] / medians["iterative"] if "cdl" in medians and "iterative" in medians else float("nan")
    logger.info("bench %s sigma=%.3g m: ratio %.3f over %d calls", preset.name, sigma, ratio, calls)
    return BenchReport(preset=preset.name, sigma_m=float(sigma), stats=stats, ratio=float(ratio))


def synthetic_epochs(
    preset: ScenePreset,
    count: int = 10,
    sigma: float = 0.0,
    master_seed: int = 20180101,
) -> list[tuple[TruthState, LoadedEpoch]]:
    """Self-generated epoch fixture: one UD draw per epoch on the preset scene.

    Epoch ids are `syn-000`, `syn-001`, ... The draws use their own seed key so
    they never overlap a sweep step.
    """
    if count < 0:
        raise ValidationError("count must be >= 0", code="INVALID_VALUE")
    out = []
    for run in range(count):
        draw = draw_run(preset, sigma, master_seed, FIXTURE_STEP_KEY, run)
        epoch_id = f"syn-{run:03d}"
        loaded = LoadedEpoch(
            epoch_id=epoch_id,
            scenario=preset.scenario,
            measurements=replace(draw.epoch, epoch_id=epoch_id),
        )
        out.append((draw.truth, loaded))
    return out
