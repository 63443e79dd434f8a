import math
import os

import numpy as np
import pytest

from dual_positioning import simulation
from dual_positioning.analysis import empirical_covariance, predicted_covariance
from dual_positioning.errors import NoSolutionError, ValidationError
from dual_positioning.models import NoiseModel, Position
from dual_positioning.simulation import (
    CLOCK_OFFSET_SPAN_M,
    NOISE_GRID,
    RUNS_PER_STEP,
    benchmark,
    draw_run,
    load_preset,
    preset_2d,
    preset_3d,
    resolve_methods,
    run_sweep,
    synthetic_epochs,
)
from dual_positioning.solver import cdl_solve


SEED = 20180101


@pytest.fixture(scope="module")
def sweep_2d():
    return run_sweep(preset_2d(), ["cdl", "iterative"], SEED, noise_grid=[0.1, 1.0], keep_errors=True, timed=False)


@pytest.fixture(scope="module")
def sweep_3d():
    return run_sweep(preset_3d(), ["cdl", "iterative"], SEED, noise_grid=[0.1, 1.0], timed=False)


def test_preset_facts() -> None:
    assert len(NOISE_GRID) == 12
    assert NOISE_GRID[0] == pytest.approx(0.1)
    assert NOISE_GRID[-1] == pytest.approx(10.0)
    assert RUNS_PER_STEP == 1500
    two, three = load_preset("2d"), load_preset(" 3D ")
    assert (two.scenario.m, two.scenario.n, two.scenario.dim) == (4, 4, 2)
    assert (three.scenario.m, three.scenario.n, three.scenario.dim) == (4, 6, 3)
    assert three.ud_region.center == (100.0, 100.0, 20.0)
    with pytest.raises(ValidationError):
        load_preset("4d")


def test_draws_stay_in_range_and_repeat() -> None:
    preset = preset_3d()
    for run in range(50):
        draw = draw_run(preset, 1.0, SEED, 2, run)
        point = draw.truth.p_u.as_array()
        assert np.all(point >= np.array(preset.ud_region.low))
        assert np.all(point <= np.array(preset.ud_region.high))
        assert abs(draw.truth.b_a) <= CLOCK_OFFSET_SPAN_M
        assert abs(draw.truth.b_b) <= CLOCK_OFFSET_SPAN_M
    assert draw_run(preset, 1.0, SEED, 2, 7) == draw_run(preset, 1.0, SEED, 2, 7)
    assert draw_run(preset, 1.0, SEED, 2, 7).truth != draw_run(preset, 1.0, SEED, 3, 7).truth


@pytest.mark.parametrize("make_preset", [preset_2d, preset_3d])
def test_zero_step_is_exact(make_preset) -> None:
    result = run_sweep(make_preset(), ["cdl", "iterative"], SEED, runs=50, noise_grid=[], include_zero_step=True)
    assert len(result.steps) == 1
    step = result.steps[0]
    assert step.sigma_m == 0.0
    assert step.error_lb_m == 0.0
    for stats in step.methods:
        assert stats.failures == 0
        assert stats.rmse_m < 1e-6


def test_untimed_sweeps_repeat_exactly() -> None:
    kwargs = dict(runs=40, noise_grid=[0.5, 2.0], timed=False)
    first = run_sweep(preset_2d(), ["cdl", "cdl-simplified"], 11, **kwargs)
    second = run_sweep(preset_2d(), ["cdl", "cdl-simplified"], 11, **kwargs)
    assert first == second
    assert all(m.median_us == 0.0 for step in first.steps for m in step.methods)
    assert first.method_names == ["cdl", "cdl-simplified"]


def test_workers_do_not_change_results() -> None:
    kwargs = dict(runs=30, noise_grid=[1.0], timed=False)
    serial = run_sweep(preset_3d(), ["cdl"], 5, **kwargs)
    threaded = run_sweep(preset_3d(), ["cdl"], 5, workers=4, **kwargs)
    assert serial == threaded


def test_failed_runs_are_counted(monkeypatch) -> None:
    def refuse(scenario, epoch, options):
        raise NoSolutionError("no admissible root pair")

    monkeypatch.setitem(simulation.METHODS, "cdl", refuse)
    result = run_sweep(preset_2d(), ["cdl", "iterative"], SEED, runs=10, noise_grid=[1.0], timed=False)
    cdl = result.steps[0].stats("cdl")
    assert (cdl.attempted, cdl.succeeded, cdl.failures) == (10, 0, 10)
    assert math.isnan(cdl.rmse_m)
    assert result.steps[0].stats("iterative").failures == 0


def test_sweep_arguments_are_checked() -> None:
    preset = preset_2d()
    with pytest.raises(ValidationError):
        run_sweep(preset, ["cdl"], runs=0)
    with pytest.raises(ValidationError):
        run_sweep(preset, ["cdl"], runs=5, noise_grid=[-1.0])
    with pytest.raises(ValidationError):
        run_sweep(preset, ["cdl"], runs=5, crlb_mode="worst")
    with pytest.raises(ValidationError):
        run_sweep(preset, ["cdl"], runs=5, workers=0)
    assert resolve_methods(["iterative", "cdl", "iterative"]) == ["iterative", "cdl"]
    with pytest.raises(ValidationError):
        resolve_methods(["newton"])
    with pytest.raises(ValidationError):
        resolve_methods([])


def test_cdl_reaches_the_bound_on_the_plane(sweep_2d) -> None:
    low, high = sweep_2d.steps
    assert low.stats("cdl").failures == 0
    assert 0.95 <= low.stats("cdl").rmse_m / low.error_lb_m <= 1.10
    assert 0.95 <= high.stats("cdl").rmse_m / high.error_lb_m <= 1.25


def test_bound_is_linear_in_sigma(sweep_2d) -> None:
    low, high = sweep_2d.steps
    assert high.error_lb_m == pytest.approx(10.0 * low.error_lb_m, rel=1e-9)
    assert high.stats("cdl").rmse_m > low.stats("cdl").rmse_m


@pytest.mark.parametrize("fixture_name", ["sweep_2d", "sweep_3d"])
def test_cdl_matches_iterative_accuracy(fixture_name, request) -> None:
    for step in request.getfixturevalue(fixture_name).steps:
        cdl, iterative = step.stats("cdl"), step.stats("iterative")
        assert abs(cdl.rmse_m - iterative.rmse_m) / iterative.rmse_m <= 0.10, f"sigma {step.sigma_m}"


def test_error_covariance_matches_prediction(sweep_2d) -> None:
    preset = preset_2d()
    low = sweep_2d.steps[0]
    empirical = empirical_covariance(low.errors["cdl"])
    predicted = predicted_covariance(
        preset.scenario, Position.of(preset.ud_region.center), NoiseModel.uniform(4, 4, 0.1)
    )
    np.testing.assert_allclose(np.diag(empirical), np.diag(predicted), rtol=0.15)


def test_per_run_bound_mode() -> None:
    preset = preset_2d()
    center = run_sweep(preset, ["cdl"], SEED, runs=40, noise_grid=[1.0], timed=False)
    per_run = run_sweep(preset, ["cdl"], SEED, runs=40, noise_grid=[1.0], crlb_mode="per_run_mean", timed=False)
    assert per_run.crlb_mode == "per_run_mean"
    assert per_run.steps[0].error_lb_m == pytest.approx(center.steps[0].error_lb_m, rel=0.25)
    assert per_run.steps[0].methods == center.steps[0].methods


def test_synthetic_epochs_recover_their_truth() -> None:
    preset = preset_3d()
    drawn = synthetic_epochs(preset, count=10)
    assert [loaded.epoch_id for _, loaded in drawn] == [f"syn-{k:03d}" for k in range(10)]
    for truth, loaded in drawn:
        assert loaded.measurements.epoch_id == loaded.epoch_id
        result = cdl_solve(loaded.scenario, loaded.measurements)
        np.testing.assert_allclose(result.position.as_array(), truth.p_u.as_array(), atol=1e-6)
    assert synthetic_epochs(preset, count=0) == []
    with pytest.raises(ValidationError):
        synthetic_epochs(preset, count=-1)


def test_benchmark_report_shape() -> None:
    report = benchmark(preset_2d(), sigma=1.0, calls=20, master_seed=3)
    assert [s.method for s in report.stats] == ["cdl", "iterative"]
    assert all(s.calls == 20 and s.failures == 0 and s.median_us > 0.0 for s in report.stats)
    assert report.ratio == pytest.approx(report.stats[0].median_us / report.stats[1].median_us)
    only_cdl = benchmark(preset_2d(), calls=5, methods=["cdl"])
    assert math.isnan(only_cdl.ratio)
    with pytest.raises(ValidationError):
        benchmark(preset_2d(), calls=0)


@pytest.mark.skipif(not os.getenv("RUN_TIMING_TESTS"), reason="wall-clock comparison; set RUN_TIMING_TESTS=1")
def test_cdl_is_not_slower_than_iterative() -> None:
    report = benchmark(preset_3d(), sigma=1.0, calls=1000)
    assert report.ratio <= 1.0, f"CDL/iterative median ratio {report.ratio:.3f}"
