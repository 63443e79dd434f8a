import time
from dataclasses import replace

import numpy as np
import pytest

from dual_positioning import solver
from dual_positioning.analysis import crlb_report, rmse
from dual_positioning.errors import DegenerateEliminationError, NoSolutionError, ValidationError
from dual_positioning.geometry import forward_model
from dual_positioning.linear_stage import build_linear_system, difference
from dual_positioning.models import (
    CandidateSolution,
    EpochMeasurements,
    NoiseModel,
    PairSolution,
    Position,
    RejectedRoot,
    RootPair,
    Scenario,
    SolverOptions,
    TruthState,
)
from dual_positioning.simulation import draw_run, preset_2d, preset_3d
from dual_positioning.solver import (
    build_weight,
    cdl_solve,
    reconstruct_ranges,
    score,
    tdoa_covariance,
    tdoa_residual,
    wls_position,
)


@pytest.mark.parametrize("make_preset", [preset_2d, preset_3d])
def test_zero_noise_solutions_are_exact(make_preset) -> None:
    preset = make_preset()
    started = time.perf_counter()
    for run in range(100):
        draw = draw_run(preset, 0.0, 4242, 0, run)
        result = cdl_solve(preset.scenario, draw.epoch)
        error = np.linalg.norm(result.position.as_array() - draw.truth.p_u.as_array())
        assert error < 1e-6, f"run {run}: error {error:.3g} m"
        assert "unweighted_zero_noise" in result.diagnostics.fallbacks
    assert time.perf_counter() - started < 5.0


def test_clock_offsets_do_not_move_the_solution() -> None:
    preset = preset_2d()
    noise = NoiseModel.uniform(4, 4, 1.0)
    point = Position.of([104.0, 91.0])
    base = cdl_solve(preset.scenario, forward_model(preset.scenario, TruthState(point, 0.0, 0.0), noise, 77))
    shifted = cdl_solve(preset.scenario, forward_model(preset.scenario, TruthState(point, 8e4, -6e4), noise, 77))
    np.testing.assert_allclose(base.position.as_array(), shifted.position.as_array(), atol=1e-6)


@pytest.mark.parametrize("make_preset", [preset_2d, preset_3d])
def test_solution_moves_with_the_anchor_frame(make_preset) -> None:
    preset = make_preset()
    draw = draw_run(preset, 1.0, 9, 1, 3)
    offset = np.array([1e4, -2e4, 5e3][: preset.scenario.dim])
    base = cdl_solve(preset.scenario, draw.epoch)
    moved = cdl_solve(preset.scenario.translated(offset), draw.epoch)
    np.testing.assert_allclose(moved.position.as_array(), base.position.as_array() + offset, atol=1e-6)


def test_uniform_sigma_scaling_leaves_position_unchanged() -> None:
    preset = preset_3d()
    draw = draw_run(preset, 1.0, 21, 1, 0)
    rescaled = replace(draw.epoch, noise=NoiseModel.uniform(4, 6, 3.0))
    np.testing.assert_allclose(
        cdl_solve(preset.scenario, draw.epoch).position.as_array(),
        cdl_solve(preset.scenario, rescaled).position.as_array(),
        atol=1e-8,
    )


def test_tdoa_covariance_structure() -> None:
    noise = NoiseModel((1.0, 2.0, 3.0), (0.5, 1.5))
    q = tdoa_covariance(noise)
    expected = np.array(
        [
            [1.0 + 4.0, 1.0, 0.0],
            [1.0, 1.0 + 9.0, 0.0],
            [0.0, 0.0, 0.25 + 2.25],
        ]
    )
    np.testing.assert_allclose(q, expected)
    q_ref2 = tdoa_covariance(noise, ref_a=2)
    np.testing.assert_allclose(q_ref2[:2, :2], [[4.0 + 1.0, 4.0], [4.0, 4.0 + 9.0]])


def test_tdoa_covariance_matches_simulated_noise() -> None:
    rng = np.random.default_rng(5)
    for _ in range(3):
        m, n = rng.integers(2, 9, size=2)
        noise = NoiseModel(tuple(rng.uniform(0.1, 5.0, m)), tuple(rng.uniform(0.1, 5.0, n)))
        q = tdoa_covariance(noise)
        acc = np.zeros_like(q)
        samples = 0
        for _ in range(10):
            e_a = rng.standard_normal((100_000, m)) * np.array(noise.sigma_a)
            e_b = rng.standard_normal((100_000, n)) * np.array(noise.sigma_b)
            diffs = np.hstack([e_a[:, 1:] - e_a[:, :1], e_b[:, 1:] - e_b[:, :1]])
            acc += diffs.T @ diffs
            samples += diffs.shape[0]
        sample_cov = acc / samples
        scale = np.sqrt(np.outer(np.diag(q), np.diag(q)))
        assert np.max(np.abs(sample_cov - q) / scale) < 0.02


def test_reconstruct_ranges_clamps_below_floor() -> None:
    epoch = EpochMeasurements((100.0, 90.0, 120.0), (50.0, 60.0), NoiseModel.uniform(3, 2, 1.0))
    ranges_a, ranges_b, clamped = reconstruct_ranges(RootPair(5.0, 1.0), epoch)
    np.testing.assert_allclose(ranges_a, [1e-3, 25.0])
    np.testing.assert_allclose(ranges_b, [11.0])
    assert clamped == ["A2"]


def test_weight_is_range_scaled_covariance() -> None:
    noise = NoiseModel((1.0, 2.0, 3.0), (0.5, 1.5))
    ranges = (np.array([10.0, 20.0]), np.array([30.0]))
    weight = build_weight(ranges, noise)
    d = np.array([10.0, 20.0, 30.0])
    np.testing.assert_allclose(weight.w_mat, np.diag(d) @ tdoa_covariance(noise) @ np.diag(d))
    assert not weight.bypassed

    flat = build_weight(ranges, NoiseModel.uniform(3, 2, 0.0))
    assert flat.bypassed
    np.testing.assert_array_equal(flat.w_mat, np.eye(3))

    with pytest.raises(ValidationError):
        build_weight((np.array([0.0, 1.0]), np.array([1.0])), noise)


def test_cdl_position_matches_explicit_wls() -> None:
    preset = preset_2d()
    draw = draw_run(preset, 1.0, 31, 1, 4)
    options = SolverOptions(center_frame=False)
    result = cdl_solve(preset.scenario, draw.epoch, options)
    roots = result.chosen.roots

    stage = build_linear_system(preset.scenario, difference(draw.epoch))
    ranges_a, ranges_b, _ = reconstruct_ranges(roots, draw.epoch)
    weight = build_weight((ranges_a, ranges_b), draw.epoch.noise)
    via_helper = wls_position(stage, weight, roots)

    w_inv = np.linalg.inv(weight.w_mat)
    rhs = stage.c_mat @ np.array([roots.r_a1, roots.r_b1]) + stage.h_vec
    direct = np.linalg.solve(stage.g_mat.T @ w_inv @ stage.g_mat, stage.g_mat.T @ w_inv @ rhs)

    np.testing.assert_allclose(via_helper.as_array(), direct, atol=1e-6)
    np.testing.assert_allclose(result.position.as_array(), direct, atol=1e-6)


def test_chosen_candidate_has_the_lowest_score() -> None:
    preset = preset_3d()
    for run in range(20):
        draw = draw_run(preset, 2.0, 8, 1, run)
        result = cdl_solve(preset.scenario, draw.epoch)
        lowest = min(c.score for c in result.all_candidates)
        assert result.chosen.score <= lowest * (1 + 1e-12) + 1e-300
        assert result.diagnostics.candidate_count == len(result.all_candidates)


def test_score_modes() -> None:
    preset = preset_2d()
    draw = draw_run(preset, 1.0, 3, 1, 0)
    truth = draw.truth.p_u
    resid = tdoa_residual(truth, draw.epoch, preset.scenario)
    assert score(truth, draw.epoch, preset.scenario, np.eye(6), simplified=True) == pytest.approx(resid @ resid)
    assert score(truth, draw.epoch, preset.scenario, np.eye(6)) == pytest.approx(resid @ resid)
    q = tdoa_covariance(draw.epoch.noise)
    assert score(truth, draw.epoch, preset.scenario, q) == pytest.approx(resid @ np.linalg.solve(q, resid))

    exact = draw_run(preset, 0.0, 3, 0, 0)
    assert score(exact.truth.p_u, exact.epoch, preset.scenario, q) < 1e-18


def test_simplified_score_still_solves() -> None:
    preset = preset_2d()
    draw = draw_run(preset, 0.1, 12, 1, 1)
    result = cdl_solve(preset.scenario, draw.epoch, SolverOptions(simplified_score=True))
    assert np.linalg.norm(result.position.as_array() - draw.truth.p_u.as_array()) < 2.0


def test_reference_ordinals_are_configurable() -> None:
    preset = preset_2d()
    draw = draw_run(preset, 0.0, 17, 0, 2)
    result = cdl_solve(preset.scenario, draw.epoch, SolverOptions(ref_a=3, ref_b=2))
    np.testing.assert_allclose(result.position.as_array(), draw.truth.p_u.as_array(), atol=1e-6)


def test_tie_prefers_larger_minimum_range() -> None:
    near = CandidateSolution(RootPair(1.0, 50.0), Position.of([0.0, 0.0]), np.zeros(2), 4.0)
    far = CandidateSolution(RootPair(30.0, 40.0), Position.of([1.0, 1.0]), np.zeros(2), 4.0)
    chosen, tie = solver._select([near, far], 1e-12)
    assert chosen is far and tie
    chosen, tie = solver._select([near, replace(far, score=5.0)], 1e-12)
    assert chosen is near and not tie


def test_no_admissible_roots_raises_with_reasons(monkeypatch) -> None:
    rejected = [RejectedRoot(x=1j, y=None, reason="complex")]
    monkeypatch.setattr(solver, "solve_pair", lambda q, tol: PairSolution(pairs=[], rejected=rejected))
    draw = draw_run(preset_2d(), 1.0, 1, 1, 0)
    with pytest.raises(NoSolutionError) as exc:
        cdl_solve(preset_2d().scenario, draw.epoch)
    assert exc.value.reason == "no_admissible_roots"
    assert exc.value.rejected == rejected


def test_degenerate_elimination_becomes_no_solution(monkeypatch) -> None:
    def degenerate(q, tol):
        raise DegenerateEliminationError("c1 = c2 = 0")

    monkeypatch.setattr(solver, "solve_pair", degenerate)
    draw = draw_run(preset_2d(), 1.0, 1, 1, 0)
    with pytest.raises(NoSolutionError) as exc:
        cdl_solve(preset_2d().scenario, draw.epoch)
    assert exc.value.reason == "degenerate_elimination"


def test_epoch_must_match_scenario() -> None:
    epoch = EpochMeasurements((1.0, 2.0, 3.0), (1.0, 2.0), NoiseModel.uniform(3, 2, 1.0))
    with pytest.raises(ValidationError, match="DIM_MISMATCH"):
        cdl_solve(preset_2d().scenario, epoch)


def _satellite_scene(seed: int = 7, per_system: int = 5) -> tuple[Scenario, Position]:
    """Two constellations at orbital radius seen from a receiver on the Earth's surface."""
    rng = np.random.default_rng(seed)
    directions = []
    while len(directions) < 2 * per_system:
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        if u[0] > 0.5:
            directions.append(u)
    satellites = 2.66e7 * np.array(directions)
    scenario = Scenario.from_arrays(satellites[:per_system], satellites[per_system:])
    return scenario, Position.of([6.371e6, 1.2e3, -8.0e2])


def test_satellite_scale_zero_noise_is_solved() -> None:
    scenario, point = _satellite_scene()
    noise = NoiseModel.uniform(scenario.m, scenario.n, 0.0)
    for seed, (b_a, b_b) in enumerate([(0.0, 0.0), (3e4, -7e4), (-1e5, 2e5)]):
        epoch = forward_model(scenario, TruthState(point, b_a, b_b), noise, seed)
        result = cdl_solve(scenario, epoch)
        assert np.linalg.norm(result.position.as_array() - point.as_array()) < 1e-2


def test_satellite_scale_noisy_solutions_stay_near_the_bound() -> None:
    scenario, point = _satellite_scene()
    noise = NoiseModel.uniform(scenario.m, scenario.n, 3.0)
    errors = []
    for seed in range(50):
        epoch = forward_model(scenario, TruthState(point, 2e4, -4e4), noise, 100 + seed)
        errors.append(cdl_solve(scenario, epoch).position.as_array() - point.as_array())
    bound = crlb_report(scenario, point, noise).error_lb
    assert rmse(errors) < 2.0 * bound


def test_scaled_square_scene_is_solved() -> None:
    preset = preset_2d()
    scenario = Scenario.from_arrays(100.0 * preset.scenario.positions_a, 100.0 * preset.scenario.positions_b)
    point = Position.of(100.0 * np.asarray(preset.ud_region.center) + np.array([37.0, -52.0]))
    epoch = forward_model(scenario, TruthState(point, 1e4, -3e4), NoiseModel.uniform(4, 4, 0.0), 5)
    result = cdl_solve(scenario, epoch)
    np.testing.assert_allclose(result.position.as_array(), point.as_array(), atol=1e-5)


def test_candidates_run_through_the_public_operations(monkeypatch) -> None:
    preset = preset_3d()
    draw = draw_run(preset, 1.0, 21, 1, 2)
    calls = {"build_weight": 0, "wls_position": 0}

    def counted(name):
        original = getattr(solver, name)

        def wrapper(*args, **kwargs):
            calls[name] += 1
            return original(*args, **kwargs)

        return wrapper

    for name in calls:
        monkeypatch.setattr(solver, name, counted(name))
    result = cdl_solve(preset.scenario, draw.epoch)
    assert calls == {"build_weight": result.diagnostics.candidate_count, "wls_position": result.diagnostics.candidate_count}

    q = tdoa_covariance(draw.epoch.noise)
    for candidate in result.all_candidates:
        expected = score(candidate.position, draw.epoch, preset.scenario, q)
        assert candidate.score == pytest.approx(expected, rel=1e-6, abs=1e-12)
