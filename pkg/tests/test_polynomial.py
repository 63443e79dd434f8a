import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from dual_positioning import polynomial
from dual_positioning.errors import DegenerateEliminationError, InvalidPolynomialError
from dual_positioning.geometry import forward_model, true_ranges
from dual_positioning.linear_stage import build_linear_system, difference
from dual_positioning.models import NoiseModel, Position, QuadraticPair, QuarticCoeffs, TruthState
from dual_positioning.polynomial import (
    companion_roots,
    eliminate,
    evaluate,
    form_quadratics,
    residual_ok,
    solve_cubic,
    solve_pair,
    solve_quadratic,
    solve_quartic,
)
from dual_positioning.simulation import preset_2d, preset_3d


def _max_matched_gap(found: list[complex], expected: np.ndarray) -> float:
    found_arr = np.asarray(found, dtype=complex)
    cost = np.abs(found_arr[:, None] - np.asarray(expected, dtype=complex)[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


def test_quartic_matches_companion_oracle_on_random_polynomials() -> None:
    rng = np.random.default_rng(2018)
    worst = 0.0
    for _ in range(10_000):
        coeffs = rng.uniform(-1.0, 1.0, size=5)
        coeffs[0] = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0)
        roots = solve_quartic(coeffs)
        assert len(roots) == 4
        assert all(residual_ok(coeffs, z) for z in roots)
        worst = max(worst, _max_matched_gap(roots, np.roots(coeffs)))
    assert worst < 1e-6


def test_quartic_with_known_real_roots() -> None:
    roots = solve_quartic(QuarticCoeffs(1.0, -10.0, 35.0, -50.0, 24.0))
    np.testing.assert_allclose(sorted(z.real for z in roots), [1.0, 2.0, 3.0, 4.0], atol=1e-9)
    assert max(abs(z.imag) for z in roots) < 1e-9


def test_quartic_with_a_double_root() -> None:
    # (x - 1)² (x - 3) (x + 2)
    coeffs = np.polymul(np.polymul([1.0, -1.0], [1.0, -1.0]), np.polymul([1.0, -3.0], [1.0, 2.0]))
    roots = solve_quartic(coeffs)
    assert _max_matched_gap(roots, np.array([1.0, 1.0, 3.0, -2.0])) < 1e-5


def test_quartic_with_complex_roots() -> None:
    # (x² + 1)(x² + 4)
    roots = solve_quartic([1.0, 0.0, 5.0, 0.0, 4.0])
    assert _max_matched_gap(roots, np.array([1j, -1j, 2j, -2j])) < 1e-9


@pytest.mark.parametrize(
    ("coeffs", "degree"),
    [
        ([0.0, 1.0, -6.0, 11.0, -6.0], 3),
        ([1e-20, 1.0, -6.0, 11.0, -6.0], 3),
        ([0.0, 0.0, 1.0, -3.0, 2.0], 2),
        ([0.0, 0.0, 0.0, 2.0, -1.0], 1),
    ],
)
def test_vanishing_leading_terms_route_to_lower_degree(coeffs, degree) -> None:
    roots = solve_quartic(coeffs)
    assert len(roots) == degree
    trimmed = np.trim_zeros(np.where(np.abs(coeffs) < 1e-14, 0.0, coeffs), "f")
    assert _max_matched_gap(roots, np.roots(trimmed)) < 1e-9


@pytest.mark.parametrize("scale", [1e4, 1e5, 1e7])
def test_quartic_with_large_roots_keeps_its_degree(scale) -> None:
    expected = scale * np.array([1.0, 2.0, 3.0, 4.0])
    coeffs = np.poly(expected)
    for roots in (solve_quartic(coeffs), companion_roots(coeffs)):
        assert len(roots) == 4
        np.testing.assert_allclose(sorted(z.real for z in roots), expected, rtol=1e-9)
        assert max(abs(z.imag) for z in roots) <= 1e-9 * scale


def test_satellite_scale_quartic_is_not_reduced() -> None:
    coeffs = [-1.0, -1.3e3, 9.7e14, 6.5e17, -2.3e29]
    roots = solve_quartic(coeffs)
    assert len(roots) == 4
    assert all(residual_ok(coeffs, z) for z in roots)
    assert _max_matched_gap(roots, np.roots(coeffs)) <= 1e-6 * max(abs(z) for z in roots)


def test_zero_polynomial_is_invalid() -> None:
    with pytest.raises(InvalidPolynomialError) as exc:
        solve_quartic([0.0, 0.0, 0.0, 0.0, 0.0])
    assert exc.value.code == "ZERO_POLYNOMIAL"
    with pytest.raises(InvalidPolynomialError):
        solve_quartic([1.0, float("nan"), 0.0, 0.0, 1.0])


def test_constant_polynomial_has_no_roots() -> None:
    assert solve_quartic([0.0, 0.0, 0.0, 0.0, 3.0]) == []


def test_quadratic_keeps_small_root_accurate() -> None:
    roots = sorted(solve_quadratic(1.0, -1e8, 1.0), key=abs)
    assert abs(roots[0] - 1e-8) < 1e-20
    assert abs(roots[1] - 1e8) < 1e-4


def test_cubic_closed_form() -> None:
    roots = solve_cubic(2.0, -12.0, 22.0, -12.0)
    np.testing.assert_allclose(sorted(z.real for z in roots), [1.0, 2.0, 3.0], atol=1e-9)


def test_companion_roots_agree_with_numpy() -> None:
    coeffs = [3.0, -1.0, 0.5, 2.0, -4.0]
    assert _max_matched_gap(companion_roots(coeffs), np.roots(coeffs)) < 1e-9


def _pair_at_truth(make_preset, offset):
    preset = make_preset()
    scenario = preset.scenario
    point = Position.of(np.asarray(preset.ud_region.center) + np.asarray(offset))
    epoch = forward_model(scenario, TruthState(point, 2e4, -5e4), NoiseModel.uniform(scenario.m, scenario.n, 0.0), 0)
    stage = build_linear_system(scenario, difference(epoch))
    r_a, r_b = true_ranges(scenario, point)
    q = form_quadratics(stage, scenario.anchors_a[0].position, scenario.anchors_b[0].position)
    return q, float(r_a[0]), float(r_b[0])


@pytest.mark.parametrize(("make_preset", "offset"), [(preset_2d, (7.0, -4.0)), (preset_3d, (5.0, 3.0, -8.0))])
def test_true_reference_ranges_solve_the_quadratic_pair(make_preset, offset) -> None:
    q, x, y = _pair_at_truth(make_preset, offset)
    for a, b, c, d, e, f in (q.first(), q.second()):
        terms = np.array([a * x * x, b * x * y, c * y * y, d * x, e * y, f])
        assert abs(terms.sum()) <= 1e-9 * np.abs(terms).sum()

    t, quartic = eliminate(q)
    den = t.t1 * x + t.t2
    num = t.t3 * x * x + t.t4 * x + t.t5
    assert abs(den * y - num) <= 1e-9 * (abs(den * y) + abs(num))
    coeffs = quartic.as_tuple()
    magnitude = sum(abs(c) * x ** (4 - i) for i, c in enumerate(coeffs))
    assert abs(evaluate(coeffs, x)) <= 1e-8 * magnitude

    solution = solve_pair(q)
    assert any(abs(p.r_a1 - x) < 1e-6 and abs(p.r_b1 - y) < 1e-6 for p in solution.pairs)
    assert all(p.r_a1 >= 0.0 and p.r_b1 >= 0.0 for p in solution.pairs)


def test_solve_pair_rejects_negative_roots() -> None:
    # x² + y² - 2 = 0 and x - y = 0 meet at (1, 1) and (-1, -1).
    q = QuadraticPair(1.0, 0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0)
    solution = solve_pair(q)
    assert len(solution.pairs) == 1
    assert solution.pairs[0].r_a1 == pytest.approx(1.0)
    assert solution.pairs[0].r_b1 == pytest.approx(1.0)
    assert [r.reason for r in solution.rejected] == ["negative"]


def test_solve_pair_rejects_complex_roots() -> None:
    # x² + y² + 1 = 0 has no real points.
    q = QuadraticPair(1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0)
    solution = solve_pair(q)
    assert solution.pairs == []
    assert len(solution.rejected) == 2
    assert {r.reason for r in solution.rejected} == {"complex"}


def test_solve_pair_recovers_y_when_back_substitution_divides_by_zero(monkeypatch) -> None:
    # x² + xy + y² - y - 5 = 0 and -x² + y² - 3 = 0: at x = 1 the eliminated
    # equation reads 0·y = 0, so y comes from quadratic 1 directly.
    q = QuadraticPair(1.0, 1.0, 1.0, 0.0, -1.0, -5.0, -1.0, 0.0, 1.0, 0.0, 0.0, -3.0)
    _, quartic = eliminate(q)
    np.testing.assert_allclose(quartic.as_tuple(), [3.0, 2.0, -12.0, 6.0, 1.0])
    others = [complex(z) for z in np.roots([3.0, 8.0, 1.0])]
    monkeypatch.setattr(polynomial, "solve_quartic", lambda _: [1 + 0j, 1 + 0j, *others])

    solution = solve_pair(q)
    assert len(solution.pairs) == 1
    assert solution.pairs[0].r_a1 == pytest.approx(1.0)
    assert solution.pairs[0].r_b1 == pytest.approx(2.0)
    assert "case1_unsatisfied" not in {r.reason for r in solution.rejected}


def test_solve_pair_flags_unsatisfied_zero_divisor_roots(monkeypatch) -> None:
    q = QuadraticPair(1.0, 1.0, 1.0, 0.0, -1.0, -5.0, -1.0, 0.0, 1.0, 0.0, 0.0, -4.0)
    monkeypatch.setattr(polynomial, "solve_quartic", lambda _: [1 + 0j])
    solution = solve_pair(q)
    assert solution.pairs == []
    assert [r.reason for r in solution.rejected] == ["case1_unsatisfied"]


def test_degenerate_elimination() -> None:
    no_y_squared = QuadraticPair(1.0, 1.0, 0.0, 1.0, 1.0, -1.0, 2.0, 0.0, 0.0, 1.0, 1.0, -3.0)
    with pytest.raises(DegenerateEliminationError):
        solve_pair(no_y_squared)
    proportional = QuadraticPair(1.0, 2.0, 1.0, 3.0, 4.0, -5.0, 2.0, 4.0, 2.0, 6.0, 8.0, -10.0)
    with pytest.raises(DegenerateEliminationError):
        solve_pair(proportional)


def test_larger_y_squared_coefficient_is_eliminated_against() -> None:
    q, x, y = _pair_at_truth(preset_2d, (-6.0, 9.0))
    swapped = solve_pair(q.swapped())
    assert any(abs(p.r_a1 - x) < 1e-6 and abs(p.r_b1 - y) < 1e-6 for p in swapped.pairs)


def _planted_pair(rng: np.random.Generator, scale: float) -> tuple[QuadraticPair, float, float]:
    """Random quadratic pair through a positive point (x0, y0) of size `scale`."""
    x0, y0 = rng.uniform(0.2, 1.0, 2) * scale
    values: list[float] = []
    for _ in range(2):
        a, b, c = rng.uniform(-1.0, 1.0, 3)
        d, e = rng.uniform(-1.0, 1.0, 2) * scale
        f = -(a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0)
        values += [a, b, c, d, e, f]
    return QuadraticPair(*values), float(x0), float(y0)


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_solve_pair_finds_planted_solutions(scale) -> None:
    rng = np.random.default_rng(int(scale) + 11)
    for _ in range(300):
        q, x0, y0 = _planted_pair(rng, scale)
        solution = solve_pair(q)
        tolerance = 1e-6 * (1.0 + np.hypot(x0, y0))
        assert any(np.hypot(p.r_a1 - x0, p.r_b1 - y0) <= tolerance for p in solution.pairs), (q, x0, y0)
        assert all(p.r_a1 >= 0.0 and p.r_b1 >= 0.0 for p in solution.pairs)


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_solve_pair_does_not_depend_on_quadratic_order(scale) -> None:
    rng = np.random.default_rng(int(scale) + 12)
    for _ in range(300):
        q, _, _ = _planted_pair(rng, scale)
        forward = sorted((p.r_a1, p.r_b1) for p in solve_pair(q).pairs)
        backward = sorted((p.r_a1, p.r_b1) for p in solve_pair(q.swapped()).pairs)
        assert len(forward) == len(backward)
        np.testing.assert_allclose(np.reshape(forward, (-1, 2)), np.reshape(backward, (-1, 2)), rtol=1e-9, atol=1e-9 * scale)


def _terms(coef: tuple[float, ...], x: complex, y: complex) -> np.ndarray:
    a, b, c, d, e, f = coef
    return np.array([a * x * x, b * x * y, c * y * y, d * x, e * y, f], dtype=complex)


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_quartic_roots_substituted_back_satisfy_quadratic_two(scale) -> None:
    rng = np.random.default_rng(int(scale) + 13)
    checked = 0
    for _ in range(200):
        q, _, _ = _planted_pair(rng, scale)
        if abs(q.c2) > abs(q.c1):
            q = q.swapped()
        t, quartic = eliminate(q)
        for x in solve_quartic(quartic):
            den = t.t1 * x + t.t2
            num = t.t3 * x * x + t.t4 * x + t.t5
            if abs(den) < 1e-2 * (abs(t.t1 * x) + abs(t.t2)):
                continue
            if abs(num) < 1e-2 * (abs(t.t3 * x * x) + abs(t.t4 * x) + abs(t.t5)):
                continue
            terms = _terms(q.second(), x, num / den)
            assert abs(terms.sum()) <= 1e-7 * np.abs(terms).sum()
            checked += 1
    assert checked > 400
