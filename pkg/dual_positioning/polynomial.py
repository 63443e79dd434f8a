"""Quadratic pair in the reference ranges, elimination to a quartic, and root solving.

Polynomial coefficient sequences are ordered from the highest power down to
the constant, as in `numpy.roots`.
"""
from __future__ import annotations

import cmath
import math
from typing import Sequence

import numpy as np

from dual_positioning.errors import DegenerateEliminationError, InvalidPolynomialError
from dual_positioning.models import (
    EliminationCoeffs,
    LinearStage,
    PairSolution,
    Position,
    QuadraticPair,
    QuarticCoeffs,
    RejectedRoot,
    RootPair,
    Tolerances,
)


RESIDUAL_REL_TOL = 1e-8
LEADING_REL_TOL = 1e-14
BRANCH_ZERO_REL = 1e-12
POLISH_STEPS = 2
_OMEGA = complex(-0.5, math.sqrt(3.0) / 2.0)


def _point(value: Position | np.ndarray) -> np.ndarray:
    return value.as_array() if isinstance(value, Position) else np.asarray(value, dtype=float)


def form_quadratics(stage: LinearStage, p_a1: Position | np.ndarray, p_b1: Position | np.ndarray) -> QuadraticPair:
    """Coefficients of the two range equations in x = r_A,ref and y = r_B,ref.

    With p = s1·x + s2·y + g, quadratic 1 is |p - p_A,ref|² - x² = 0 and
    quadratic 2 is |p - p_B,ref|² - y² = 0.
    """
    s1 = stage.s_mat[:, 0]
    s2 = stage.s_mat[:, 1]
    u = stage.g_vec - _point(p_a1)
    v = stage.g_vec - _point(p_b1)
    s11 = float(s1 @ s1)
    s22 = float(s2 @ s2)
    b = 2.0 * float(s1 @ s2)
    return QuadraticPair(
        a1=s11 - 1.0,
        b1=b,
        c1=s22,
        d1=2.0 * float(s1 @ u),
        e1=2.0 * float(s2 @ u),
        f1=float(u @ u),
        a2=s11,
        b2=b,
        c2=s22 - 1.0,
        d2=2.0 * float(s1 @ v),
        e2=2.0 * float(s2 @ v),
        f2=float(v @ v),
    )


def elimination_coefficients(q: QuadraticPair) -> EliminationCoeffs:
    """c2·(quadratic 1) - c1·(quadratic 2), written as (t1 x + t2) y = t3 x² + t4 x + t5."""
    return EliminationCoeffs(
        t1=q.b1 * q.c2 - q.b2 * q.c1,
        t2=q.e1 * q.c2 - q.e2 * q.c1,
        t3=-q.a1 * q.c2 + q.a2 * q.c1,
        t4=-q.d1 * q.c2 + q.d2 * q.c1,
        t5=-q.f1 * q.c2 + q.f2 * q.c1,
    )


def quartic_coefficients(q: QuadraticPair, t: EliminationCoeffs) -> QuarticCoeffs:
    """Substitute y = (t3 x² + t4 x + t5)/(t1 x + t2) into quadratic 1, cleared of the denominator."""
    a1, b1, c1, d1, e1, f1 = q.first()
    t1, t2, t3, t4, t5 = t.t1, t.t2, t.t3, t.t4, t.t5
    return QuarticCoeffs(
        alpha=a1 * t1**2 + b1 * t1 * t3 + c1 * t3**2,
        beta=d1 * t1**2 + 2 * a1 * t1 * t2 + b1 * t1 * t4 + b1 * t2 * t3 + 2 * c1 * t3 * t4 + e1 * t1 * t3,
        gamma=(
            c1 * (t4**2 + 2 * t3 * t5)
            + a1 * t2**2
            + f1 * t1**2
            + b1 * t1 * t5
            + b1 * t2 * t4
            + 2 * d1 * t1 * t2
            + e1 * t1 * t4
            + e1 * t2 * t3
        ),
        lam=d1 * t2**2 + b1 * t2 * t5 + 2 * c1 * t4 * t5 + e1 * t1 * t5 + e1 * t2 * t4 + 2 * f1 * t1 * t2,
        mu=f1 * t2**2 + e1 * t2 * t5 + c1 * t5**2,
    )


def eliminate(q: QuadraticPair) -> tuple[EliminationCoeffs, QuarticCoeffs]:
    """Remove the y² term and reduce the pair to one quartic in x.

    Raises:
        DegenerateEliminationError: when neither quadratic has a y² term.
    """
    if q.c1 == 0.0 and q.c2 == 0.0:
        raise DegenerateEliminationError("both quadratics lack a y² term (c1 = c2 = 0)")
    t = elimination_coefficients(q)
    return t, quartic_coefficients(q, t)


# ---------------------------------------------------------------------------
# scalar polynomial helpers


def evaluate(coeffs: Sequence[float], z: complex) -> complex:
    acc = 0j
    for c in coeffs:
        acc = acc * z + c
    return acc


def _evaluate_with_derivative(coeffs: Sequence[float], z: complex) -> tuple[complex, complex]:
    value = 0j
    slope = 0j
    for c in coeffs:
        slope = slope * z + value
        value = value * z + c
    return value, slope


def residual_ok(coeffs: Sequence[float], z: complex, rel: float = RESIDUAL_REL_TOL) -> bool:
    """|P(z)| <= rel · min(max|coef| · max(1, |z|)^degree, Σ|cₖ|·|z|^(degree-k))."""
    degree = len(coeffs) - 1
    size = abs(z)
    cap = max(abs(c) for c in coeffs) * max(1.0, size) ** degree
    terms = sum(abs(c) * size ** (degree - k) for k, c in enumerate(coeffs))
    return abs(evaluate(coeffs, z)) <= rel * min(cap, terms)


def _polish(coeffs: Sequence[float], roots: list[complex]) -> list[complex]:
    out = []
    for z in roots:
        value, slope = _evaluate_with_derivative(coeffs, z)
        for _ in range(POLISH_STEPS):
            if value == 0 or slope == 0:
                break
            trial = z - value / slope
            trial_value, trial_slope = _evaluate_with_derivative(coeffs, trial)
            if abs(trial_value) >= abs(value):
                break
            z, value, slope = trial, trial_value, trial_slope
        out.append(z)
    return out


def _log_root_scale(tail: Sequence[float]) -> float | None:
    """log of a Fujiwara-style root bound for `tail`; None when it has no nonzero root."""
    nonzero = [(i, c) for i, c in enumerate(tail) if c != 0.0]
    if len(nonzero) < 2:
        return None
    (j, lead), rest = nonzero[0], nonzero[1:]
    return max((math.log(abs(c)) - math.log(abs(lead))) / (i - j) for i, c in rest)


def _trim_leading(coeffs: Sequence[float]) -> list[float]:
    """Drop leading coefficients that are negligible at the scale of the remaining roots.

    A leading cₖ is dropped when |cₖ|·Rⁿ is below LEADING_REL_TOL times the
    largest tail term |cᵢ|·Rⁿ⁻ⁱ, with R a root bound of the tail. Comparing
    terms at the root scale keeps a quartic whose roots are large from being
    read as a lower degree.
    """
    values = [float(c) for c in coeffs]
    if not all(math.isfinite(c) for c in values):
        raise InvalidPolynomialError("polynomial coefficients must be finite", code="NON_FINITE")
    if not any(values):
        raise InvalidPolynomialError("all polynomial coefficients are zero", code="ZERO_POLYNOMIAL")
    start = 0
    while start < len(values) - 1:
        lead, tail = values[start], values[start + 1 :]
        if lead != 0.0:
            log_r = _log_root_scale(tail)
            if log_r is None:
                break
            degree = len(tail)
            lead_term = math.log(abs(lead)) + degree * log_r
            tail_term = max(
                math.log(abs(c)) + (degree - 1 - i) * log_r for i, c in enumerate(tail) if c != 0.0
            )
            if lead_term > math.log(LEADING_REL_TOL) + tail_term:
                break
        start += 1
    return values[start:]


def _monic_scaled(coeffs: Sequence[float]) -> tuple[list[float], float]:
    """Rescale x = σ·w so the monic polynomial in w has O(1) coefficients; σ is a power of two."""
    lead = coeffs[0]
    bound = max(
        (abs(c / lead) ** (1.0 / i) for i, c in enumerate(coeffs[1:], start=1) if c != 0.0),
        default=1.0,
    )
    sigma = 2.0 ** round(math.log2(bound)) if bound > 0.0 else 1.0
    return [c / (lead * sigma**i) for i, c in enumerate(coeffs)], sigma


def companion_roots(coeffs: Sequence[float]) -> list[complex]:
    """Roots as eigenvalues of the companion matrix of the rescaled monic polynomial."""
    trimmed = _trim_leading(coeffs)
    degree = len(trimmed) - 1
    if degree == 0:
        return []
    scaled, sigma = _monic_scaled(trimmed)
    monic = np.asarray(scaled[1:], dtype=float)
    companion = np.zeros((degree, degree))
    companion[0, :] = -monic
    companion[1:, :-1] = np.eye(degree - 1)
    return _polish(trimmed, [sigma * complex(w) for w in np.linalg.eigvals(companion)])


def _accept_or_fallback(coeffs: list[float], roots: list[complex]) -> list[complex]:
    polished = _polish(coeffs, roots)
    if all(residual_ok(coeffs, z) for z in polished):
        return polished
    return companion_roots(coeffs)


def solve_linear(b: float, c: float) -> list[complex]:
    """Root of b·z + c."""
    if b == 0.0:
        raise InvalidPolynomialError("linear coefficient is zero", code="ZERO_POLYNOMIAL")
    return [complex(-c / b)]


def solve_quadratic(a: float, b: float, c: float) -> list[complex]:
    """Both roots of a·z² + b·z + c, using the cancellation-free form."""
    if a == 0.0:
        return solve_linear(b, c)
    disc = cmath.sqrt(b * b - 4.0 * a * c)
    if (complex(b).conjugate() * disc).real < 0.0:
        disc = -disc
    half = -0.5 * (b + disc)
    if half == 0:
        return [0j, 0j]
    return [half / a, c / half]


def solve_cubic(a: float, b: float, c: float, d: float) -> list[complex]:
    """Roots of a·z³ + b·z² + c·z + d by Cardano's formula in complex arithmetic."""
    if a == 0.0:
        return solve_quadratic(b, c, d)
    coeffs = [a, b, c, d]
    (_, bb, cc, dd), sigma = _monic_scaled(coeffs)
    delta0 = bb * bb - 3.0 * cc
    delta1 = 2.0 * bb**3 - 9.0 * bb * cc + 27.0 * dd
    root = cmath.sqrt(delta1 * delta1 - 4.0 * delta0**3)
    big = max((delta1 + root) / 2.0, (delta1 - root) / 2.0, key=abs)
    if abs(big) <= BRANCH_ZERO_REL * max(1.0, abs(delta1)):
        roots = [complex(-bb / 3.0)] * 3
    else:
        base = big ** (1.0 / 3.0)
        roots = []
        for k in range(3):
            ck = base * _OMEGA**k
            roots.append(-(bb + ck + delta0 / ck) / 3.0)
    return _accept_or_fallback(coeffs, [sigma * w for w in roots])


def _ferrari(monic: list[float]) -> list[complex] | None:
    _, beta, gamma, lam, mu = monic
    p = (8.0 * gamma - 3.0 * beta**2) / 8.0
    q0 = (beta**3 - 4.0 * beta * gamma + 8.0 * lam) / 8.0
    delta0 = gamma**2 - 3.0 * beta * lam + 12.0 * mu
    delta1 = 2.0 * gamma**3 - 9.0 * beta * gamma * lam + 27.0 * beta**2 * mu + 27.0 * lam**2 - 72.0 * gamma * mu
    root = cmath.sqrt(delta1**2 - 4.0 * delta0**3)
    q_scale = max(abs(delta0) ** 0.5, abs(delta1) ** (1.0 / 3.0), 1e-300)

    q1 = ((delta1 + root) / 2.0) ** (1.0 / 3.0)
    if abs(q1) <= BRANCH_ZERO_REL * q_scale:
        q1 = ((delta1 - root) / 2.0) ** (1.0 / 3.0)
    shift = -beta / 4.0
    s_scale = 1.0 + abs(shift) + math.sqrt(abs(p))

    for k in range(3):
        qk = q1 * _OMEGA**k
        inner = qk + delta0 / qk if abs(qk) > BRANCH_ZERO_REL * q_scale else 0j
        s = 0.5 * cmath.sqrt(-2.0 * p / 3.0 + inner / 3.0)
        if abs(s) <= 1e-9 * s_scale:
            continue
        left = 0.5 * cmath.sqrt(-4.0 * s * s - 2.0 * p + q0 / s)
        right = 0.5 * cmath.sqrt(-4.0 * s * s - 2.0 * p - q0 / s)
        return [shift - s + left, shift - s - left, shift + s + right, shift + s - right]
    return None


def solve_quartic(q: QuarticCoeffs | Sequence[float]) -> list[complex]:
    """All roots of α x⁴ + β x³ + γ x² + λ x + μ, with multiplicity.

    Inputs:
        q: `QuarticCoeffs` or five coefficients, highest power first.

    Output:
        A list of `degree` complex roots. A vanishing leading coefficient
        routes to the cubic, quadratic or linear closed form; the closed form
        is Newton-polished and replaced by companion-matrix roots when a root
        fails the residual bound.

    Raises:
        InvalidPolynomialError: when every coefficient is zero.
    """
    raw = q.as_tuple() if isinstance(q, QuarticCoeffs) else tuple(q)
    coeffs = _trim_leading(raw)
    degree = len(coeffs) - 1
    if degree == 0:
        return []
    if degree == 1:
        return solve_linear(*coeffs)
    if degree == 2:
        return _accept_or_fallback(coeffs, solve_quadratic(*coeffs))
    if degree == 3:
        return solve_cubic(*coeffs)
    monic, sigma = _monic_scaled(coeffs)
    roots = _ferrari(monic)
    if roots is None:
        return companion_roots(coeffs)
    return _accept_or_fallback(coeffs, [sigma * w for w in roots])


# ---------------------------------------------------------------------------
# root pairs


def _quadratic_terms(coef: tuple[float, ...], x: float, y: float) -> tuple[float, float]:
    a, b, c, d, e, f = coef
    terms = (a * x * x, b * x * y, c * y * y, d * x, e * y, f)
    return sum(terms), sum(abs(v) for v in terms)


def _refine_pair(q: QuadraticPair, x: float, y: float) -> tuple[float, float]:
    """Up to two Newton steps on the original pair, each kept only if it lowers the residual."""
    first, second = q.first(), q.second()

    def residual(px: float, py: float) -> tuple[float, float, float]:
        r1, _ = _quadratic_terms(first, px, py)
        r2, _ = _quadratic_terms(second, px, py)
        return r1, r2, max(abs(r1), abs(r2))

    r1, r2, worst = residual(x, y)
    for _ in range(POLISH_STEPS):
        if worst == 0.0:
            break
        j11 = 2 * q.a1 * x + q.b1 * y + q.d1
        j12 = q.b1 * x + 2 * q.c1 * y + q.e1
        j21 = 2 * q.a2 * x + q.b2 * y + q.d2
        j22 = q.b2 * x + 2 * q.c2 * y + q.e2
        det = j11 * j22 - j12 * j21
        if det == 0.0:
            break
        tx = x - (r1 * j22 - r2 * j12) / det
        ty = y - (j11 * r2 - j21 * r1) / det
        nr1, nr2, nworst = residual(tx, ty)
        if not nworst < worst:
            break
        x, y, r1, r2, worst = tx, ty, nr1, nr2, nworst
    return x, y


def _verified(q: QuadraticPair, x: float, y: float, rel: float) -> bool:
    for coef in (q.first(), q.second()):
        value, magnitude = _quadratic_terms(coef, x, y)
        if abs(value) > rel * magnitude:
            return False
    return True


def _is_real(z: complex, rel: float) -> bool:
    return abs(z.imag) <= rel * (1.0 + abs(z.real))


def _is_duplicate(pairs: list[RootPair], x: float, y: float) -> bool:
    return any(
        abs(p.r_a1 - x) <= 1e-6 * max(1.0, abs(x)) and abs(p.r_b1 - y) <= 1e-6 * max(1.0, abs(y))
        for p in pairs
    )


def solve_pair(q: QuadraticPair, tolerances: Tolerances | None = None) -> PairSolution:
    """Real, non-negative solutions (r_A,ref, r_B,ref) of the quadratic pair.

    The quadratic with the larger |y²| coefficient is eliminated against, so
    the reduced system keeps the solution set. Each quartic root becomes x;
    y comes from back-substitution, or from quadratic 1 directly when
    t1·x + t2 vanishes. Every candidate is checked against both original
    quadratics. Discarded roots are reported with a reason.

    Raises:
        DegenerateEliminationError: when c1 = c2 = 0 or the two quadratics are
        proportional.
    """
    tol = tolerances or Tolerances()
    work = q.swapped() if abs(q.c2) > abs(q.c1) else q
    t, quartic = eliminate(work)
    try:
        xs = solve_quartic(quartic)
    except InvalidPolynomialError as exc:
        raise DegenerateEliminationError("the two quadratics are proportional") from exc

    a1, b1, c1, d1, e1, f1 = work.first()
    pairs: list[RootPair] = []
    rejected: list[RejectedRoot] = []
    for z in xs:
        if not _is_real(z, tol.imag_rel):
            rejected.append(RejectedRoot(x=z, y=None, reason="complex"))
            continue
        x = z.real
        den = t.t1 * x + t.t2
        num = t.t3 * x * x + t.t4 * x + t.t5
        if abs(den) <= tol.case1_rel * (abs(t.t1 * x) + abs(t.t2) + 1.0):
            num_scale = abs(t.t3 * x * x) + abs(t.t4 * x) + abs(t.t5)
            if abs(num) > tol.verify_rel * num_scale + tol.case1_rel:
                rejected.append(RejectedRoot(x=z, y=None, reason="case1_unsatisfied"))
                continue
            ys = solve_quadratic(c1, b1 * x + e1, a1 * x * x + d1 * x + f1)
        else:
            ys = [complex(num / den)]

        for w in ys:
            if not _is_real(w, tol.imag_rel):
                rejected.append(RejectedRoot(x=z, y=w, reason="complex"))
                continue
            px, py = _refine_pair(q, x, w.real)
            if not _verified(q, px, py, tol.verify_rel):
                rejected.append(RejectedRoot(x=complex(px), y=complex(py), reason="verification_failed"))
                continue
            if px < -tol.negative_root_m or py < -tol.negative_root_m:
                rejected.append(RejectedRoot(x=complex(px), y=complex(py), reason="negative"))
                continue
            px, py = max(px, 0.0), max(py, 0.0)
            if not _is_duplicate(pairs, px, py):
                pairs.append(RootPair(r_a1=px, r_b1=py))
    return PairSolution(pairs=pairs, rejected=rejected)
