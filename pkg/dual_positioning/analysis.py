from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from dual_positioning.errors import NotPositiveDefiniteError, UndefinedLosError, ValidationError
from dual_positioning.geometry import check_point
from dual_positioning.linear_stage import other_indices
from dual_positioning.models import CrlbReport, LosGeometry, NoiseModel, Position, QInverseClosedForm, Scenario
from dual_positioning.solver import tdoa_covariance


LOS_MIN_DISTANCE_M = 1e-9


def _require_positive(noise: NoiseModel) -> None:
    if not noise.all_positive:
        raise ValidationError("every sigma must be > 0 for information matrices", code="ZERO_SIGMA")


def _unit_vectors(positions: np.ndarray, point: np.ndarray, system: str) -> np.ndarray:
    offsets = positions - point
    dist = np.linalg.norm(offsets, axis=1)
    close = np.flatnonzero(dist <= LOS_MIN_DISTANCE_M)
    if close.size:
        raise UndefinedLosError(
            f"position coincides with anchor {system}{close[0] + 1}", code="UNDEFINED_LOS"
        )
    return offsets / dist[:, None]


def line_of_sight(scenario: Scenario, p_u: Position, ref_a: int = 1, ref_b: int = 1) -> LosGeometry:
    """Unit vectors from `p_u` toward every anchor and the TDOA design matrix H.

    Row i of H is l_ref - l_i, the gradient of |p - p_i| - |p - p_ref|.
    """
    point = check_point(scenario, p_u)
    l_a = _unit_vectors(scenario.positions_a, point, "A")
    l_b = _unit_vectors(scenario.positions_b, point, "B")
    h_mat = np.vstack(
        [
            l_a[ref_a - 1] - l_a[other_indices(scenario.m, ref_a)],
            l_b[ref_b - 1] - l_b[other_indices(scenario.n, ref_b)],
        ]
    )
    return LosGeometry(l_a=l_a, l_b=l_b, h_mat=h_mat)


def fim_tdoa(
    scenario: Scenario,
    p_u: Position,
    noise: NoiseModel,
    ref_a: int = 1,
    ref_b: int = 1,
) -> tuple[np.ndarray, LosGeometry]:
    """Position Fisher information of the differenced measurements, F = HᵀQ⁻¹H."""
    _require_positive(noise)
    los = line_of_sight(scenario, p_u, ref_a, ref_b)
    q_factor = cho_factor(tdoa_covariance(noise, ref_a, ref_b), lower=True)
    fim = los.h_mat.T @ cho_solve(q_factor, los.h_mat)
    return 0.5 * (fim + fim.T), los


def system_information(los: np.ndarray, sigma: Sequence[float]) -> np.ndarray:
    """One system's position information once its clock term is eliminated.

    Σ l lᵀ/σ² - (Σ l/σ²)(Σ l/σ²)ᵀ / Σ 1/σ².
    """
    inv_var = 1.0 / np.square(np.asarray(sigma, dtype=float))
    weighted = los * inv_var[:, None]
    total = weighted.sum(axis=0)
    return los.T @ weighted - np.outer(total, total) / inv_var.sum()


def _toa_blocks(los: LosGeometry, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inv_a = 1.0 / noise.var_a
    inv_b = 1.0 / noise.var_b
    f11 = los.l_a.T @ (los.l_a * inv_a[:, None]) + los.l_b.T @ (los.l_b * inv_b[:, None])
    f12 = np.column_stack([-(los.l_a * inv_a[:, None]).sum(axis=0), -(los.l_b * inv_b[:, None]).sum(axis=0)])
    f22 = np.diag([inv_a.sum(), inv_b.sum()])
    return f11, f12, f22


def fim_toa_position_block(scenario: Scenario, p_u: Position, noise: NoiseModel) -> np.ndarray:
    """Position block of the inverse pseudorange FIM, J_pos⁻¹ = F11 - F12·F22⁻¹·F12ᵀ.

    The clock-offset ranges are nuisance parameters here; F22 is diagonal so
    its inverse is taken entrywise.
    """
    _require_positive(noise)
    los = line_of_sight(scenario, p_u)
    f11, f12, f22 = _toa_blocks(los, noise)
    return f11 - (f12 / np.diag(f22)) @ f12.T


def predicted_covariance(scenario: Scenario, p_u: Position, noise: NoiseModel, ref_a: int = 1, ref_b: int = 1) -> np.ndarray:
    """First-order CDL error covariance (HᵀQ⁻¹H)⁻¹."""
    fim, _ = fim_tdoa(scenario, p_u, noise, ref_a, ref_b)
    return _invert_spd(fim)


def _invert_spd(matrix: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(matrix, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError("information matrix is singular; geometry is degenerate", code="NOT_SPD") from exc
    inverse = cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def is_spd(matrix: np.ndarray) -> bool:
    """Symmetric, Cholesky-factorisable and min eigenvalue > -1e-12·trace."""
    mat = np.asarray(matrix, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        return False
    scale = max(float(np.abs(mat).max(initial=0.0)), 1e-300)
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * scale):
        return False
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return float(np.linalg.eigvalsh(mat).min()) > -1e-12 * float(np.trace(mat))


def error_lower_bound(crlb: np.ndarray) -> float:
    """sqrt(trace(CRLB)), the scalar position-error bound in meters."""
    if not is_spd(crlb):
        raise NotPositiveDefiniteError("CRLB matrix is not symmetric positive definite", code="NOT_SPD")
    return float(np.sqrt(np.trace(crlb)))


def crlb_report(
    scenario: Scenario,
    p_u: Position,
    noise: NoiseModel,
    ref_a: int = 1,
    ref_b: int = 1,
) -> CrlbReport:
    """TDOA FIM, its inverse, the error bound and the pseudorange-side blocks in one call."""
    fim, los = fim_tdoa(scenario, p_u, noise, ref_a, ref_b)
    crlb = _invert_spd(fim)
    f11, f12, f22 = _toa_blocks(los, noise)
    return CrlbReport(
        fim_tdoa=fim,
        crlb_tdoa=crlb,
        error_lb=error_lower_bound(crlb),
        f11=f11,
        f12=f12,
        f22=f22,
        j_pos_inverse=f11 - (f12 / np.diag(f22)) @ f12.T,
    )


def _closed_block(var: np.ndarray, ref: int) -> tuple[np.ndarray, np.ndarray]:
    inv_var = 1.0 / var
    v = np.delete(inv_var, ref - 1)
    return v, np.outer(v, v) / inv_var.sum()


def q_inverse_closed_form(noise: NoiseModel, ref_a: int = 1, ref_b: int = 1) -> QInverseClosedForm:
    """Q⁻¹ as diag(1/σ²) minus a rank-one block per system.

    For each system X = v vᵀ / Σ_all 1/σ², with v the inverse variances of the
    non-reference anchors.
    """
    _require_positive(noise)
    v_a, x_a = _closed_block(noise.var_a, ref_a)
    v_b, x_b = _closed_block(noise.var_b, ref_b)
    return QInverseClosedForm(diag_part=np.concatenate([v_a, v_b]), x_a=x_a, x_b=x_b)


def rmse(errors: Sequence[Sequence[float]] | np.ndarray) -> float:
    """sqrt(mean |e|²) over position error vectors."""
    arr = np.asarray(errors, dtype=float)
    if arr.size == 0:
        raise ValidationError("rmse needs at least one error vector", code="EMPTY")
    arr = arr.reshape(arr.shape[0], -1)
    return float(np.sqrt(np.mean(np.sum(arr**2, axis=1))))


def empirical_covariance(errors: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Sample covariance of position error vectors (rows are runs)."""
    arr = np.asarray(errors, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValidationError("covariance needs at least two error vectors", code="EMPTY")
    return np.atleast_2d(np.cov(arr, rowvar=False))


def geometry_dilution(scenario: Scenario, p_u: Position, ref_a: int = 1, ref_b: int = 1) -> float:
    """Error bound per meter of noise: error_lower_bound with every sigma at 1 m."""
    unit = NoiseModel.uniform(scenario.m, scenario.n, 1.0)
    return error_lower_bound(predicted_covariance(scenario, p_u, unit, ref_a, ref_b))
