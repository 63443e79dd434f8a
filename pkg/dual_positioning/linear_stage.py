from __future__ import annotations

import numpy as np

from dual_positioning.errors import DegenerateGeometryError, ValidationError
from dual_positioning.models import EpochMeasurements, LinearStage, Position, Scenario, TdoaSet


RANK_REL_TOL = 1e-8


def other_indices(count: int, ref: int) -> np.ndarray:
    if not 1 <= ref <= count:
        raise ValidationError(f"reference ordinal {ref} outside 1..{count}", code="BAD_ORDINAL")
    return np.delete(np.arange(count), ref - 1)


def difference(epoch: EpochMeasurements, ref_a: int = 1, ref_b: int = 1) -> TdoaSet:
    """Difference each system's pseudoranges against its reference anchor.

    Clock-offset ranges cancel exactly. `d_a` lists ρ_i - ρ_ref for the
    non-reference anchors of A in ordinal order; `d_b` likewise for B.
    """
    if len(epoch.rho_a) < 2 or len(epoch.rho_b) < 2:
        raise ValidationError("each system needs at least two pseudoranges", code="TOO_FEW_ANCHORS")
    rho_a, rho_b = epoch.rho_a_arr, epoch.rho_b_arr
    d_a = rho_a[other_indices(rho_a.shape[0], ref_a)] - rho_a[ref_a - 1]
    d_b = rho_b[other_indices(rho_b.shape[0], ref_b)] - rho_b[ref_b - 1]
    return TdoaSet(d_a=d_a, d_b=d_b, ref_a=ref_a, ref_b=ref_b)


def linear_system_arrays(
    pos_a: np.ndarray,
    pos_b: np.ndarray,
    d_a: np.ndarray,
    d_b: np.ndarray,
    ref_a: int = 1,
    ref_b: int = 1,
    rank_rel: float = RANK_REL_TOL,
) -> LinearStage:
    """Array-level builder behind `build_linear_system`.

    Row i of the collective form is 2(p_ref - p_i)ᵀp = 2 d_i r_ref + d_i² - |p_i|² + |p_ref|²,
    halved so G rows are plain coordinate differences.
    """
    idx_a = other_indices(pos_a.shape[0], ref_a)
    idx_b = other_indices(pos_b.shape[0], ref_b)
    if d_a.shape[0] != idx_a.shape[0] or d_b.shape[0] != idx_b.shape[0]:
        raise ValidationError("TDOA lengths do not match the anchor counts", code="DIM_MISMATCH")
    ref_pa, ref_pb = pos_a[ref_a - 1], pos_b[ref_b - 1]
    others_a, others_b = pos_a[idx_a], pos_b[idx_b]
    ma, nb = idx_a.shape[0], idx_b.shape[0]

    g_mat = np.vstack([ref_pa - others_a, ref_pb - others_b])
    c_mat = np.zeros((ma + nb, 2))
    c_mat[:ma, 0] = d_a
    c_mat[ma:, 1] = d_b
    h_vec = 0.5 * np.concatenate(
        [
            d_a**2 - np.einsum("ij,ij->i", others_a, others_a) + ref_pa @ ref_pa,
            d_b**2 - np.einsum("ij,ij->i", others_b, others_b) + ref_pb @ ref_pb,
        ]
    )

    dim = g_mat.shape[1]
    if g_mat.shape[0] < dim:
        raise DegenerateGeometryError(
            f"{g_mat.shape[0]} difference rows cannot fix {dim} coordinates", code="RANK_DEFICIENT"
        )
    u_mat, sv, vt_mat = np.linalg.svd(g_mat, full_matrices=False)
    if sv[-1] <= rank_rel * sv[0]:
        raise DegenerateGeometryError(
            f"anchor differences have rank < {dim} (singular values {sv[0]:.3g} .. {sv[-1]:.3g})",
            code="RANK_DEFICIENT",
        )
    projected = vt_mat.T @ ((u_mat.T @ np.column_stack([c_mat, h_vec])) / sv[:, None])
    return LinearStage(
        g_mat=g_mat,
        c_mat=c_mat,
        h_vec=h_vec,
        s_mat=projected[:, :2],
        g_vec=projected[:, 2],
    )


def build_linear_system(scenario: Scenario, tdoa: TdoaSet, *, rank_rel: float = RANK_REL_TOL) -> LinearStage:
    """Build G, C, h of G·p = C·[r_A,ref, r_B,ref]ᵀ + h and the projections S, g.

    Inputs:
        scenario: Anchor geometry.
        tdoa: Differenced measurements with their reference ordinals.

    Output:
        `LinearStage` with S = (GᵀG)⁻¹GᵀC and g = (GᵀG)⁻¹Gᵀh, computed from the
        thin SVD of G.

    Raises:
        DegenerateGeometryError: when G's smallest singular value is at or
        below `rank_rel` times its largest.
    """
    return linear_system_arrays(
        scenario.positions_a,
        scenario.positions_b,
        np.asarray(tdoa.d_a, dtype=float),
        np.asarray(tdoa.d_b, dtype=float),
        tdoa.ref_a,
        tdoa.ref_b,
        rank_rel,
    )


def linear_residual(stage: LinearStage, p_u: Position | np.ndarray, r_a1: float, r_b1: float) -> np.ndarray:
    """Evaluate G·p - C·z - h for a position and reference ranges."""
    point = Position.of(p_u).as_array()
    return stage.g_mat @ point - stage.c_mat @ np.array([r_a1, r_b1]) - stage.h_vec
