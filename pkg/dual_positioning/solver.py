from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import block_diag

from dual_positioning.errors import (
    DegenerateEliminationError,
    NoSolutionError,
    SolverError,
    ValidationError,
)
from dual_positioning.linear_stage import other_indices, difference, linear_system_arrays
from dual_positioning.models import (
    CandidateSolution,
    CdlResult,
    EpochMeasurements,
    LinearStage,
    NoiseModel,
    Position,
    RootPair,
    Scenario,
    SolveDiagnostics,
    SolverOptions,
    WeightModel,
)
from dual_positioning.polynomial import form_quadratics, solve_pair


def _system_covariance(var: np.ndarray, ref: int) -> np.ndarray:
    others = np.delete(var, ref - 1)
    return np.full((others.shape[0], others.shape[0]), var[ref - 1]) + np.diag(others)


def tdoa_covariance(noise: NoiseModel, ref_a: int = 1, ref_b: int = 1) -> np.ndarray:
    """Covariance of the differenced noise.

    Each system block is σ_ref²·11ᵀ + diag(σ_i²) over its non-reference
    anchors; the two systems are independent.
    """
    return block_diag(_system_covariance(noise.var_a, ref_a), _system_covariance(noise.var_b, ref_b))


def _cholesky(matrix: np.ndarray, jitter_rel: float) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor, retrying once with a diagonal jitter of jitter_rel·tr/dim."""
    try:
        return np.linalg.cholesky(matrix), False
    except np.linalg.LinAlgError:
        pass
    dim = matrix.shape[0]
    jitter = jitter_rel * max(float(np.trace(matrix)), 0.0) / dim
    try:
        return np.linalg.cholesky(matrix + jitter * np.eye(dim)), True
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"matrix is not positive definite even with jitter {jitter:.3g}") from exc


@lru_cache(maxsize=64)
def _q_factor(noise: NoiseModel, ref_a: int, ref_b: int, jitter_rel: float) -> tuple[np.ndarray, np.ndarray, bool]:
    """Q and L⁻¹ for Q = L·Lᵀ, cached per noise model and reference pair."""
    q_mat = tdoa_covariance(noise, ref_a, ref_b)
    factor, jittered = _cholesky(q_mat, jitter_rel)
    whiten = np.linalg.inv(factor)
    q_mat.flags.writeable = False
    whiten.flags.writeable = False
    return q_mat, whiten, jittered


def _ranges_from_roots(
    roots: RootPair,
    d_a: np.ndarray,
    d_b: np.ndarray,
    idx_a: np.ndarray,
    idx_b: np.ndarray,
    floor_m: float,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    ranges_a = roots.r_a1 + d_a
    ranges_b = roots.r_b1 + d_b
    clamped = [f"A{i + 1}" for i in idx_a[ranges_a < floor_m]]
    clamped += [f"B{j + 1}" for j in idx_b[ranges_b < floor_m]]
    return np.maximum(ranges_a, floor_m), np.maximum(ranges_b, floor_m), clamped


def reconstruct_ranges(
    roots: RootPair,
    epoch: EpochMeasurements,
    *,
    ref_a: int = 1,
    ref_b: int = 1,
    floor_m: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Ranges to the non-reference anchors from the solved reference ranges.

    Inputs:
        roots: Solved (r_A,ref, r_B,ref).
        epoch: Measurements supplying ρ_i - ρ_ref.

    Output:
        `(ranges_a, ranges_b, clamped)`; entries below `floor_m` are raised to
        the floor and named in `clamped` (for example `"A3"`).
    """
    tdoa = difference(epoch, ref_a, ref_b)
    return _ranges_from_roots(
        roots,
        tdoa.d_a,
        tdoa.d_b,
        other_indices(len(epoch.rho_a), ref_a),
        other_indices(len(epoch.rho_b), ref_b),
        floor_m,
    )


def build_weight(
    ranges: tuple[np.ndarray, np.ndarray],
    noise: NoiseModel,
    *,
    ref_a: int = 1,
    ref_b: int = 1,
    jitter_rel: float = 1e-12,
) -> WeightModel:
    """W = D·Q·D with D the diagonal of reconstructed ranges.

    The result also carries M = L⁻¹·D⁻¹ (W⁻¹ = MᵀM), built from the cached
    factor of Q. When every sigma is zero the weighting is bypassed: W is the
    identity and `bypassed` is set.
    """
    d_diag = np.concatenate([np.asarray(r, dtype=float) for r in ranges])
    if np.any(d_diag <= 0.0):
        raise ValidationError("reconstructed ranges must be positive", code="INVALID_VALUE")
    if d_diag.shape[0] != len(noise.sigma_a) + len(noise.sigma_b) - 2:
        raise ValidationError("range vector and noise model differ in length", code="DIM_MISMATCH")
    if noise.all_zero:
        q_mat = tdoa_covariance(noise, ref_a, ref_b)
        return WeightModel(d_diag=d_diag, q_mat=q_mat, w_mat=np.eye(d_diag.shape[0]), bypassed=True)
    q_mat, q_whiten, jittered = _q_factor(noise, ref_a, ref_b, jitter_rel)
    return WeightModel(
        d_diag=d_diag,
        q_mat=q_mat,
        w_mat=d_diag[:, None] * q_mat * d_diag[None, :],
        whiten=q_whiten / d_diag[None, :],
        jittered=jittered,
    )


def _normal_solve(a_mat: np.ndarray, b_vec: np.ndarray) -> np.ndarray:
    return np.linalg.solve(a_mat.T @ a_mat, a_mat.T @ b_vec)


def wls_position(
    stage: LinearStage,
    w: WeightModel,
    roots: RootPair,
    *,
    jitter_rel: float = 1e-12,
) -> Position:
    """p = (GᵀW⁻¹G)⁻¹GᵀW⁻¹(C·z + h), solved in the whitened form.

    The position is expressed in the frame `stage` was built in. A bypassed
    weight gives the unweighted fit.
    """
    rhs = stage.c_mat @ np.array([roots.r_a1, roots.r_b1]) + stage.h_vec
    whiten = w.whiten
    if whiten is None and not w.bypassed:
        factor, _ = _cholesky(w.w_mat, jitter_rel)
        whiten = np.linalg.inv(factor)
    if whiten is None:
        return Position.of(_normal_solve(stage.g_mat, rhs))
    return Position.of(_normal_solve(whiten @ stage.g_mat, whiten @ rhs))


def _tdoa_residual_arrays(
    point: np.ndarray,
    ref_pa: np.ndarray,
    others_a: np.ndarray,
    ref_pb: np.ndarray,
    others_b: np.ndarray,
    d_all: np.ndarray,
) -> np.ndarray:
    predicted_a = np.linalg.norm(others_a - point, axis=1) - np.linalg.norm(ref_pa - point)
    predicted_b = np.linalg.norm(others_b - point, axis=1) - np.linalg.norm(ref_pb - point)
    return d_all - np.concatenate([predicted_a, predicted_b])


def tdoa_residual(
    position: Position,
    epoch: EpochMeasurements,
    scenario: Scenario,
    *,
    ref_a: int = 1,
    ref_b: int = 1,
) -> np.ndarray:
    """d_ρ[i] = (ρ_i - ρ_ref) - (|p - p_i| - |p - p_ref|), system A rows first."""
    tdoa = difference(epoch, ref_a, ref_b)
    pos_a, pos_b = scenario.positions_a, scenario.positions_b
    return _tdoa_residual_arrays(
        Position.of(position).as_array(),
        pos_a[ref_a - 1],
        pos_a[other_indices(scenario.m, ref_a)],
        pos_b[ref_b - 1],
        pos_b[other_indices(scenario.n, ref_b)],
        np.concatenate([tdoa.d_a, tdoa.d_b]),
    )


def _weighted_norm(resid: np.ndarray, whiten: np.ndarray | None) -> float:
    if whiten is None:
        return float(resid @ resid)
    whitened = whiten @ resid
    return float(whitened @ whitened)


def score(
    position: Position,
    epoch: EpochMeasurements,
    scenario: Scenario,
    q_mat: np.ndarray,
    simplified: bool = False,
    *,
    ref_a: int = 1,
    ref_b: int = 1,
    jitter_rel: float = 1e-12,
) -> float:
    """Weighted squared TDOA residual d_ρᵀQ⁻¹d_ρ, or d_ρᵀd_ρ when `simplified`."""
    resid = tdoa_residual(position, epoch, scenario, ref_a=ref_a, ref_b=ref_b)
    if simplified:
        return _weighted_norm(resid, None)
    factor, _ = _cholesky(np.asarray(q_mat, dtype=float), jitter_rel)
    return _weighted_norm(resid, np.linalg.inv(factor))


def _select(candidates: list[CandidateSolution], tie_rel: float) -> tuple[CandidateSolution, bool]:
    best = min(candidates, key=lambda c: c.score)
    tied = [
        c
        for c in candidates
        if abs(c.score - best.score) <= tie_rel * max(abs(c.score), abs(best.score))
    ]
    if len(tied) == 1:
        return best, False
    return max(tied, key=lambda c: min(c.roots.r_a1, c.roots.r_b1)), True


def cdl_solve(
    scenario: Scenario,
    epoch: EpochMeasurements,
    options: SolverOptions | None = None,
) -> CdlResult:
    """Closed-form position from one epoch of dual-system pseudoranges.

    Inputs:
        scenario: Anchor geometry.
        epoch: Pseudoranges and per-anchor sigmas.
        options: Reference ordinals, scoring mode, range floor, tolerances.

    Output:
        `CdlResult` holding the lowest-score candidate and every candidate
        that was scored.

    Raises:
        DegenerateGeometryError: when the anchor differences are rank deficient.
        NoSolutionError: when no root pair survives filtering.
    """
    opts = options or SolverOptions()
    tol = opts.tolerances
    epoch.check_against(scenario)
    tdoa = difference(epoch, opts.ref_a, opts.ref_b)

    shift = scenario.centroid if opts.center_frame else np.zeros(scenario.dim)
    pos_a = scenario.positions_a - shift
    pos_b = scenario.positions_b - shift
    stage = linear_system_arrays(pos_a, pos_b, tdoa.d_a, tdoa.d_b, opts.ref_a, opts.ref_b, tol.rank_rel)
    ref_pa = pos_a[opts.ref_a - 1]
    ref_pb = pos_b[opts.ref_b - 1]
    idx_a = other_indices(scenario.m, opts.ref_a)
    idx_b = other_indices(scenario.n, opts.ref_b)
    others_a = pos_a[idx_a]
    others_b = pos_b[idx_b]

    try:
        solution = solve_pair(form_quadratics(stage, ref_pa, ref_pb), tol)
    except DegenerateEliminationError as exc:
        raise NoSolutionError(str(exc), reason="degenerate_elimination") from exc
    if not solution.pairs:
        raise NoSolutionError(
            f"no admissible root pair ({len(solution.rejected)} roots rejected)",
            rejected=solution.rejected,
        )

    fallbacks: list[str] = []
    score_whiten: np.ndarray | None = None
    if epoch.noise.all_zero:
        fallbacks.append("unweighted_zero_noise")
    else:
        _, q_whiten, jittered = _q_factor(epoch.noise, opts.ref_a, opts.ref_b, tol.jitter_rel)
        if jittered:
            fallbacks.append("q_jitter")
        if not opts.simplified_score:
            score_whiten = q_whiten

    d_all = np.concatenate([tdoa.d_a, tdoa.d_b])
    candidates: list[CandidateSolution] = []
    clamped: list[str] = []
    for pair in solution.pairs:
        ranges_a, ranges_b, low = _ranges_from_roots(pair, tdoa.d_a, tdoa.d_b, idx_a, idx_b, opts.range_floor_m)
        clamped.extend(low)
        weight = build_weight(
            (ranges_a, ranges_b), epoch.noise, ref_a=opts.ref_a, ref_b=opts.ref_b, jitter_rel=tol.jitter_rel
        )
        point = wls_position(stage, weight, pair).as_array()
        resid = _tdoa_residual_arrays(point, ref_pa, others_a, ref_pb, others_b, d_all)
        candidates.append(
            CandidateSolution(
                roots=pair,
                position=Position.of(point + shift),
                residual_vec=resid,
                score=_weighted_norm(resid, score_whiten),
            )
        )

    chosen, tie = _select(candidates, tol.tie_rel)
    diagnostics = SolveDiagnostics(
        candidate_count=len(candidates),
        rejected=list(solution.rejected),
        clamped=clamped,
        fallbacks=fallbacks,
        tie=tie,
    )
    return CdlResult(position=chosen.position, chosen=chosen, all_candidates=candidates, diagnostics=diagnostics)
