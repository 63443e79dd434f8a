from __future__ import annotations

import numpy as np

from dual_positioning.errors import DegenerateGeometryError, ValidationError
from dual_positioning.models import EpochMeasurements, IterativeConfig, IterState, Scenario


SIGMA_FLOOR_REL = 1e-6


def predicted_pseudoranges(pos_a: np.ndarray, pos_b: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """|p - p_i| + b_system for every anchor, system A first. θ = [p, b_a, b_b]."""
    point = theta[:-2]
    return np.concatenate(
        [
            np.linalg.norm(pos_a - point, axis=1) + theta[-2],
            np.linalg.norm(pos_b - point, axis=1) + theta[-1],
        ]
    )


def pseudorange_jacobian(pos_a: np.ndarray, pos_b: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rows [-lᵀ, 1, 0] for system A and [-lᵀ, 0, 1] for system B, l the unit LOS toward the anchor."""
    point = theta[:-2]
    ma, nb = pos_a.shape[0], pos_b.shape[0]
    los = np.vstack([pos_a, pos_b]) - point
    dist = np.linalg.norm(los, axis=1)
    if np.any(dist == 0.0):
        raise DegenerateGeometryError("estimate coincides with an anchor", code="UNDEFINED_LOS")
    jac = np.zeros((ma + nb, point.shape[0] + 2))
    jac[:, :-2] = -los / dist[:, None]
    jac[:ma, -2] = 1.0
    jac[ma:, -1] = 1.0
    return jac


def measurement_weights(epoch: EpochMeasurements) -> np.ndarray:
    """1/σ² per pseudorange; unit weights when every σ is zero, otherwise σ floored at 1e-6·max σ."""
    sigma = np.concatenate([epoch.noise.sigma_a, epoch.noise.sigma_b])
    top = float(sigma.max())
    if top == 0.0:
        return np.ones_like(sigma)
    return 1.0 / np.maximum(sigma, SIGMA_FLOOR_REL * top) ** 2


def _finish(theta: np.ndarray, iteration: int, converged: bool, step_norm: float, rho, pos_a, pos_b, weights) -> IterState:
    resid = rho - predicted_pseudoranges(pos_a, pos_b, theta)
    gradient = pseudorange_jacobian(pos_a, pos_b, theta).T @ (weights * resid)
    return IterState(
        estimate=theta,
        iteration=iteration,
        converged=converged,
        last_step_norm=step_norm,
        cost=float(weights @ resid**2),
        gradient_norm=float(np.linalg.norm(gradient)),
    )


def iterative_solve(
    scenario: Scenario,
    epoch: EpochMeasurements,
    init: IterState | None = None,
    config: IterativeConfig | None = None,
) -> IterState:
    """Weighted Gauss-Newton on the pseudorange model with two clock-offset ranges.

    Inputs:
        scenario: Anchor geometry.
        epoch: Pseudoranges and sigmas.
        init: Starting state; defaults to the anchor centroid with zero clocks.
        config: Iteration limit, step tolerance and step-halving budget.

    Output:
        Final `IterState`. `converged` is False when the iteration limit is
        reached or no halving lowers the cost.

    Raises:
        DegenerateGeometryError: when the normal matrix is singular.
    """
    cfg = config or IterativeConfig()
    epoch.check_against(scenario)
    if scenario.m + scenario.n < scenario.dim + 2:
        raise ValidationError("too few pseudoranges for position plus two clocks", code="TOO_FEW_ANCHORS")
    pos_a, pos_b = scenario.positions_a, scenario.positions_b
    rho = np.concatenate([epoch.rho_a_arr, epoch.rho_b_arr])
    weights = measurement_weights(epoch)

    if init is None:
        theta = np.concatenate([scenario.centroid, [0.0, 0.0]])
    else:
        theta = np.array(init.estimate, dtype=float)
        if theta.shape != (scenario.dim + 2,):
            raise ValidationError("initial state has the wrong length", code="DIM_MISMATCH")

    resid = rho - predicted_pseudoranges(pos_a, pos_b, theta)
    cost = float(weights @ resid**2)
    step_norm = np.inf
    for iteration in range(1, cfg.max_iters + 1):
        jac = pseudorange_jacobian(pos_a, pos_b, theta)
        weighted_jac = jac * weights[:, None]
        try:
            step = np.linalg.solve(jac.T @ weighted_jac, weighted_jac.T @ resid)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError("normal matrix is singular", code="RANK_DEFICIENT") from exc
        if not np.all(np.isfinite(step)):
            raise DegenerateGeometryError("normal matrix is singular", code="RANK_DEFICIENT")

        step_norm = float(np.linalg.norm(step))
        if step_norm < cfg.step_tol_m:
            theta = theta + step
            return _finish(theta, iteration, True, step_norm, rho, pos_a, pos_b, weights)

        trial = theta + step
        trial_resid = rho - predicted_pseudoranges(pos_a, pos_b, trial)
        trial_cost = float(weights @ trial_resid**2)
        halvings = 0
        while trial_cost > cost and halvings < cfg.max_halvings:
            step = 0.5 * step
            halvings += 1
            trial = theta + step
            trial_resid = rho - predicted_pseudoranges(pos_a, pos_b, trial)
            trial_cost = float(weights @ trial_resid**2)
        if trial_cost > cost:
            return _finish(theta, iteration, False, float(np.linalg.norm(step)), rho, pos_a, pos_b, weights)
        theta, resid, cost = trial, trial_resid, trial_cost
        step_norm = float(np.linalg.norm(step))
    return _finish(theta, cfg.max_iters, False, step_norm, rho, pos_a, pos_b, weights)
