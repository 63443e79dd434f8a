from __future__ import annotations

import numpy as np

from dual_positioning.errors import ValidationError
from dual_positioning.models import EpochMeasurements, NoiseModel, Position, Scenario, TruthState


def derive_seed(master_seed: int, *keys: int) -> int:
    """Split a master seed into an independent child seed.

    Inputs:
        master_seed: Non-negative run-level seed.
        keys: Non-negative integers naming the child stream (step, run, ...).

    Output:
        The first 64-bit word of `SeedSequence([master_seed, *keys])`, so the
        same keys always give the same child on every platform.
    """
    entropy = [int(master_seed), *(int(k) for k in keys)]
    if any(value < 0 for value in entropy):
        raise ValidationError("seed and keys must be non-negative", code="INVALID_VALUE")
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def anchor_distances(positions: np.ndarray, point: np.ndarray) -> np.ndarray:
    return np.linalg.norm(positions - point, axis=1)


def check_point(scenario: Scenario, p_u: Position) -> np.ndarray:
    point = Position.of(p_u).as_array()
    if point.shape[0] != scenario.dim:
        raise ValidationError(
            f"position is {point.shape[0]}D but scenario is {scenario.dim}D", code="DIM_MISMATCH"
        )
    return point


def true_ranges(scenario: Scenario, p_u: Position) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distances from `p_u` to every anchor of A, then of B."""
    point = check_point(scenario, p_u)
    return anchor_distances(scenario.positions_a, point), anchor_distances(scenario.positions_b, point)


def pseudoranges(scenario: Scenario, truth: TruthState) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless pseudoranges: true ranges plus each system's clock-offset range."""
    r_a, r_b = true_ranges(scenario, truth.p_u)
    return r_a + truth.b_a, r_b + truth.b_b


def forward_model(
    scenario: Scenario,
    truth: TruthState,
    noise: NoiseModel,
    rng_seed: int,
    *,
    epoch_id: str = "",
) -> EpochMeasurements:
    """Simulate one epoch of pseudoranges.

    Inputs:
        scenario: Anchor geometry.
        truth: UD position and clock-offset ranges.
        noise: Per-anchor Gaussian sigmas.
        rng_seed: Seed for a PCG64 generator; system A is drawn before B.

    Output:
        `EpochMeasurements` carrying the noisy pseudoranges and `noise`.
    """
    if len(noise.sigma_a) != scenario.m or len(noise.sigma_b) != scenario.n:
        raise ValidationError(
            f"noise model has {len(noise.sigma_a)}+{len(noise.sigma_b)} sigmas, scenario has {scenario.m}+{scenario.n} anchors",
            code="DIM_MISMATCH",
        )
    rho_a, rho_b = pseudoranges(scenario, truth)
    rng = np.random.default_rng(rng_seed)
    rho_a = rho_a + rng.standard_normal(scenario.m) * np.asarray(noise.sigma_a)
    rho_b = rho_b + rng.standard_normal(scenario.n) * np.asarray(noise.sigma_b)
    return EpochMeasurements(tuple(rho_a.tolist()), tuple(rho_b.tolist()), noise, epoch_id)
