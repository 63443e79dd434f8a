from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Literal, Sequence

import numpy as np

from dual_positioning.errors import Location, ScenarioError, ValidationError


SystemId = Literal["A", "B"]
SYSTEMS: tuple[SystemId, SystemId] = ("A", "B")
COINCIDENCE_TOL_M = 1e-9


def frozen_array(values: Any, *, dtype: Any = float) -> np.ndarray:
    """Return a read-only float copy of `values`."""
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _float_tuple(values: Any, *, name: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in np.asarray(values, dtype=float).ravel())
    if not all(math.isfinite(v) for v in out):
        raise ValidationError(f"{name} contains non-finite values", code="NON_FINITE")
    return out


@dataclass(frozen=True)
class Position:
    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        coords = _float_tuple(self.coords, name="position")
        if len(coords) not in (2, 3):
            raise ValidationError(f"position must have 2 or 3 coordinates, got {len(coords)}", code="DIM_MISMATCH")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def of(cls, values: Any) -> "Position":
        """Build a position from any array-like of 2 or 3 coordinates."""
        if isinstance(values, Position):
            return values
        return cls(tuple(np.asarray(values, dtype=float).ravel().tolist()))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float)

    def translated(self, offset: Any) -> "Position":
        return Position.of(self.as_array() + np.asarray(offset, dtype=float))


@dataclass(frozen=True)
class Anchor:
    system: SystemId
    index: int
    position: Position
    label: str = ""

    def __post_init__(self) -> None:
        if self.system not in SYSTEMS:
            raise ValidationError(f"unknown system {self.system!r}", code="BAD_SYSTEM")
        if self.index < 1:
            raise ValidationError(f"anchor ordinals start at 1, got {self.index}", code="BAD_ORDINAL")


@dataclass(frozen=True)
class Scenario:
    """Anchor geometry for both systems.

    Construction validates every invariant: M, N >= 2, M + N >= K + 2,
    contiguous ordinals, a common dimension, and no coincident anchors
    within a system. `positions_a`, `positions_b` and `centroid` are cached
    read-only arrays.
    """

    anchors_a: tuple[Anchor, ...]
    anchors_b: tuple[Anchor, ...]
    dim: int
    positions_a: np.ndarray = field(init=False, repr=False, compare=False)
    positions_b: np.ndarray = field(init=False, repr=False, compare=False)
    centroid: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchors_a", tuple(self.anchors_a))
        object.__setattr__(self, "anchors_b", tuple(self.anchors_b))
        if self.dim not in (2, 3):
            raise ScenarioError(f"dimension must be 2 or 3, got {self.dim}", code="DIM_MISMATCH")
        if len(self.anchors_a) < 2:
            raise ScenarioError(
                f"system A needs a reference plus at least one other anchor: M < 2 (M={len(self.anchors_a)})",
                code="M_LT_2",
            )
        if len(self.anchors_b) < 2:
            raise ScenarioError(
                f"system B needs a reference plus at least one other anchor: N < 2 (N={len(self.anchors_b)})",
                code="N_LT_2",
            )
        if len(self.anchors_a) + len(self.anchors_b) < self.dim + 2:
            raise ScenarioError(
                f"M + N must be at least K + 2 = {self.dim + 2}", code="TOO_FEW_ANCHORS"
            )
        for system, anchors in (("A", self.anchors_a), ("B", self.anchors_b)):
            for expected, anchor in enumerate(anchors, start=1):
                if anchor.system != system:
                    raise ScenarioError(f"anchor {anchor.index} tagged {anchor.system} listed under {system}", code="BAD_SYSTEM")
                if anchor.index != expected:
                    raise ScenarioError(
                        f"system {system} ordinals must be contiguous from 1; found {anchor.index} at slot {expected}",
                        code="BAD_ORDINAL",
                    )
                if anchor.position.dim != self.dim:
                    raise ScenarioError(
                        f"anchor {system}{anchor.index} has {anchor.position.dim} coordinates, scenario is {self.dim}D",
                        code="DIM_MISMATCH",
                    )

        pos_a = frozen_array([a.position.coords for a in self.anchors_a])
        pos_b = frozen_array([b.position.coords for b in self.anchors_b])
        for system, pos in (("A", pos_a), ("B", pos_b)):
            gaps = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
            gaps[np.diag_indices(len(pos))] = np.inf
            if gaps.min() <= COINCIDENCE_TOL_M:
                i, j = np.unravel_index(int(np.argmin(gaps)), gaps.shape)
                raise ScenarioError(
                    f"anchors {system}{i + 1} and {system}{j + 1} coincide", code="COINCIDENT_ANCHORS"
                )
        object.__setattr__(self, "positions_a", pos_a)
        object.__setattr__(self, "positions_b", pos_b)
        object.__setattr__(self, "centroid", frozen_array(np.vstack([pos_a, pos_b]).mean(axis=0)))

    @classmethod
    def from_arrays(
        cls,
        positions_a: Any,
        positions_b: Any,
        *,
        labels_a: Sequence[str] | None = None,
        labels_b: Sequence[str] | None = None,
    ) -> "Scenario":
        """Build a scenario from two (count x K) coordinate arrays."""
        pos_a = np.atleast_2d(np.asarray(positions_a, dtype=float))
        pos_b = np.atleast_2d(np.asarray(positions_b, dtype=float))
        if pos_a.shape[1] != pos_b.shape[1]:
            raise ScenarioError(
                f"system A is {pos_a.shape[1]}D but system B is {pos_b.shape[1]}D", code="DIM_MISMATCH"
            )
        labels_a = list(labels_a or [""] * len(pos_a))
        labels_b = list(labels_b or [""] * len(pos_b))
        anchors_a = tuple(
            Anchor("A", i + 1, Position.of(p), labels_a[i]) for i, p in enumerate(pos_a)
        )
        anchors_b = tuple(
            Anchor("B", j + 1, Position.of(p), labels_b[j]) for j, p in enumerate(pos_b)
        )
        return cls(anchors_a=anchors_a, anchors_b=anchors_b, dim=int(pos_a.shape[1]))

    @property
    def m(self) -> int:
        return len(self.anchors_a)

    @property
    def n(self) -> int:
        return len(self.anchors_b)

    def translated(self, offset: Any) -> "Scenario":
        shift = np.asarray(offset, dtype=float)
        return Scenario.from_arrays(
            self.positions_a + shift,
            self.positions_b + shift,
            labels_a=[a.label for a in self.anchors_a],
            labels_b=[b.label for b in self.anchors_b],
        )


@dataclass(frozen=True)
class TruthState:
    p_u: Position
    b_a: float = 0.0
    b_b: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_u", Position.of(self.p_u))
        if not (math.isfinite(self.b_a) and math.isfinite(self.b_b)):
            raise ValidationError("clock-offset ranges must be finite", code="NON_FINITE")


@dataclass(frozen=True)
class NoiseModel:
    sigma_a: tuple[float, ...]
    sigma_b: tuple[float, ...]
    var_a: np.ndarray = field(init=False, repr=False, compare=False)
    var_b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sigma_a = _float_tuple(self.sigma_a, name="sigma_a")
        sigma_b = _float_tuple(self.sigma_b, name="sigma_b")
        if min(sigma_a + sigma_b, default=0.0) < 0.0:
            raise ValidationError("noise sigmas must be >= 0", code="NEGATIVE_SIGMA")
        object.__setattr__(self, "sigma_a", sigma_a)
        object.__setattr__(self, "sigma_b", sigma_b)
        object.__setattr__(self, "var_a", frozen_array(np.square(sigma_a)))
        object.__setattr__(self, "var_b", frozen_array(np.square(sigma_b)))

    @classmethod
    def uniform(cls, m: int, n: int, sigma: float) -> "NoiseModel":
        return cls((sigma,) * m, (sigma,) * n)

    @property
    def all_zero(self) -> bool:
        return max(self.sigma_a + self.sigma_b) == 0.0

    @property
    def all_positive(self) -> bool:
        return min(self.sigma_a + self.sigma_b) > 0.0


@dataclass(frozen=True)
class EpochMeasurements:
    rho_a: tuple[float, ...]
    rho_b: tuple[float, ...]
    noise: NoiseModel
    epoch_id: str = ""
    rho_a_arr: np.ndarray = field(init=False, repr=False, compare=False)
    rho_b_arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        rho_a = _float_tuple(self.rho_a, name="rho_a")
        rho_b = _float_tuple(self.rho_b, name="rho_b")
        if len(rho_a) != len(self.noise.sigma_a) or len(rho_b) != len(self.noise.sigma_b):
            raise ValidationError("pseudorange and sigma vectors differ in length", code="DIM_MISMATCH")
        object.__setattr__(self, "rho_a", rho_a)
        object.__setattr__(self, "rho_b", rho_b)
        object.__setattr__(self, "rho_a_arr", frozen_array(rho_a))
        object.__setattr__(self, "rho_b_arr", frozen_array(rho_b))

    def check_against(self, scenario: Scenario) -> None:
        """Raise when the epoch does not match the scenario's M and N."""
        if len(self.rho_a) != scenario.m or len(self.rho_b) != scenario.n:
            raise ValidationError(
                f"epoch has {len(self.rho_a)}+{len(self.rho_b)} pseudoranges, scenario has {scenario.m}+{scenario.n} anchors",
                code="DIM_MISMATCH",
            )


@dataclass(frozen=True, eq=False)
class TdoaSet:
    d_a: np.ndarray
    d_b: np.ndarray
    ref_a: int = 1
    ref_b: int = 1


@dataclass(frozen=True, eq=False)
class LinearStage:
    g_mat: np.ndarray
    c_mat: np.ndarray
    h_vec: np.ndarray
    s_mat: np.ndarray
    g_vec: np.ndarray


@dataclass(frozen=True)
class QuadraticPair:
    a1: float
    b1: float
    c1: float
    d1: float
    e1: float
    f1: float
    a2: float
    b2: float
    c2: float
    d2: float
    e2: float
    f2: float

    def first(self) -> tuple[float, float, float, float, float, float]:
        return (self.a1, self.b1, self.c1, self.d1, self.e1, self.f1)

    def second(self) -> tuple[float, float, float, float, float, float]:
        return (self.a2, self.b2, self.c2, self.d2, self.e2, self.f2)

    def swapped(self) -> "QuadraticPair":
        """Relabel quadratic 2 as quadratic 1 and vice versa."""
        return QuadraticPair(*self.second(), *self.first())


@dataclass(frozen=True)
class EliminationCoeffs:
    t1: float
    t2: float
    t3: float
    t4: float
    t5: float


@dataclass(frozen=True)
class QuarticCoeffs:
    alpha: float
    beta: float
    gamma: float
    lam: float
    mu: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        """Coefficients from the x⁴ term down to the constant."""
        return (self.alpha, self.beta, self.gamma, self.lam, self.mu)


@dataclass(frozen=True)
class RootPair:
    r_a1: float
    r_b1: float


@dataclass(frozen=True)
class RejectedRoot:
    x: complex
    y: complex | None
    reason: str


@dataclass(frozen=True)
class PairSolution:
    pairs: list[RootPair]
    rejected: list[RejectedRoot] = field(default_factory=list)


@dataclass(frozen=True)
class Tolerances:
    rank_rel: float = 1e-8
    imag_rel: float = 1e-7
    negative_root_m: float = 1e-6
    case1_rel: float = 1e-9
    verify_rel: float = 1e-6
    tie_rel: float = 1e-12
    jitter_rel: float = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    ref_a: int = 1
    ref_b: int = 1
    simplified_score: bool = False
    range_floor_m: float = 1e-3
    center_frame: bool = True
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self) -> None:
        if self.ref_a < 1 or self.ref_b < 1:
            raise ValidationError("reference ordinals start at 1", code="BAD_ORDINAL")
        if not self.range_floor_m > 0.0:
            raise ValidationError("range floor must be > 0", code="INVALID_VALUE")

    @classmethod
    def from_settings(cls, settings: Any) -> "SolverOptions":
        """Defaults taken from a `Settings` instance (`simplified_score`, `range_floor_m`)."""
        return cls(simplified_score=settings.simplified_score, range_floor_m=settings.range_floor_m)


@dataclass(frozen=True, eq=False)
class WeightModel:
    d_diag: np.ndarray
    q_mat: np.ndarray
    w_mat: np.ndarray
    bypassed: bool = False
    # M with W⁻¹ = MᵀM; None when bypassed
    whiten: np.ndarray | None = None
    jittered: bool = False


@dataclass(frozen=True, eq=False)
class CandidateSolution:
    roots: RootPair
    position: Position
    residual_vec: np.ndarray
    score: float


@dataclass(frozen=True)
class SolveDiagnostics:
    candidate_count: int = 0
    rejected: list[RejectedRoot] = field(default_factory=list)
    clamped: list[str] = field(default_factory=list)
    fallbacks: list[str] = field(default_factory=list)
    tie: bool = False


@dataclass(frozen=True, eq=False)
class CdlResult:
    position: Position
    chosen: CandidateSolution
    all_candidates: list[CandidateSolution]
    diagnostics: SolveDiagnostics


@dataclass(frozen=True)
class IterativeConfig:
    max_iters: int = 50
    step_tol_m: float = 1e-6
    max_halvings: int = 8


@dataclass(frozen=True, eq=False)
class IterState:
    estimate: np.ndarray
    iteration: int = 0
    converged: bool = False
    last_step_norm: float = math.inf
    cost: float = math.inf
    gradient_norm: float = math.inf

    @property
    def position(self) -> Position:
        return Position.of(self.estimate[:-2])

    @property
    def b_a(self) -> float:
        return float(self.estimate[-2])

    @property
    def b_b(self) -> float:
        return float(self.estimate[-1])


@dataclass(frozen=True, eq=False)
class LosGeometry:
    l_a: np.ndarray
    l_b: np.ndarray
    h_mat: np.ndarray


@dataclass(frozen=True, eq=False)
class CrlbReport:
    fim_tdoa: np.ndarray
    crlb_tdoa: np.ndarray
    error_lb: float
    f11: np.ndarray
    f12: np.ndarray
    f22: np.ndarray
    j_pos_inverse: np.ndarray


@dataclass(frozen=True, eq=False)
class QInverseClosedForm:
    diag_part: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray

    def matrix(self) -> np.ndarray:
        """Reassemble Q⁻¹ = diag(1/σ²) - blockdiag(X_A, X_B)."""
        ma = self.x_a.shape[0]
        out = np.diag(self.diag_part).astype(float)
        out[:ma, :ma] -= self.x_a
        out[ma:, ma:] -= self.x_b
        return out


@dataclass(frozen=True)
class Box:
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self) -> None:
        low = _float_tuple(self.low, name="box.low")
        high = _float_tuple(self.high, name="box.high")
        if len(low) != len(high) or any(lo > hi for lo, hi in zip(low, high)):
            raise ValidationError("box bounds must match in length with low <= high", code="BAD_BOX")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def centered(cls, center: Sequence[float], half_width: float) -> "Box":
        return cls(tuple(c - half_width for c in center), tuple(c + half_width for c in center))

    @property
    def center(self) -> tuple[float, ...]:
        return tuple(0.5 * (lo + hi) for lo, hi in zip(self.low, self.high))


@dataclass(frozen=True)
class ScenePreset:
    name: str
    scenario: Scenario
    ud_region: Box
    noise_grid: tuple[float, ...]
    runs_per_step: int
    note: str = ""

    def __post_init__(self) -> None:
        if self.runs_per_step < 1:
            raise ValidationError("runs_per_step must be >= 1", code="BAD_RUNS")
        if len(self.ud_region.low) != self.scenario.dim:
            raise ValidationError("UD region and scenario dimensions differ", code="DIM_MISMATCH")


@dataclass(frozen=True)
class MethodStats:
    method: str
    rmse_m: float
    attempted: int
    succeeded: int
    failures: int
    median_us: float = 0.0


@dataclass(frozen=True)
class SweepStep:
    sigma_m: float
    error_lb_m: float
    methods: list[MethodStats]
    errors: dict[str, list[list[float]]] = field(default_factory=dict)

    def stats(self, method: str) -> MethodStats:
        for entry in self.methods:
            if entry.method == method:
                return entry
        raise KeyError(method)


@dataclass(frozen=True)
class SweepResult:
    preset: str
    master_seed: int
    crlb_mode: str
    steps: list[SweepStep]

    @property
    def method_names(self) -> list[str]:
        return [m.method for m in self.steps[0].methods] if self.steps else []


@dataclass(frozen=True)
class BenchStats:
    method: str
    calls: int
    median_us: float
    iqr_us: float
    failures: int = 0


@dataclass(frozen=True)
class BenchReport:
    preset: str
    sigma_m: float
    stats: list[BenchStats]
    ratio: float


@dataclass(frozen=True)
class EpochRow:
    epoch_id: str
    system: SystemId
    anchor_id: str
    position: tuple[float, ...]
    pseudorange_m: float
    sigma_m: float
    location: Location = field(default_factory=Location, compare=False)


@dataclass(frozen=True)
class EpochRecord:
    epoch_id: str
    rows: list[EpochRow]


@dataclass(frozen=True)
class LoadedEpoch:
    epoch_id: str
    scenario: Scenario
    measurements: EpochMeasurements


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    noise: NoiseModel
    options: SolverOptions = field(default_factory=SolverOptions)
    ud_region: Box | None = None
    source: str = field(default="", compare=False)


@dataclass(frozen=True)
class EpochSolution:
    epoch_id: str
    method: str
    position: Position | None
    score: float = math.nan
    status: str = "ok"


def dataclass_to_dict(value: Any) -> Any:
    """Convert a dataclass graph into JSON-ready plain values.

    Input:
        Any Python object, typically one of this module's dataclasses.

    Output:
        Nested `dict`/`list`/scalar structure; numpy arrays become lists,
        complex numbers become `[real, imag]` pairs and non-finite floats
        become `None` so the result is strict JSON.
    """
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: dataclass_to_dict(getattr(value, f.name)) for f in fields(value) if f.init}
    if isinstance(value, np.ndarray):
        return dataclass_to_dict(value.tolist())
    if isinstance(value, (np.floating, np.integer)):
        return dataclass_to_dict(value.item())
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, complex):
        return [dataclass_to_dict(value.real), dataclass_to_dict(value.imag)]
    if isinstance(value, dict):
        return {str(k): dataclass_to_dict(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [dataclass_to_dict(v) for v in value]
    return value
