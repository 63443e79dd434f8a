from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from dual_positioning.analysis import crlb_report
from dual_positioning.cache import NoOpSweepCache, SweepCache
from dual_positioning.config import Settings
from dual_positioning.errors import DegenerateGeometryError, NoSolutionError, SolverError, ValidationError
from dual_positioning.ingestion import load_scenario_file, read_epochs_file, write_epochs
from dual_positioning.iterative import iterative_solve
from dual_positioning.models import (
    BenchReport,
    CrlbReport,
    EpochMeasurements,
    EpochSolution,
    LoadedEpoch,
    MethodStats,
    NoiseModel,
    Position,
    Scenario,
    ScenarioConfig,
    ScenePreset,
    SolverOptions,
    SweepResult,
    SweepStep,
    TruthState,
)
from dual_positioning.simulation import (
    benchmark,
    custom_preset,
    load_preset,
    resolve_methods,
    run_sweep,
    simulate,
    synthetic_epochs,
)
from dual_positioning.solver import cdl_solve


logger = logging.getLogger(__name__)

SOLVE_METHODS = ("cdl", "cdl-simplified", "iterative")


class PositioningService:
    def __init__(self, *, settings: Settings, cache: SweepCache | NoOpSweepCache) -> None:
        """Initialise the orchestration service used by CLI and UI layers.

        Inputs:
            settings: Runtime configuration (seed, workers, solver defaults).
            cache: Sweep cache backend.
        """
        self._settings = settings
        self._cache = cache

    @property
    def settings(self) -> Settings:
        """Expose immutable runtime settings."""
        return self._settings

    def solver_options(self, *, simplified: bool | None = None, base: SolverOptions | None = None) -> SolverOptions:
        options = base or self._settings.solver_options()
        return options if simplified is None else replace(options, simplified_score=simplified)

    def load_preset(self, name: str) -> ScenePreset:
        return load_preset(name)

    def load_scenario_config(self, path: Path) -> ScenarioConfig:
        """Parse a JSON scenario file on top of the settings' solver defaults."""
        return load_scenario_file(path, defaults=self._settings.solver_options())

    def preset_from_config(self, config: ScenarioConfig, name: str = "custom") -> ScenePreset:
        """Turn a scenario config with a `ud_region` into a sweepable preset."""
        if config.ud_region is None:
            raise ValidationError(
                f"{config.source or name}: scenario needs a ud_region block to be simulated", code="MISSING_FIELD"
            )
        return custom_preset(name, config.scenario, config.ud_region)

    def load_epochs(self, path: Path, *, strict: bool | None = None) -> list[LoadedEpoch]:
        diagnostics: list = []
        epochs = read_epochs_file(
            path,
            strict=self._settings.strict_epochs if strict is None else strict,
            diagnostics=diagnostics,
        )
        if diagnostics:
            logger.warning("%s: %d row(s) or epoch(s) skipped", path, len(diagnostics))
        return epochs

    def solve_epoch(
        self,
        scenario: Scenario,
        epoch: EpochMeasurements,
        *,
        method: str = "cdl",
        options: SolverOptions | None = None,
    ) -> EpochSolution:
        """Solve one epoch with the chosen method.

        Inputs:
            scenario: Anchor layout of the epoch.
            epoch: Pseudoranges and sigmas.
            method: `cdl`, `cdl-simplified` or `iterative`.
            options: CDL options; defaults come from settings.

        Output:
            `EpochSolution`. CDL failures raise `NoSolutionError`; an
            iterative run that stops early is returned with status
            `not_converged`.
        """
        if method not in SOLVE_METHODS:
            raise ValidationError(
                f"unknown method {method!r}; choose from {', '.join(SOLVE_METHODS)}", code="INVALID_VALUE"
            )
        if method == "iterative":
            state = iterative_solve(scenario, epoch)
            if not state.converged:
                logger.warning(
                    "epoch %s: iterative solve stopped after %d iterations (last step %.3g m)",
                    epoch.epoch_id or "?",
                    state.iteration,
                    state.last_step_norm,
                )
            return EpochSolution(
                epoch_id=epoch.epoch_id,
                method=method,
                position=state.position,
                score=state.cost,
                status="ok" if state.converged else "not_converged",
            )

        opts = options or self.solver_options()
        if method == "cdl-simplified":
            opts = replace(opts, simplified_score=True)
        result = cdl_solve(scenario, epoch, opts)
        if result.diagnostics.fallbacks or result.diagnostics.clamped:
            logger.info(
                "epoch %s: fallbacks=%s clamped=%s",
                epoch.epoch_id or "?",
                ",".join(result.diagnostics.fallbacks) or "-",
                ",".join(result.diagnostics.clamped) or "-",
            )
        return EpochSolution(epoch_id=epoch.epoch_id, method=method, position=result.position, score=result.chosen.score)

    def solve_batch(
        self,
        epochs: Sequence[LoadedEpoch],
        *,
        method: str = "cdl",
        options: SolverOptions | None = None,
        strict: bool = False,
        workers: int | None = None,
    ) -> list[EpochSolution]:
        """Solve every epoch; output order follows the input regardless of workers.

        Epochs without an admissible solution become `no_solution` rows
        unless `strict` is set, in which case the first failure is raised.
        """
        opts = options or self.solver_options()

        def one(loaded: LoadedEpoch) -> EpochSolution:
            try:
                return self.solve_epoch(loaded.scenario, loaded.measurements, method=method, options=opts)
            except NoSolutionError as exc:
                if strict:
                    raise
                logger.warning("epoch %s: no solution (%s)", loaded.epoch_id, exc.reason)
                return EpochSolution(epoch_id=loaded.epoch_id, method=method, position=None, status="no_solution")
            except (SolverError, DegenerateGeometryError) as exc:
                if strict:
                    raise
                logger.warning("epoch %s: %s", loaded.epoch_id, exc)
                return EpochSolution(epoch_id=loaded.epoch_id, method=method, position=None, status="solver_error")

        count = workers or self._settings.sweep_workers
        if count > 1 and len(epochs) > 1:
            with ThreadPoolExecutor(max_workers=count) as pool:
                return list(pool.map(one, epochs))
        return [one(loaded) for loaded in epochs]

    def simulate(
        self,
        preset: ScenePreset,
        sigma: float,
        *,
        methods: Sequence[str] = ("cdl", "iterative"),
        seed: int | None = None,
        runs: int | None = None,
        options: SolverOptions | None = None,
    ) -> SweepResult:
        return simulate(
            preset,
            sigma,
            self._seed(seed),
            methods,
            runs=runs,
            workers=self._settings.sweep_workers,
            options=options or self.solver_options(),
        )

    def sweep(
        self,
        preset: ScenePreset,
        *,
        methods: Sequence[str] = ("cdl", "iterative"),
        seed: int | None = None,
        runs: int | None = None,
        noise_grid: Sequence[float] | None = None,
        include_zero_step: bool = False,
        crlb_mode: str = "center",
        options: SolverOptions | None = None,
        use_cache: bool = True,
    ) -> SweepResult:
        """Run or load a cached noise sweep.

        Inputs:
            preset: Scene preset (built-in or from a scenario file).
            use_cache: Whether to attempt cache read/write.

        Output:
            `SweepResult`.
        """
        names = resolve_methods(methods)
        master_seed = self._seed(seed)
        opts = options or self.solver_options()
        grid = list(preset.noise_grid if noise_grid is None else noise_grid)
        run_count = preset.runs_per_step if runs is None else runs
        cache_key = self._cache.make_key(
            preset=preset,
            methods=names,
            seed=master_seed,
            runs=run_count,
            noise_grid=grid,
            options=opts,
            extra=f"zero={include_zero_step}|crlb={crlb_mode}",
        )

        if use_cache:
            cached = self._cache.get(cache_key)
            if cached:
                return _sweep_result_from_dict(cached)

        result = run_sweep(
            preset,
            names,
            master_seed,
            runs=run_count,
            noise_grid=grid,
            include_zero_step=include_zero_step,
            crlb_mode=crlb_mode,
            workers=self._settings.sweep_workers,
            options=opts,
        )

        if use_cache:
            self._cache.set(cache_key, result)
        return result

    def crlb(
        self,
        scenario: Scenario,
        p_u: Position,
        noise: NoiseModel,
        ref_a: int = 1,
        ref_b: int = 1,
    ) -> CrlbReport:
        return crlb_report(scenario, p_u, noise, ref_a, ref_b)

    def bench(
        self,
        preset: ScenePreset,
        *,
        sigma: float = 1.0,
        calls: int | None = None,
        seed: int | None = None,
    ) -> BenchReport:
        return benchmark(
            preset,
            sigma=sigma,
            calls=calls or self._settings.bench_calls,
            master_seed=self._seed(seed),
            options=self.solver_options(),
        )

    def synthetic_epochs(
        self,
        preset: ScenePreset,
        *,
        count: int = 10,
        sigma: float = 0.0,
        seed: int | None = None,
    ) -> list[tuple[TruthState, LoadedEpoch]]:
        return synthetic_epochs(preset, count, sigma, self._seed(seed))

    def write_synthetic_epochs(self, path: Path, preset: ScenePreset, **kwargs: Any) -> list[TruthState]:
        """Write a labelled synthetic epoch file and return the generating truths."""
        drawn = self.synthetic_epochs(preset, **kwargs)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            handle.write(f"# synthetic epochs generated on preset {preset.name}; not observed data\n")
            write_epochs([loaded for _, loaded in drawn], handle)
        logger.info("wrote %d synthetic epochs to %s", len(drawn), path)
        return [truth for truth, _ in drawn]

    def _seed(self, seed: int | None) -> int:
        return self._settings.default_seed if seed is None else int(seed)


def _sweep_result_from_dict(payload: dict[str, Any]) -> SweepResult:
    """Rehydrate a sweep result dataclass from cached JSON-like dict."""
    return SweepResult(
        preset=str(payload.get("preset", "")),
        master_seed=int(payload.get("master_seed", 0)),
        crlb_mode=str(payload.get("crlb_mode", "center")),
        steps=_steps_from(payload.get("steps", [])),
    )


def _number(value: Any) -> float:
    """JSON null stands for a non-finite value."""
    return math.nan if value is None else float(value)


def _steps_from(values: Any) -> list[SweepStep]:
    if not isinstance(values, list):
        return []

    steps: list[SweepStep] = []
    for value in values:
        if not isinstance(value, dict):
            continue
        errors = value.get("errors", {})
        steps.append(
            SweepStep(
                sigma_m=float(value.get("sigma_m", 0.0)),
                error_lb_m=_number(value.get("error_lb_m", 0.0)),
                methods=_method_stats_from(value.get("methods", [])),
                errors={str(k): [list(map(float, e)) for e in v] for k, v in errors.items()}
                if isinstance(errors, dict)
                else {},
            )
        )
    return steps


def _method_stats_from(values: Any) -> list[MethodStats]:
    if not isinstance(values, list):
        return []

    return [
        MethodStats(
            method=str(value.get("method", "")),
            rmse_m=_number(value.get("rmse_m")),
            attempted=int(value.get("attempted", 0)),
            succeeded=int(value.get("succeeded", 0)),
            failures=int(value.get("failures", 0)),
            median_us=_number(value.get("median_us", 0.0)),
        )
        for value in values
        if isinstance(value, dict)
    ]
