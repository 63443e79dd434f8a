from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from datetime import datetime
from pathlib import Path

from dual_positioning.cache import NoOpSweepCache, SweepCache
from dual_positioning.config import configure_logging, get_settings
from dual_positioning.errors import NoSolutionError, SolverError, ValidationError
from dual_positioning.models import NoiseModel, Position, ScenePreset
from dual_positioning.reporting import FORMATS, emit_results
from dual_positioning.service import SOLVE_METHODS, PositioningService
from dual_positioning.simulation import CRLB_MODES


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_SOLUTION = 3
EXIT_IO = 4


def build_service() -> PositioningService:
    """Construct the application service with config and cache.

    Output:
        Initialised `PositioningService`.
    """
    settings = get_settings()
    cache = SweepCache(settings.cache_path) if settings.cache_enabled else NoOpSweepCache()
    return PositioningService(settings=settings, cache=cache)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (default: DEFAULT_SEED)")
    common.add_argument(
        "--method",
        action="append",
        choices=SOLVE_METHODS,
        default=None,
        help="Method to run; repeat for several (solve/batch use the first)",
    )
    common.add_argument("--simplified-score", action="store_true", help="Use the unweighted candidate score")
    common.add_argument("--strict", action="store_true", help="Abort on malformed epoch data or a missing solution")
    common.add_argument("--output", type=Path, default=None, help="Write results here instead of stdout")
    common.add_argument("--save", action="store_true", help="Also write results under OUTPUT_DIR/<timestamp>/")
    common.add_argument("--format", choices=FORMATS, default="csv")
    common.add_argument("--log-level", default=None)
    return common


def _add_scene_source(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--preset", default="2d", help="Built-in scene: 2d or 3d")
    source.add_argument("--scenario", type=Path, default=None, help="JSON scenario file with a ud_region")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}", code="INVALID_VALUE") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(description="Closed-form dual-system positioning")
    subparsers = parser.add_subparsers(dest="command", required=True)

    solve_parser = subparsers.add_parser("solve", parents=[common], help="Solve one epoch from an epoch file")
    solve_parser.add_argument("--epochs", type=Path, required=True)
    solve_parser.add_argument("--epoch-id", default=None, help="Epoch to solve (default: the first)")

    batch_parser = subparsers.add_parser("batch", parents=[common], help="Solve every epoch of an epoch file")
    batch_parser.add_argument("--epochs", type=Path, required=True)
    batch_parser.add_argument("--workers", type=int, default=None)

    sim_parser = subparsers.add_parser("simulate", parents=[common], help="Monte-Carlo runs at one sigma")
    _add_scene_source(sim_parser)
    sim_parser.add_argument("--sigma", type=float, default=1.0)
    sim_parser.add_argument("--runs", type=int, default=None)
    sim_parser.add_argument("--write-epochs", type=Path, default=None, help="Also write a synthetic epoch file")
    sim_parser.add_argument("--count", type=int, default=10, help="Epochs in the synthetic file")

    sweep_parser = subparsers.add_parser("sweep", parents=[common], help="Monte-Carlo noise sweep")
    _add_scene_source(sweep_parser)
    sweep_parser.add_argument("--runs", type=int, default=None)
    sweep_parser.add_argument("--grid", default=None, help="Comma-separated sigma values, meters")
    sweep_parser.add_argument("--zero-step", action="store_true", help="Prepend a noiseless step")
    sweep_parser.add_argument("--crlb-mode", choices=CRLB_MODES, default="center")
    sweep_parser.add_argument("--no-cache", action="store_true")

    crlb_parser = subparsers.add_parser("crlb", parents=[common], help="Error bound for a geometry")
    _add_scene_source(crlb_parser)
    crlb_parser.add_argument("--at", default=None, help="UD position x,y[,z] (default: UD region centre)")
    crlb_parser.add_argument("--sigma", type=float, default=None, help="Uniform sigma overriding the file's")

    bench_parser = subparsers.add_parser("bench", parents=[common], help="Runtime comparison CDL vs iterative")
    _add_scene_source(bench_parser)
    bench_parser.add_argument("--sigma", type=float, default=1.0)
    bench_parser.add_argument("--calls", type=int, default=None)

    ui_parser = subparsers.add_parser("ui", help="Launch Streamlit UI")
    ui_parser.add_argument("--host", default="127.0.0.1")
    ui_parser.add_argument("--port", default="8501")
    return parser


def main(argv: list[str] | None = None) -> int:
    """CLI entrypoint for solving, simulation, bounds, benchmarks and UI launch.

    Input:
        argv: Optional list of CLI args; defaults to process arguments.

    Output:
        Exit code: 0 success, 2 validation failure, 3 no solution on a strict
        solve, 4 I/O error.
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "ui":
        return _launch_ui(host=args.host, port=str(args.port))

    try:
        service = build_service()
        configure_logging(args.log_level or service.settings.log_level)
        payload = _run(service, args)
        _deliver(service, args, payload)
    except (NoSolutionError, SolverError) as exc:
        print(f"no solution: {exc}", file=sys.stderr)
        return EXIT_NO_SOLUTION
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _methods(args: argparse.Namespace, default: tuple[str, ...]) -> list[str]:
    return list(args.method) if args.method else list(default)


def _scene(service: PositioningService, args: argparse.Namespace) -> ScenePreset:
    if args.scenario is not None:
        config = service.load_scenario_config(args.scenario)
        return service.preset_from_config(config, name=args.scenario.stem)
    return service.load_preset(args.preset)


def _run(service: PositioningService, args: argparse.Namespace) -> bytes:
    options = service.solver_options(simplified=True if args.simplified_score else None)

    if args.command in {"solve", "batch"}:
        method = _methods(args, ("cdl",))[0]
        strict = args.strict or service.settings.strict_epochs
        epochs = service.load_epochs(args.epochs, strict=strict)
        if args.command == "solve":
            chosen = [e for e in epochs if args.epoch_id in (None, e.epoch_id)][:1]
            if not chosen:
                raise ValidationError(f"{args.epochs}: no epoch {args.epoch_id or ''} to solve", code="EMPTY")
            solutions = service.solve_batch(chosen, method=method, options=options, strict=strict, workers=1)
        else:
            solutions = service.solve_batch(epochs, method=method, options=options, strict=strict, workers=args.workers)
        return emit_results(solutions, args.format)

    if args.command == "simulate":
        preset = _scene(service, args)
        if args.write_epochs is not None:
            service.write_synthetic_epochs(args.write_epochs, preset, count=args.count, sigma=args.sigma, seed=args.seed)
        result = service.simulate(
            preset,
            args.sigma,
            methods=_methods(args, ("cdl", "iterative")),
            seed=args.seed,
            runs=args.runs,
            options=options,
        )
        return emit_results(result, args.format)

    if args.command == "sweep":
        result = service.sweep(
            _scene(service, args),
            methods=_methods(args, ("cdl", "iterative")),
            seed=args.seed,
            runs=args.runs,
            noise_grid=_parse_floats(args.grid) if args.grid else None,
            include_zero_step=args.zero_step,
            crlb_mode=args.crlb_mode,
            options=options,
            use_cache=not args.no_cache,
        )
        return emit_results(result, args.format)

    if args.command == "crlb":
        return emit_results(_crlb(service, args), "json")

    if args.command == "bench":
        return emit_results(
            service.bench(_scene(service, args), sigma=args.sigma, calls=args.calls, seed=args.seed), args.format
        )

    raise ValidationError(f"unknown command {args.command!r}", code="INVALID_VALUE")


def _crlb(service: PositioningService, args: argparse.Namespace):
    if args.scenario is not None:
        config = service.load_scenario_config(args.scenario)
        scenario, noise, options = config.scenario, config.noise, config.options
        region = config.ud_region
    else:
        preset = service.load_preset(args.preset)
        scenario, options, region = preset.scenario, service.solver_options(), preset.ud_region
        noise = NoiseModel.uniform(scenario.m, scenario.n, 1.0)
    if args.sigma is not None:
        noise = NoiseModel.uniform(scenario.m, scenario.n, args.sigma)
    if args.at is not None:
        point = Position.of(_parse_floats(args.at))
    elif region is not None:
        point = Position.of(region.center)
    else:
        point = Position.of(scenario.centroid)
    return service.crlb(scenario, point, noise, options.ref_a, options.ref_b)


def _deliver(service: PositioningService, args: argparse.Namespace, payload: bytes) -> None:
    if args.output is not None:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_bytes(payload)
        logger.info("wrote %s", args.output)
    else:
        sys.stdout.write(payload.decode("utf-8"))
    if args.save:
        saved = _write_output(service.settings.output_dir, payload, args.command, args.format)
        print(f"Saved results to: {saved}", file=sys.stderr)


def _launch_ui(*, host: str, port: str) -> int:
    """Start the Streamlit UI subprocess.

    Inputs:
        host: Bind address for the Streamlit server.
        port: Bind port for the Streamlit server.

    Output:
        Subprocess return code.
    """
    app_path = Path(__file__).resolve().parent / "ui.py"

    cmd = [
        sys.executable,
        "-m",
        "streamlit",
        "run",
        str(app_path),
        "--server.address",
        host,
        "--server.port",
        str(port),
    ]

    completed = subprocess.run(cmd, check=False)
    return int(completed.returncode)


def _write_output(output_root: Path, payload: bytes, command: str, fmt: str) -> Path:
    """Persist CLI output into a timestamped folder under the output directory."""
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    output_dir = output_root / timestamp
    output_dir.mkdir(parents=True, exist_ok=True)
    suffix = "json" if fmt == "json" or command == "crlb" else "csv"
    output_path = output_dir / f"{command}.{suffix}"
    output_path.write_bytes(payload)
    return output_path
