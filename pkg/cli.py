"""
Batch command-line interface.

    python cli.py simulate --config run.json [--output DIR] [--seed N] [--force] [--integrator] [--svg]
    python cli.py reconstruct --config run.json | TRACE.csv ... [--truth rho.json]
    python cli.py sweep --config run.json [--integrator] [--svg]
    python cli.py paper-figures [--output DIR] [--samples N] [--svg]

Exit codes: 0 success, 1 other failure, 2 invalid configuration,
3 analytic-model validity violated (override with --force),
4 reconstruction did not converge (result still written).
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from config import settings
from models.schemas import (
    FIGURE_PULSES,
    NoiseSpec,
    ProbeConfig,
    PulseAngles,
    RunConfig,
    SweepConfig,
    TransitionSpec,
)
from services.forward import check_validity, default_time_grid, signal
from services.liouville import integrated_signal
from services.measure import design_matrix, fit_envelope, reference_amplitude, add_noise
from services.montecarlo import STATE_CLASSES, sweep_service, sweep_table_to_csv, sweep_table_to_svg
from services.qstate import DensityMatrix, random_mixed, random_pure, reference_state
from services.reconstruct import reconstruction_service
from utils.errors import ConfigError, ModelValidityError, QtomoError
from utils.trace_io import (
    plot_traces,
    read_density,
    load_state,
    read_traces,
    write_density,
    write_matrix_magnitudes,
    write_result,
    write_trace,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_VALIDITY = 3
EXIT_NOT_CONVERGED = 4


class NotConverged(Exception):
    """Raised after the result file is written when the minimizer did not converge."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _pointer(loc) -> str:
    return "/" + "/".join(str(part) for part in loc)


def load_config(path: Optional[str]) -> RunConfig:
    """
    Raises:
        ConfigError: Missing file, invalid JSON or schema violations (reported as JSON pointers)
    """
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        details = "; ".join(f"{_pointer(err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid config {path}: {details}") from e


def resolve_seed(args, config: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if config.seed is not None:
        return config.seed
    return settings.default_seed


def resolve_output(args, config: RunConfig) -> Path:
    output = getattr(args, "output", None) or config.output_dir or settings.output_dir
    return Path(output)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _simulate_traces(rho, pulses, spec, probe, snr, seed, integrator: bool):
    times = default_time_grid(probe)
    noise_seeds = np.random.SeedSequence(seed).generate_state(len(pulses))
    reference = reference_amplitude(spec, probe, times) if snr is not None else None
    traces = []
    for pulse, noise_seed in zip(pulses, noise_seeds):
        if integrator:
            trace = integrated_signal(rho, pulse, spec, probe, times=times)
        else:
            trace = signal(rho, pulse, spec, probe, times, seed=seed)
        if snr is not None:
            trace = add_noise(trace, NoiseSpec(snr=snr, seed=int(noise_seed), reference_amplitude=reference))
        traces.append(trace)
    return traces


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    output = resolve_output(args, config)
    check_validity(config.probe, force=args.force)
    rho = load_state(config.state, seed)

    logger.info(f"Step 1: simulating {len(config.pulses)} traces")
    traces = _simulate_traces(
        rho, config.pulses, config.transition, config.probe, config.noise.snr, seed, args.integrator
    )

    logger.info(f"Step 2: writing traces to {output}")
    for k, trace in enumerate(traces):
        write_trace(trace, output / f"trace_{k}.csv")
    write_density(rho, output / "state.json")
    if args.svg:
        plot_traces(traces, output / "traces.svg")
    return EXIT_OK


def _report(result, output: Path) -> int:
    write_result(result, output / "result.json")
    if result.fidelity_vs_truth is not None:
        print(f"fidelity {result.fidelity_vs_truth:.9f}")
    for warning in result.warnings:
        logger.warning(warning)
    if not result.converged:
        raise NotConverged("reconstruction did not converge")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    output = resolve_output(args, config)
    truth_file = args.truth or config.truth_file
    truth = None
    if truth_file is not None:
        try:
            truth = read_density(truth_file)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot load truth file {truth_file}: {e}") from e

    if args.traces:
        try:
            traces = read_traces(args.traces)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read traces: {e}") from e
        for trace in traces:
            if trace.meta is None:
                raise ConfigError("trace files need their .meta.json sidecar")
            check_validity(trace.meta.probe, force=args.force)
        result = reconstruction_service.from_traces(traces, truth=truth, seed=seed)
    else:
        check_validity(config.probe, force=args.force)
        rho = truth if truth is not None else load_state(config.state, seed)
        result = reconstruction_service.from_state(
            rho,
            config.pulses,
            config.transition,
            config.probe,
            snr=config.noise.snr,
            angle_sigma=config.noise.angle_sigma,
            seed=seed,
        )
    return _report(result, output)


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    if config.sweep is None:
        raise ConfigError("sweep command needs a 'sweep' section")
    if config.sweep.axis == "kappa2" and not args.integrator:
        raise ConfigError("kappa2 sweeps run the master equation; pass --integrator")
    check_validity(config.probe, force=args.force)
    output = resolve_output(args, config)
    sweep = config.sweep
    if args.seed is not None:
        sweep = sweep.model_copy(update={"seed": args.seed})
    rows = sweep_service.run(sweep, config.transition, config.probe)
    sweep_table_to_csv(rows, output / "sweep.csv")
    if args.svg:
        sweep_table_to_svg(rows, output / "sweep.svg", sweep.axis)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

FIGURE_PROBE = ProbeConfig(detuning=1000.0, rabi=1.0, gamma_e=1000.0, gamma_g=0.05, larmor=1.0)

# The mixed-state reconstruction uses pi/4 pulses instead of pi/2.
MIXED_FIGURE_PULSES = [
    PulseAngles(phi=0.0, theta=0.0),
    PulseAngles(phi=0.0, theta=math.pi / 4),
    PulseAngles(phi=math.pi / 4, theta=0.0),
    PulseAngles(phi=math.pi / 4, theta=math.pi / 4),
]

SWEEP_GRIDS = {
    "fig3/snr": ("snr", [1.0, 3.0, 10.0, 30.0, 100.0]),
    "fig3/angle_sigma": ("angle_sigma", [0.0, 0.01, 0.03, 0.1, 0.3]),
    "fig4/n_measurements": ("n_measurements", [1, 2, 3, 4, 5, 6]),
    "fig4/kappa2": ("kappa2", [1e-4, 1e-3, 1e-2, 1e-1, 1.0]),
}


def _reconstruction_figure(name: str, rho: DensityMatrix, pulses, output: Path, seed: int, svg: bool):
    """Traces, fits, true and reconstructed matrices of one run at SNR 25."""
    spec = TransitionSpec()
    traces = _simulate_traces(rho, pulses, spec, FIGURE_PROBE, 25.0, seed, integrator=False)
    directory = output / name
    fitted_curves = []
    for k, trace in enumerate(traces):
        write_trace(trace, directory / f"trace_{k}.csv")
        fit = fit_envelope(trace, FIGURE_PROBE.larmor, FIGURE_PROBE.gamma_g)
        fitted_curves.append(design_matrix(trace.times, FIGURE_PROBE.larmor, FIGURE_PROBE.gamma_g) @ [fit.A, fit.B, fit.C])
        (directory / f"fit_{k}.json").write_text(fit.model_dump_json(indent=2))
    result = reconstruction_service.from_traces(traces, truth=rho, seed=seed)
    write_result(result, directory / "result.json")
    write_density(rho, directory / "true.json")
    write_matrix_magnitudes(rho, directory / "true_abs.json")
    write_matrix_magnitudes(DensityMatrix.from_payload(result.rho), directory / "reconstructed_abs.json")
    if svg:
        plot_traces(traces, directory / "traces.svg", fitted_curves)
    logger.info(f"{name}: fidelity {result.fidelity_vs_truth:.6f}")
    return result


def cmd_paper_figures(args) -> int:
    output = Path(args.output or settings.output_dir)
    seed = args.seed if args.seed is not None else settings.default_seed
    samples = args.samples or settings.desk_samples_per_point
    if samples < 30:
        raise ConfigError("--samples must be at least 30 for beta fitting")
    n_states = 10 if samples >= 300 else max(1, samples // 30)
    n_repeats = math.ceil(samples / n_states)

    logger.info("Step 1: reconstruction figures")
    _reconstruction_figure("fig1", random_pure(seed=seed), FIGURE_PULSES, output, seed, args.svg)
    _reconstruction_figure(
        "fig2", random_mixed(seed=seed + 1, target_purity=0.6), MIXED_FIGURE_PULSES, output, seed + 1, args.svg
    )
    for offset, name in enumerate(("thermal", "aligned_y", "stretched")):
        _reconstruction_figure(
            f"appendixB/{name}", reference_state(name), FIGURE_PULSES, output, seed + 2 + offset, args.svg
        )

    logger.info(f"Step 2: fidelity sweeps ({n_states} states x {n_repeats} repeats per point)")
    for offset, (name, (axis, grid)) in enumerate(SWEEP_GRIDS.items()):
        cfg = SweepConfig(
            axis=axis,
            grid=grid,
            states=list(STATE_CLASSES),
            n_states=n_states,
            n_repeats=n_repeats,
            snr=25.0,
            seed=seed + 10 + offset,
        )
        rows = sweep_service.run(cfg, TransitionSpec(), FIGURE_PROBE)
        sweep_table_to_csv(rows, output / f"{name}.csv")
        if args.svg:
            sweep_table_to_svg(rows, output / f"{name}.svg", axis)

    (output / "seeds.json").write_text(json.dumps({"base_seed": seed, "samples_per_point": n_states * n_repeats}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtomo",
        description="Qutrit tomography from simulated polarization-rotation signals.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub, config_required=False):
        sub.add_argument("--config", required=config_required, help="RunConfig JSON file.")
        sub.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
        sub.add_argument("--output", default=None, help="Output directory (overrides config output_dir).")
        sub.add_argument("--force", action="store_true", help="Run even if the analytic model is outside its regime.")
        sub.add_argument("--svg", action="store_true", help="Also write SVG plots.")

    simulate = subparsers.add_parser("simulate", help="Write one trace per pulse.")
    common(simulate)
    simulate.add_argument("--integrator", action="store_true", help="Use the master equation instead of the analytic model.")
    simulate.set_defaults(handler=cmd_simulate)

    reconstruct = subparsers.add_parser("reconstruct", help="Reconstruct a state from traces or a config.")
    common(reconstruct)
    reconstruct.add_argument("traces", nargs="*", help="Trace CSV files with .meta.json sidecars.")
    reconstruct.add_argument("--truth", default=None, help="DensityMatrix JSON used to report fidelity.")
    reconstruct.set_defaults(handler=cmd_reconstruct)

    sweep = subparsers.add_parser("sweep", help="Monte-Carlo fidelity sweep.")
    common(sweep, config_required=True)
    sweep.add_argument("--integrator", action="store_true", help="Required for kappa2 sweeps.")
    sweep.set_defaults(handler=cmd_sweep)

    figures = subparsers.add_parser("paper-figures", help="Regenerate all figure data.")
    figures.add_argument("--output", default=None, help="Output directory.")
    figures.add_argument("--seed", type=int, default=None, help="Base seed.")
    figures.add_argument("--samples", type=int, default=None, help="Reconstructions per sweep point.")
    figures.add_argument("--svg", action="store_true", help="Also write SVG plots.")
    figures.set_defaults(handler=cmd_paper_figures)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except ModelValidityError as e:
        logger.error(f"{e} (flags: {e.flags}); use --force to override")
        return EXIT_VALIDITY
    except NotConverged as e:
        logger.error(str(e))
        return EXIT_NOT_CONVERGED
    except (QtomoError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
