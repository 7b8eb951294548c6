"""
Monte-Carlo fidelity studies.

A sweep varies one quantity (snr, angle_sigma, n_measurements or kappa2) and,
per grid point and state class, reconstructs n_states x n_repeats random
problems. Each task draws its randomness from
SeedSequence(seed, spawn_key=(class, state, repeat)), so results do not depend
on worker count or execution order, and the same states, pulses and noise
draws are reused across grid points.
"""

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from config import settings
from models.schemas import BetaFit, ProbeConfig, PulseAngles, SweepConfig, SweepRow, TransitionSpec
from services.forward import default_time_grid
from services.liouville import integrated_signal, rabi_for_kappa2
from services.measure import reference_amplitude
from services.qstate import DensityMatrix, maximally_mixed, random_mixed, random_pure
from services.reconstruct import reconstruct
from utils.errors import DegenerateSampleError, QtomoError

logger = logging.getLogger(__name__)

CLAMP = 1e-9
MIN_BETA_SAMPLES = 30
POINT_MASS_CONCENTRATION = 1e12
SWEEP_COLUMNS = list(SweepRow.model_fields)

STATE_CLASSES = ("pure", "mixed_0.6", "thermal")


# ---------------------------------------------------------------------------
# Random problems
# ---------------------------------------------------------------------------

def draw_pulses(count: int, rng: np.random.Generator) -> List[PulseAngles]:
    """Pulse angles phi, theta ~ U[0, pi)."""
    angles = rng.uniform(0.0, math.pi, size=(count, 2))
    return [PulseAngles(phi=phi, theta=theta) for phi, theta in angles]


def sample_state(state_class: str, seed) -> DensityMatrix:
    if state_class == "pure":
        return random_pure(seed=seed)
    if state_class == "mixed_0.6":
        return random_mixed(seed=seed, target_purity=0.6)
    if state_class == "thermal":
        return maximally_mixed(3)
    raise ValueError(f"unknown state class '{state_class}'")


# ---------------------------------------------------------------------------
# Beta fitting
# ---------------------------------------------------------------------------

def _moments(a: float, b: float) -> Tuple[float, float]:
    total = a + b
    return a / total, a * b / (total ** 2 * (total + 1))


def fit_beta(samples: Sequence[float]) -> BetaFit:
    """
    Beta distribution on [0, 1] by method of moments refined with maximum likelihood.

    Samples are clamped to [1e-9, 1 - 1e-9]. Identical samples give a
    point-mass fit with concentration POINT_MASS_CONCENTRATION.

    Raises:
        DegenerateSampleError: If fewer than 30 samples are given or any is outside [0, 1]
    """
    values = np.asarray(samples, dtype=float)
    if values.size < MIN_BETA_SAMPLES:
        raise DegenerateSampleError(f"beta fit needs at least {MIN_BETA_SAMPLES} samples, got {values.size}")
    if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
        raise DegenerateSampleError("beta samples must lie in [0, 1]")
    values = np.clip(values, CLAMP, 1 - CLAMP)

    mean = float(values.mean())
    variance = float(values.var())
    if variance <= 1e-300 or np.ptp(values) == 0:
        a, b = mean * POINT_MASS_CONCENTRATION, (1 - mean) * POINT_MASS_CONCENTRATION
        return BetaFit(a=a, b=b, mean=mean, variance=0.0, point_mass=True)

    common = mean * (1 - mean) / variance - 1
    if common <= 0:
        a0, b0 = 1.0, 1.0
    else:
        a0, b0 = mean * common, (1 - mean) * common

    try:
        a, b, _, _ = stats.beta.fit(values, a0, b0, floc=0, fscale=1)
    except (RuntimeError, ValueError, FloatingPointError) as e:
        logger.warning(f"Beta likelihood fit failed ({e}); using moment estimates")
        a, b = a0, b0
    if not (np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0):
        logger.warning("Beta likelihood fit returned invalid shape; using moment estimates")
        a, b = a0, b0

    fit_mean, fit_variance = _moments(a, b)
    return BetaFit(a=float(a), b=float(b), mean=fit_mean, variance=fit_variance)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepTask:
    axis: str
    axis_value: float
    state_class: str
    class_index: int
    state_index: int
    repeat: int
    seed: int
    n_pulses: int
    fixed_pulses: Optional[Tuple[PulseAngles, ...]]
    snr: Optional[float]
    angle_sigma: float
    spec: TransitionSpec
    probe: ProbeConfig
    reference: Optional[float]


def _task_pulses(task: SweepTask, rng: np.random.Generator) -> List[PulseAngles]:
    if task.fixed_pulses is None:
        return draw_pulses(task.n_pulses, rng)
    if task.n_pulses > len(task.fixed_pulses):
        raise ValueError(f"{task.n_pulses} measurements requested but only {len(task.fixed_pulses)} pulses given")
    return list(task.fixed_pulses[: task.n_pulses])


def run_task(task: SweepTask) -> Optional[float]:
    """Fidelity of one reconstruction, or None when it fails."""
    state_seed = np.random.SeedSequence(task.seed, spawn_key=(task.class_index, task.state_index))
    task_seed = np.random.SeedSequence(task.seed, spawn_key=(task.class_index, task.state_index, task.repeat + 1))
    pulse_stream, run_stream = task_seed.spawn(2)
    rho = sample_state(task.state_class, state_seed)
    pulses = _task_pulses(task, np.random.default_rng(pulse_stream))

    simulator, window = None, None
    probe = task.probe
    if task.axis == "kappa2":
        probe = probe.model_copy(update={"rabi": rabi_for_kappa2(task.axis_value, probe)})
        times = default_time_grid(probe)

        def simulator(state, pulse):
            return integrated_signal(state, pulse, task.spec, probe, times=times)

        window = 10 / probe.gamma_e
    try:
        result = reconstruct(
            rho,
            pulses,
            task.snr,
            task.angle_sigma,
            run_stream,
            task.spec,
            probe,
            simulator=simulator,
            window_start=window,
            reference=task.reference,
        )
    except (QtomoError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(
            f"Reconstruction failed: {e}",
            extra={"axis_value": task.axis_value, "state_class": task.state_class, "repeat": task.repeat},
        )
        return None
    return result.fidelity_vs_truth


def _build_tasks(cfg: SweepConfig, spec: TransitionSpec, probe: ProbeConfig, axis_value: float, reference) -> List[SweepTask]:
    snr, sigma, n_pulses = cfg.snr, cfg.angle_sigma, cfg.n_pulses
    if cfg.axis == "snr":
        snr = axis_value
    elif cfg.axis == "angle_sigma":
        sigma = axis_value
    elif cfg.axis == "n_measurements":
        n_pulses = int(axis_value)
    fixed = None if cfg.pulses == "random" else tuple(cfg.pulses)

    tasks = []
    for state_class in cfg.states:
        for state_index in range(cfg.n_states):
            for repeat in range(cfg.n_repeats):
                tasks.append(
                    SweepTask(
                        axis=cfg.axis,
                        axis_value=axis_value,
                        state_class=state_class,
                        class_index=STATE_CLASSES.index(state_class),
                        state_index=state_index,
                        repeat=repeat,
                        seed=cfg.seed,
                        n_pulses=n_pulses,
                        fixed_pulses=fixed,
                        snr=snr,
                        angle_sigma=sigma,
                        spec=spec,
                        probe=probe,
                        reference=reference,
                    )
                )
    return tasks


def _execute(tasks: List[SweepTask], threads: int) -> List[Optional[float]]:
    if threads <= 1:
        return [run_task(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_task, tasks, chunksize=chunksize))


def _summarize(axis_value: float, state_class: str, fidelities: List[Optional[float]]) -> SweepRow:
    samples = np.array([f for f in fidelities if f is not None], dtype=float)
    failures = len(fidelities) - samples.size
    if samples.size >= MIN_BETA_SAMPLES:
        beta = fit_beta(samples)
        beta_a, beta_b = beta.a, beta.b
    else:
        beta_a = beta_b = math.nan
    return SweepRow(
        axis_value=axis_value,
        state_class=state_class,
        mean_fidelity=float(samples.mean()) if samples.size else math.nan,
        var_fidelity=float(samples.var(ddof=1)) if samples.size > 1 else math.nan,
        beta_a=beta_a,
        beta_b=beta_b,
        n_samples=int(samples.size),
        n_failures=int(failures),
    )


def run_sweep(
    cfg: SweepConfig, spec: TransitionSpec, probe: ProbeConfig, threads: Optional[int] = None
) -> List[SweepRow]:
    """
    Fidelity table over the sweep grid.

    Args:
        cfg: Sweep definition
        spec: Transition constants
        probe: Probe parameters (Omega_R is replaced on the kappa2 axis)
        threads: Worker processes (settings.threads when None)

    Returns:
        One SweepRow per (grid value, state class), grid-major
    """
    threads = settings.threads if threads is None else threads
    rows = []
    for point, axis_value in enumerate(cfg.grid):
        start = time.time()
        if cfg.axis == "kappa2" and axis_value <= 0:
            raise ValueError("kappa2 grid values must be positive")
        reference = None
        if cfg.axis == "snr" or cfg.snr is not None:
            reference = reference_amplitude(spec, probe, default_time_grid(probe))
        tasks = _build_tasks(cfg, spec, probe, float(axis_value), reference)
        fidelities = _execute(tasks, threads)
        per_class = cfg.n_states * cfg.n_repeats
        for k, state_class in enumerate(cfg.states):
            row = _summarize(float(axis_value), state_class, fidelities[k * per_class:(k + 1) * per_class])
            rows.append(row)
            if row.n_failures:
                logger.warning(f"{row.n_failures} reconstructions failed at {cfg.axis}={axis_value} ({state_class})")
        logger.info(
            f"Sweep point {point + 1}/{len(cfg.grid)} done",
            extra={"axis": cfg.axis, "axis_value": axis_value, "elapsed": round(time.time() - start, 3)},
        )
    return rows


def kappa2_sweep(
    cfg: SweepConfig, spec: TransitionSpec, probe: ProbeConfig, threads: Optional[int] = None
) -> List[SweepRow]:
    """
    Fidelity versus probe saturation with back-action.

    Signals come from the master equation at Omega_R = sqrt(kappa2 Gamma gamma);
    the reconstruction still inverts them with the analytic model.
    """
    if cfg.axis != "kappa2":
        raise ValueError(f"kappa2_sweep needs axis 'kappa2', got '{cfg.axis}'")
    return run_sweep(cfg, spec, probe, threads)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def sweep_table_to_csv(rows: Sequence[SweepRow], path) -> Path:
    """Write `axis_value,state_class,mean_fidelity,var_fidelity,beta_a,beta_b,n_samples,n_failures`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: (repr(value) if isinstance(value, float) else value) for key, value in row.model_dump().items()})
    return path


def read_sweep_csv(path) -> List[SweepRow]:
    with Path(path).open(newline="") as handle:
        return [SweepRow(**record) for record in csv.DictReader(handle)]


def sweep_table_to_svg(rows: Sequence[SweepRow], path, axis: str) -> Path:
    """Mean fidelity with one-sigma bars per state class (matplotlib, Agg backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for state_class in dict.fromkeys(row.state_class for row in rows):
        subset = [row for row in rows if row.state_class == state_class]
        ax.errorbar(
            [row.axis_value for row in subset],
            [row.mean_fidelity for row in subset],
            yerr=[0.0 if math.isnan(row.var_fidelity) else math.sqrt(row.var_fidelity) for row in subset],
            marker="o",
            capsize=3,
            label=state_class,
        )
    if axis in ("snr", "kappa2"):
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("fidelity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


class SweepService:
    def run(self, cfg: SweepConfig, spec: TransitionSpec, probe: ProbeConfig, threads: Optional[int] = None) -> List[SweepRow]:
        start = time.time()
        logger.info(
            f"Step 1: sweeping {cfg.axis} over {len(cfg.grid)} points "
            f"({len(cfg.states)} classes x {cfg.n_states} states x {cfg.n_repeats} repeats)"
        )
        try:
            rows = run_sweep(cfg, spec, probe, threads)
        except Exception as e:
            logger.error(f"Sweep failed: {str(e)}")
            raise
        logger.info(f"Step 2: sweep finished in {time.time() - start:.1f}s")
        return rows


sweep_service = SweepService()
