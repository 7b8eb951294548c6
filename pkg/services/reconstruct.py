"""
State reconstruction from envelope fits.

Each pulse j yields three real numbers of the post-pulse state
rho_j = D_j rho D_j^dagger: Re and Im of rho_j[1,-1] and the population
difference rho_j[-1,-1] - rho_j[1,1]. The reconstructed state minimizes the
masked Frobenius distance

    delta(rho) = sum_j  2 |c_j(rho) - c_j|^2 + (p_j(rho) - p_j)^2

over Cholesky parameters, so the result is always physical.
"""

import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from config import settings
from models.schemas import (
    FitResult,
    NoiseSpec,
    PartialMeasurement,
    ProbeConfig,
    PulseAngles,
    ReconstructionResult,
    TransitionSpec,
)
from services.angmom import rotation_operator
from services.forward import SignalTrace, chi, line_profile, observables_for, signal
from services.measure import add_noise, fit_envelope, reference_amplitude
from services.qstate import (
    DensityMatrix,
    cholesky_factor,
    fidelity,
    lower_indices,
    maximally_mixed_params,
    n_params,
    purity,
    to_density,
)
from utils.errors import ChannelDeadError, EmptyMeasurementError, ForbiddenTransitionError

logger = logging.getLogger(__name__)

QUTRIT = 3
FULL_RANK = QUTRIT * QUTRIT - 1
TIE_TOLERANCE = 1e-6
TIE_FLOOR = 1e-14

Simulator = Callable[[DensityMatrix, PulseAngles], SignalTrace]


# ---------------------------------------------------------------------------
# Fit inversion
# ---------------------------------------------------------------------------

def _channel_scales(spec: TransitionSpec, probe: ProbeConfig) -> Tuple[float, float, float, float, float]:
    if spec.f_ground != 1:
        raise ForbiddenTransitionError(f"reconstruction is defined for f=1 ground states, got f={spec.f_ground}")
    obs = observables_for(spec)
    coherence_weight = float(np.real(obs.alpha_r[obs.index(-1), obs.index(1)]))
    population_weight = float(np.real(obs.beta[obs.index(1), obs.index(1)]))
    v = line_profile(probe)
    length_chi = chi(spec) * spec.cell_length
    return coherence_weight, population_weight, v.real, v.imag, length_chi


def invert_fit(
    fit: FitResult, spec: TransitionSpec, probe: ProbeConfig, pulse: Optional[PulseAngles] = None
) -> PartialMeasurement:
    """
    Post-pulse coherence and population difference from fitted amplitudes.

        rho'[1,-1]              = (A - iB) / (zeta L),  zeta = -2 w chi V_R
        rho'[-1,-1] - rho'[1,1] = -C / (chi L V_I b), clipped to [-1, 1]

    with w = alpha_R[-1,1] and b = beta[1,1] taken from the observables.

    Raises:
        ChannelDeadError: If V_R or V_I vanishes relative to |V| (e.g. V_I at Delta = 0)
    """
    w, b, v_r, v_i, length_chi = _channel_scales(spec, probe)
    magnitude = math.hypot(v_r, v_i)
    threshold = settings.channel_threshold * magnitude
    if abs(v_r) <= threshold:
        raise ChannelDeadError("dispersive line profile V_R vanishes; coherence channel is unobservable")
    if abs(v_i) <= threshold:
        raise ChannelDeadError("absorptive line profile V_I vanishes; population channel is unobservable")
    if length_chi == 0:
        raise ChannelDeadError("coupling chi is zero for this transition")

    zeta_l = -2 * w * length_chi * v_r
    population_scale = -1.0 / (length_chi * v_i * b)
    coherence = complex(fit.A, -fit.B) / zeta_l
    pop_diff = fit.C * population_scale
    if abs(pop_diff) > 1:
        logger.debug(f"Clipping fitted population difference {pop_diff:.4f} to [-1, 1]")
        pop_diff = math.copysign(1.0, pop_diff)

    cov = np.asarray(fit.cov)
    variances = np.array([cov[0, 0] / zeta_l ** 2, cov[1, 1] / zeta_l ** 2, cov[2, 2] * population_scale ** 2])
    weights = (1.0 / variances).tolist() if np.all(variances > 0) else None

    return PartialMeasurement(
        pulse=pulse or PulseAngles(),
        rho_1m1_re=coherence.real,
        rho_1m1_im=coherence.imag,
        pop_diff=pop_diff,
        weights=weights,
    )


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _measurement_rows(pulse: PulseAngles) -> Tuple[np.ndarray, np.ndarray]:
    """Row vectors r_c, r_p with c = r_c . vec(rho) and p = r_p . vec(rho) (row-major vec)."""
    d = rotation_operator(1, pulse.phi, pulse.theta)
    rotation = np.kron(d, d.conj())
    plus, minus = 2, 0
    row_c = rotation[plus * QUTRIT + minus]
    row_p = rotation[minus * QUTRIT + minus] - rotation[plus * QUTRIT + plus]
    return row_c, row_p


@dataclass
class Objective:
    """Masked Frobenius distance as a function of Cholesky parameters."""

    measurements: List[PartialMeasurement]
    weighted: bool = False

    def __post_init__(self):
        if not self.measurements:
            raise EmptyMeasurementError("at least one partial measurement is required")
        rows, targets, weights = [], [], []
        for item in self.measurements:
            row_c, row_p = _measurement_rows(item.pulse)
            rows.append(np.vstack([row_c, row_p]))
            targets.append([math.sqrt(2) * item.rho_1m1_re, math.sqrt(2) * item.rho_1m1_im, item.pop_diff])
            if self.weighted and item.weights is not None:
                weights.append(item.weights)
            else:
                weights.append([1.0, 1.0, 1.0])
        # (n, 2, 9) complex maps; residual components [sqrt2 Re c, sqrt2 Im c, p]
        self.rows = np.stack(rows)
        self.targets = np.asarray(targets, dtype=float).ravel()
        self.weights = np.asarray(weights, dtype=float).ravel()

    def predict(self, rho: np.ndarray) -> np.ndarray:
        """Measured quantities of a (not necessarily normalized) 3x3 matrix."""
        values = self.rows @ np.asarray(rho).ravel()
        coherence, population = values[:, 0], values[:, 1]
        stacked = np.column_stack([math.sqrt(2) * coherence.real, math.sqrt(2) * coherence.imag, population.real])
        return stacked.ravel()

    def residuals(self, rho: np.ndarray) -> np.ndarray:
        return self.predict(rho) - self.targets

    def distance(self, rho: DensityMatrix) -> float:
        r = self.residuals(rho.elements)
        return float(np.sum(self.weights * r * r))

    def value_and_grad(self, params: np.ndarray) -> Tuple[float, np.ndarray]:
        """Objective and its analytic gradient, chained through rho = T T^dagger / |x|^2."""
        x = np.asarray(params, dtype=float)
        norm = float(x @ x)
        if norm == 0.0:
            x = maximally_mixed_params(QUTRIT)
            norm = float(x @ x)
        factor = cholesky_factor(x)
        rho = factor @ factor.conj().T / norm
        r = self.residuals(rho)
        value = float(np.sum(self.weights * r * r))

        grad = np.empty(x.size)
        for k, unit in enumerate(_parameter_units()):
            d_rho = (unit @ factor.conj().T + factor @ unit.conj().T - 2 * x[k] * rho) / norm
            grad[k] = 2 * np.sum(self.weights * r * self.predict(d_rho))
        return value, grad

    def __call__(self, params: np.ndarray) -> float:
        return self.value_and_grad(params)[0]


@lru_cache(maxsize=1)
def _parameter_units() -> Tuple[np.ndarray, ...]:
    """dT/dx_k for the qutrit Cholesky layout."""
    units = []
    for k in range(QUTRIT):
        unit = np.zeros((QUTRIT, QUTRIT), dtype=complex)
        unit[k, k] = 1.0
        units.append(unit)
    for a, b in lower_indices(QUTRIT):
        for value in (1.0, 1j):
            unit = np.zeros((QUTRIT, QUTRIT), dtype=complex)
            unit[a, b] = value
            units.append(unit)
    return tuple(units)


def assemble_objective(measurements: Sequence[PartialMeasurement], weighted: bool = False) -> Objective:
    """
    Raises:
        EmptyMeasurementError: For an empty measurement list
    """
    return Objective(list(measurements), weighted=weighted)


def measurement_rank(pulses: Sequence[PulseAngles]) -> int:
    """Rank of the linear map from traceless Hermitian qutrit matrices to the measured quantities."""
    if not pulses:
        return 0
    objective = Objective(
        [PartialMeasurement(pulse=p, rho_1m1_re=0.0, rho_1m1_im=0.0, pop_diff=0.0) for p in pulses]
    )
    basis = []
    for a in range(QUTRIT):
        for b in range(QUTRIT):
            h = np.zeros((QUTRIT, QUTRIT), dtype=complex)
            if a == b:
                h[a, a] = 1.0
            elif a < b:
                h[a, b] = h[b, a] = 1.0
            else:
                h[a, b], h[b, a] = 1j, -1j
            basis.append(objective.predict(h))
    return int(np.linalg.matrix_rank(np.column_stack(basis), tol=1e-10))


# ---------------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------------

def _random_starts(count: int, seed) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.normal(size=n_params(QUTRIT)) for _ in range(count)]


def minimize(
    objective: Objective,
    init: Optional[np.ndarray] = None,
    restarts: Optional[int] = None,
    seed=None,
) -> ReconstructionResult:
    """
    Multi-start BFGS over Cholesky parameters.

    Starts are `init` (the maximally mixed point when None) followed by
    `restarts` random parameter vectors. The lowest objective wins; among
    optima equal within TIE_TOLERANCE (relative) the lowest purity is kept.

    Returns:
        ReconstructionResult; converged=False if the best run stopped on
        max_iterations with a non-negligible gradient
    """
    restarts = settings.multistart_restarts if restarts is None else restarts
    starts = [maximally_mixed_params(QUTRIT) if init is None else np.asarray(init, dtype=float)]
    starts += _random_starts(restarts, seed)

    candidates = []
    for start in starts:
        run = scipy_minimize(
            objective.value_and_grad,
            start,
            jac=True,
            method="BFGS",
            options={"maxiter": settings.max_iterations, "gtol": 1e-10},
        )
        rho = to_density(run.x)
        value = objective.distance(rho)
        gradient_norm = float(np.linalg.norm(run.jac)) if run.jac is not None else math.inf
        converged = bool(run.success or value <= settings.objective_tolerance or gradient_norm <= 1e-6)
        candidates.append((value, purity(rho), rho, int(run.nit), converged))
        logger.debug("Multistart run", extra={"objective": value, "iterations": int(run.nit), "success": run.success})

    best_value = min(c[0] for c in candidates)
    ties = [c for c in candidates if c[0] <= best_value * (1 + TIE_TOLERANCE) + TIE_FLOOR]
    value, _, rho, iterations, converged = min(ties, key=lambda c: c[1])

    return ReconstructionResult(
        rho=rho.to_payload(),
        distance=max(value, 0.0),
        iterations=iterations,
        converged=converged,
    )


def _finish(result: ReconstructionResult, pulses, truth: Optional[DensityMatrix]) -> ReconstructionResult:
    warnings = list(result.warnings)
    rank = measurement_rank(pulses)
    rank_deficient = rank < FULL_RANK
    if rank_deficient:
        message = f"rank-deficient measurement set (rank {rank} of {FULL_RANK}); state is only partially determined"
        logger.warning(message)
        warnings.append(message)
    if not result.converged:
        warnings.append("minimizer did not converge; best-so-far state returned")
    fid = None
    if truth is not None:
        fid = min(max(fidelity(DensityMatrix.from_payload(result.rho), truth), 0.0), 1.0)
    return result.model_copy(update={"rank_deficient": rank_deficient, "warnings": warnings, "fidelity_vs_truth": fid})


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def _perturb(pulse: PulseAngles, sigma: float, rng: np.random.Generator) -> PulseAngles:
    if sigma == 0:
        return pulse
    return PulseAngles(phi=pulse.phi + rng.normal(0.0, sigma), theta=pulse.theta + rng.normal(0.0, sigma))


def reconstruct(
    rho_true: DensityMatrix,
    pulses: Sequence[PulseAngles],
    snr: Optional[float],
    angle_sigma: float,
    seed,
    spec: TransitionSpec,
    probe: ProbeConfig,
    times=None,
    simulator: Optional[Simulator] = None,
    window_start: Optional[float] = None,
    reference: Optional[float] = None,
) -> ReconstructionResult:
    """
    End-to-end simulate -> noise -> fit -> invert -> minimize.

    Executed pulse angles are drawn around the nominal ones with standard
    deviation angle_sigma; inversion and minimization assume the nominal angles.

    Args:
        rho_true: State before the pulses
        pulses: Nominal control pulses
        snr: Signal-to-noise ratio (None or inf = noiseless)
        angle_sigma: Pulse-angle uncertainty in rad
        seed: Seed for angles, noise and multistart
        spec: Transition constants
        probe: Probe parameters
        times: Sample grid (default_time_grid when None)
        simulator: Trace generator (analytic forward.signal when None)
        window_start: Samples before this time are excluded from the fit
        reference: Aligned-state amplitude for the SNR convention (computed when None)
    """
    if not pulses:
        raise EmptyMeasurementError("at least one pulse is required")
    snr = math.inf if snr is None else snr
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(3)
    angle_rng = np.random.default_rng(streams[0])
    noise_seeds = streams[1].generate_state(len(pulses))
    if simulator is None:
        def simulator(state, pulse):
            return signal(state, pulse, spec, probe, times)
    if reference is None and math.isfinite(snr):
        reference = reference_amplitude(spec, probe, times)

    measurements = []
    for pulse, noise_seed in zip(pulses, noise_seeds):
        executed = _perturb(pulse, angle_sigma, angle_rng)
        trace = simulator(rho_true, executed)
        if math.isfinite(snr):
            trace = add_noise(trace, NoiseSpec(snr=snr, seed=int(noise_seed), reference_amplitude=reference))
        fit = fit_envelope(trace, probe.larmor, probe.gamma_g, window_start=window_start)
        measurements.append(invert_fit(fit, spec, probe, pulse))

    result = minimize(assemble_objective(measurements), seed=streams[2])
    return _finish(result, pulses, rho_true)


def reconstruct_from_traces(
    traces: Sequence[SignalTrace],
    spec: Optional[TransitionSpec] = None,
    probe: Optional[ProbeConfig] = None,
    truth: Optional[DensityMatrix] = None,
    seed=None,
    weighted: bool = False,
) -> ReconstructionResult:
    """
    Reconstruct from measured traces; pulse, transition and probe default to each trace's metadata.

    Integrator traces drop the first 10/Gamma of samples (probe switch-on transient).
    """
    if not traces:
        raise EmptyMeasurementError("at least one trace is required")
    measurements, pulses = [], []
    for trace in traces:
        if trace.meta is None and (spec is None or probe is None):
            raise ValueError("traces without metadata need explicit spec and probe")
        trace_spec = spec or trace.meta.transition
        trace_probe = probe or trace.meta.probe
        pulse = trace.meta.pulse if trace.meta else PulseAngles()
        window = 10 / trace_probe.gamma_e if trace.meta and trace.meta.source == "integrator" else None
        fit = fit_envelope(trace, trace_probe.larmor, trace_probe.gamma_g, window_start=window)
        measurements.append(invert_fit(fit, trace_spec, trace_probe, pulse))
        pulses.append(pulse)
    result = minimize(assemble_objective(measurements, weighted=weighted), seed=seed)
    return _finish(result, pulses, truth)


class ReconstructionService:
    """Logged reconstruction pipelines shared by the CLI and the HTTP API."""

    def from_state(
        self,
        rho_true: DensityMatrix,
        pulses: Sequence[PulseAngles],
        spec: TransitionSpec,
        probe: ProbeConfig,
        snr: Optional[float] = None,
        angle_sigma: float = 0.0,
        seed=None,
    ) -> ReconstructionResult:
        start = time.time()
        logger.info(f"Step 1: reconstructing from {len(pulses)} simulated pulses (snr={snr}, angle_sigma={angle_sigma})")
        try:
            result = reconstruct(rho_true, pulses, snr, angle_sigma, seed, spec, probe)
        except Exception as e:
            logger.error(f"Reconstruction failed: {str(e)}")
            raise
        logger.info(
            "Step 2: reconstruction finished",
            extra={
                "elapsed": round(time.time() - start, 3),
                "objective": result.distance,
                "fidelity": result.fidelity_vs_truth,
                "converged": result.converged,
            },
        )
        return result

    def from_traces(
        self,
        traces: Sequence[SignalTrace],
        truth: Optional[DensityMatrix] = None,
        seed=None,
        weighted: bool = False,
    ) -> ReconstructionResult:
        start = time.time()
        logger.info(f"Step 1: fitting {len(traces)} traces")
        try:
            result = reconstruct_from_traces(traces, truth=truth, seed=seed, weighted=weighted)
        except Exception as e:
            logger.error(f"Reconstruction from traces failed: {str(e)}")
            raise
        logger.info(
            "Step 2: reconstruction finished",
            extra={"elapsed": round(time.time() - start, 3), "objective": result.distance, "converged": result.converged},
        )
        if result.fidelity_vs_truth is not None:
            logger.info(f"Fidelity vs truth: {result.fidelity_vs_truth:.6f}")
        return result


reconstruction_service = ReconstructionService()
