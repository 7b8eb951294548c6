"""
Synthetic measurement: white-noise injection and envelope fitting.

The fitted model is

    delta_alpha(t) = exp(-gamma t) [A sin(2 Omega_L t) + B cos(2 Omega_L t) + C]

with Omega_L and gamma known, so (A, B, C) follow from linear least squares.
"""

import logging
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from models.schemas import FitResult, NoiseSpec, ProbeConfig, PulseAngles, TransitionSpec
from services.forward import SignalTrace, signal
from services.qstate import reference_state
from utils.errors import SingularDesignError

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e10


def reference_amplitude(spec: TransitionSpec, probe: ProbeConfig, times=None) -> float:
    """
    Amplitude of the aligned-state rotation signal (no pulse) on the same
    spec/probe; the SNR of every trace is quoted against it.
    """
    trace = signal(reference_state("aligned_y"), PulseAngles(), spec, probe, times)
    amplitude = float(np.max(np.abs(trace.delta_alpha)))
    if amplitude <= 0:
        raise ValueError("aligned-state reference signal vanishes for this probe")
    return amplitude


def noise_for(spec: TransitionSpec, probe: ProbeConfig, snr: float, seed: int, times=None) -> NoiseSpec:
    return NoiseSpec(snr=snr, seed=seed, reference_amplitude=reference_amplitude(spec, probe, times))


def add_noise(trace: SignalTrace, noise: NoiseSpec) -> SignalTrace:
    """
    Add i.i.d. Gaussian noise of RMS reference_amplitude / snr to delta_alpha.

    The other channels are left untouched. An infinite SNR returns the
    samples unchanged; snr and seed are recorded in the metadata either way.
    """
    meta = trace.meta.model_copy(update={"snr": noise.snr, "seed": noise.seed}) if trace.meta else None
    sigma = noise.sigma
    if sigma == 0:
        return trace.replace(meta=meta)
    rng = np.random.default_rng(noise.seed)
    noisy = trace.delta_alpha + rng.normal(0.0, sigma, size=trace.delta_alpha.shape)
    return trace.replace(delta_alpha=noisy, meta=meta)


def design_matrix(times: np.ndarray, larmor: float, gamma: float) -> np.ndarray:
    envelope = np.exp(-gamma * times)
    phase = 2 * larmor * times
    return np.column_stack([envelope * np.sin(phase), envelope * np.cos(phase), envelope])


def _solve(times, values, larmor, gamma):
    design = design_matrix(times, larmor, gamma)
    if times.size < 3:
        raise SingularDesignError(f"need at least 3 samples to fit 3 amplitudes, got {times.size}")
    condition = np.linalg.cond(design)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularDesignError(
            f"envelope design matrix is singular (condition {condition:.3g}); "
            "time grid does not resolve the 2 Omega_L oscillation"
        )
    coefficients, _, _, _ = np.linalg.lstsq(design, values, rcond=None)
    residuals = values - design @ coefficients
    return design, coefficients, residuals


def fit_envelope(
    trace: SignalTrace,
    larmor: float,
    gamma: float,
    refine: bool = False,
    window_start: Optional[float] = None,
) -> FitResult:
    """
    Fit (A, B, C) of the rotation signal.

    Args:
        trace: Measured trace (delta_alpha is fitted)
        larmor: Larmor frequency Omega_L
        gamma: Ground-state relaxation rate
        refine: Also adjust (Omega_L, gamma) by nonlinear least squares
        window_start: Drop samples before this time (e.g. the 10/Gamma probe transient)

    Returns:
        FitResult with covariance s^2 (X^T X)^-1, s^2 = RSS / (n - 3)

    Raises:
        SingularDesignError: If the design matrix is rank deficient
    """
    times, values = trace.times, trace.delta_alpha
    if window_start is not None:
        keep = times >= window_start
        times, values = times[keep], values[keep]

    if refine:
        larmor, gamma = _refine_rates(times, values, larmor, gamma)

    design, coefficients, residuals = _solve(times, values, larmor, gamma)
    dof = times.size - 3
    variance = float(residuals @ residuals) / dof if dof > 0 else 0.0
    cov = variance * np.linalg.inv(design.T @ design)
    cov = (cov + cov.T) / 2
    rms = float(np.sqrt(np.mean(residuals ** 2)))

    logger.debug(
        "Envelope fit",
        extra={"A": coefficients[0], "B": coefficients[1], "C": coefficients[2], "residual_rms": rms},
    )
    return FitResult(
        A=float(coefficients[0]),
        B=float(coefficients[1]),
        C=float(coefficients[2]),
        cov=cov.tolist(),
        residual_rms=rms,
        larmor=float(larmor),
        gamma=float(gamma),
    )


def _refine_rates(times, values, larmor, gamma):
    """Variable-projection refinement: amplitudes solved linearly inside each residual call."""

    def residual(params):
        return _solve(times, values, params[0], params[1])[2]

    result = least_squares(
        residual,
        x0=[larmor, gamma],
        bounds=([-np.inf, 0.0], [np.inf, np.inf]),
        x_scale="jac",
    )
    if not result.success:
        logger.warning(f"Rate refinement did not converge: {result.message}")
        return larmor, gamma
    logger.info(
        "Refined rates",
        extra={"larmor": float(result.x[0]), "gamma": float(result.x[1]), "nfev": result.nfev},
    )
    return float(result.x[0]), float(result.x[1])
