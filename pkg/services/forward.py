"""
Analytic light-atom forward model.

Signals of a y-polarized probe after a control pulse (phi, theta), in the
slow-evolution limit (transients exp(-Gamma t) dropped, first order in
Omega_L and gamma). With V = V_R + i V_I the (Doppler-broadened) line
profile, primed expectations taken in the post-pulse state D rho D^dagger,
s = sin(2 Omega_L t), c = cos(2 Omega_L t), e = exp(-gamma t):

    delta_alpha      = -chi L e [V_R (<a_r'> s + <a_i'> c) - V_I <b'>]
    delta_epsilon    =  chi L e [V_I (<a_r'> s + <a_i'> c) + V_R <b'>]
    delta_absorption =  chi L V_R [e (<a_r'> c - <a_i'> s + <d'> - d_s) + d_s]
    delta_phase      = -chi L V_I [e (<a_r'> c - <a_i'> s + <d'> - d_s) + d_s]

Rates and times share one unit system; `ProbeConfig.rate_unit` converts the
line profile to SI so that chi L V is dimensionless (rad).
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import constants
from scipy.special import wofz

from config import settings
from models.schemas import ProbeConfig, PulseAngles, TraceMeta, TracePayload, TransitionSpec
from services.angmom import wigner6j
from services.observables import ObservableSet, build_observables, rotated_expectations
from services.qstate import DensityMatrix
from utils.errors import ModelValidityError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SignalTrace:
    """Sampled light-parameter changes with provenance."""

    times: np.ndarray
    delta_alpha: np.ndarray
    delta_epsilon: Optional[np.ndarray] = None
    delta_absorption: Optional[np.ndarray] = None
    delta_phase: Optional[np.ndarray] = None
    meta: Optional[TraceMeta] = field(default=None, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        for name in ("delta_alpha", "delta_epsilon", "delta_absorption", "delta_phase"):
            values = getattr(self, name)
            if values is None:
                continue
            values = np.asarray(values, dtype=float)
            if values.shape != times.shape:
                raise ValueError(f"{name} has {values.size} samples, expected {times.size}")
            object.__setattr__(self, name, values)

    def replace(self, **changes) -> "SignalTrace":
        return dataclasses.replace(self, **changes)

    def to_payload(self) -> TracePayload:
        def _list(values):
            return None if values is None else values.tolist()

        return TracePayload(
            times=self.times.tolist(),
            delta_alpha=self.delta_alpha.tolist(),
            delta_epsilon=_list(self.delta_epsilon),
            delta_absorption=_list(self.delta_absorption),
            delta_phase=_list(self.delta_phase),
            meta=self.meta,
        )

    @classmethod
    def from_payload(cls, payload: TracePayload) -> "SignalTrace":
        return cls(
            times=np.asarray(payload.times),
            delta_alpha=np.asarray(payload.delta_alpha),
            delta_epsilon=None if payload.delta_epsilon is None else np.asarray(payload.delta_epsilon),
            delta_absorption=None if payload.delta_absorption is None else np.asarray(payload.delta_absorption),
            delta_phase=None if payload.delta_phase is None else np.asarray(payload.delta_phase),
            meta=payload.meta,
        )


# ---------------------------------------------------------------------------
# Line profiles and coupling constant
# ---------------------------------------------------------------------------

def lorentz(delta, gamma_e: float):
    """Complex Lorentz profile (Gamma - 2i Delta)^-1."""
    return 1.0 / (gamma_e - 2j * np.asarray(delta, dtype=float))


def voigt(delta, gamma_e: float, gamma_d: float):
    """
    Lorentz profile convolved with the Doppler distribution
    exp(-x^2/Gamma_D^2)/(Gamma_D sqrt(pi)), evaluated with the Faddeeva function.

    Returns the Lorentz profile exactly when gamma_d == 0.
    """
    if gamma_d == 0:
        return lorentz(delta, gamma_e)
    z = (np.asarray(delta, dtype=float) + 0.5j * gamma_e) / gamma_d
    return math.sqrt(math.pi) / (2 * gamma_d) * wofz(z)


def line_profile(probe: ProbeConfig) -> complex:
    """V(Delta) of the probe in SI units (s/rad)."""
    return complex(voigt(probe.detuning, probe.gamma_e, probe.doppler)) / probe.rate_unit


def chi(spec: TransitionSpec) -> float:
    """
    Light-atom coupling N w |<j||d||J>|^2 (2f+1)(2F+1) {j f I; F J 1}^2 (-1)^(2j+2J) / (2 eps0 c hbar).

    Forbidden couplings give 0 through the 6j symbol.
    """
    six_j = wigner6j(spec.j_ground, spec.f_ground, spec.nuclear_spin, spec.f_excited, spec.j_excited, 1)
    parity = 1 if int(round(2 * spec.j_ground + 2 * spec.j_excited)) % 2 == 0 else -1
    angular = (2 * spec.f_ground + 1) * (2 * spec.f_excited + 1) * float(six_j.squared()) * parity
    prefactor = spec.number_density * spec.omega * spec.reduced_dipole ** 2
    return prefactor * angular / (2 * constants.epsilon_0 * constants.c * constants.hbar)


@lru_cache(maxsize=32)
def _observables(f: float, F: float) -> ObservableSet:
    return build_observables(f, F)


def observables_for(spec: TransitionSpec) -> ObservableSet:
    return _observables(spec.f_ground, spec.f_excited)


# ---------------------------------------------------------------------------
# Model validity and time grid
# ---------------------------------------------------------------------------

def validity_flags(probe: ProbeConfig) -> Dict[str, bool]:
    """
    Regime checks of the analytic model; True means satisfied.

    larmor_slow and ground_relaxation_slow are required; the others are
    informational.
    """
    scale = max(abs(probe.detuning), probe.gamma_e / 2)
    return {
        "larmor_slow": abs(probe.larmor) < scale,
        "ground_relaxation_slow": probe.gamma_g < probe.gamma_e,
        "detuning_exceeds_linewidth": abs(probe.detuning) > probe.gamma_e,
        "weak_probe": probe.rabi ** 2 < probe.gamma_e * max(probe.gamma_g, 1e-300),
    }


REQUIRED_FLAGS = ("larmor_slow", "ground_relaxation_slow")


def check_validity(probe: ProbeConfig, force: bool = False) -> Dict[str, bool]:
    """
    Raises:
        ModelValidityError: If a required flag fails and force is False
    """
    flags = validity_flags(probe)
    failed = [name for name in REQUIRED_FLAGS if not flags[name]]
    if failed:
        if not force:
            raise ModelValidityError(f"probe outside analytic-model regime: {', '.join(failed)}", flags)
        logger.warning("Model validity violated (forced): %s", ", ".join(failed))
    return flags


def default_time_grid(probe: ProbeConfig) -> np.ndarray:
    """Uniform grid of settings.larmor_periods Larmor periods at settings.samples_per_period."""
    if probe.larmor == 0:
        raise ValueError("default time grid needs a nonzero Larmor frequency")
    period = 2 * math.pi / abs(probe.larmor)
    n_samples = int(round(settings.larmor_periods * settings.samples_per_period))
    return np.arange(n_samples) * (period / settings.samples_per_period)


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a non-empty finite 1-D array")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


# ---------------------------------------------------------------------------
# Ground-state evolution and signals
# ---------------------------------------------------------------------------

def evolve_ground(rho0: DensityMatrix, t: float, gamma: float, larmor: float) -> DensityMatrix:
    """
    Free ground-state evolution: populations relax to 1/(2f+1) at rate gamma,
    coherences rho_nm pick up exp(-gamma t) exp(-i (n - m) Omega_L t).
    """
    if t < 0:
        raise ValueError("evolution time must be non-negative")
    dim = rho0.dim
    m = np.arange(dim) - (dim - 1) / 2
    decay = math.exp(-gamma * t)
    phase = np.exp(-1j * larmor * t * (m[:, np.newaxis] - m[np.newaxis, :]))
    rho = rho0.elements * decay * phase
    rho = rho + (1 - decay) * np.eye(dim) / dim
    return DensityMatrix((rho + rho.conj().T) / 2)


def envelope_coefficients(
    rho0: DensityMatrix, pulse: PulseAngles, spec: TransitionSpec, probe: ProbeConfig
) -> Tuple[float, float, float]:
    """Exact (A, B, C) of delta_alpha = exp(-gamma t)[A sin 2 Omega_L t + B cos 2 Omega_L t + C]."""
    primed = rotated_expectations(observables_for(spec), rho0, pulse)
    v = line_profile(probe)
    scale = chi(spec) * spec.cell_length
    a_coef = -scale * v.real * primed["alpha_r"]
    b_coef = -scale * v.real * primed["alpha_i"]
    c_coef = scale * v.imag * primed["beta"]
    return a_coef, b_coef, c_coef


def _channels(rho0, pulse, spec, probe, times):
    obs = observables_for(spec)
    primed = rotated_expectations(obs, rho0, pulse)
    v = line_profile(probe)
    scale = chi(spec) * spec.cell_length
    envelope = np.exp(-probe.gamma_g * times)
    sin2 = np.sin(2 * probe.larmor * times)
    cos2 = np.cos(2 * probe.larmor * times)

    oscillation = primed["alpha_r"] * sin2 + primed["alpha_i"] * cos2
    delta_alpha = -scale * envelope * (v.real * oscillation - v.imag * primed["beta"])
    delta_epsilon = scale * envelope * (v.imag * oscillation + v.real * primed["beta"])

    absorptive = envelope * (
        primed["alpha_r"] * cos2 - primed["alpha_i"] * sin2 + primed["delta"] - obs.delta_s
    ) + obs.delta_s
    delta_absorption = scale * v.real * absorptive
    delta_phase = -scale * v.imag * absorptive
    return delta_alpha, delta_epsilon, delta_absorption, delta_phase


def signal(
    rho0: DensityMatrix,
    pulse: PulseAngles,
    spec: TransitionSpec,
    probe: ProbeConfig,
    times=None,
    seed: Optional[int] = None,
) -> SignalTrace:
    """
    Full four-channel trace of the analytic model after a control pulse.

    Args:
        rho0: Ground-state density matrix before the pulse
        pulse: Control pulse angles
        spec: Transition constants
        probe: Probe and relaxation parameters
        times: Sample times (default_time_grid when None)
        seed: Recorded in the trace metadata only

    Returns:
        SignalTrace with all channels and validity flags in meta

    Raises:
        ValueError: For negative, unsorted or empty times
    """
    times = default_time_grid(probe) if times is None else _check_times(times)
    delta_alpha, delta_epsilon, delta_absorption, delta_phase = _channels(rho0, pulse, spec, probe, times)
    meta = TraceMeta(
        transition=spec,
        probe=probe,
        pulse=pulse,
        seed=seed,
        source="analytic",
        validity_flags=validity_flags(probe),
    )
    return SignalTrace(
        times=times,
        delta_alpha=delta_alpha,
        delta_epsilon=delta_epsilon,
        delta_absorption=delta_absorption,
        delta_phase=delta_phase,
        meta=meta,
    )


def ellipticity(rho0: DensityMatrix, pulse: PulseAngles, spec: TransitionSpec, probe: ProbeConfig, times) -> np.ndarray:
    return _channels(rho0, pulse, spec, probe, _check_times(times))[1]


def absorption_phase(
    rho0: DensityMatrix, pulse: PulseAngles, spec: TransitionSpec, probe: ProbeConfig, times
) -> Tuple[np.ndarray, np.ndarray]:
    """Relative absorption Delta E/E and phase change, including the isotropic delta_s term."""
    _, _, delta_absorption, delta_phase = _channels(rho0, pulse, spec, probe, _check_times(times))
    return delta_absorption, delta_phase
