"""
Master-equation model of the f=1 -> F=0 probe transition.

Basis: |1,-1>, |1,0>, |1,+1> (ground, m = -1..1) and |e> = |F=0,0>, rotating
frame of the probe light, hbar = 1, rates in the probe's unit system.

    d rho/dt = -i [H, rho] - 1/2 {G, rho} + L_sp(rho) + L_iso(rho)

    H    = Delta P_e + Omega_L (P_g Jz P_g + beta P_e Jz P_e) - Omega_R/2 (P_g d_p P_e + P_e d_p P_g)
    G    = Gamma P_e + gamma 1
    L_sp = Gamma sum_q A_q rho A_q^dagger / s,   A_q = P_g d_q^dagger P_e
    L_iso = gamma Tr(rho) P_g / 3

d_q are unit-reduced spherical dipole operators from the Wigner-Eckart
theorem, d_p the Cartesian component along the probe polarization p, and
s = sum_{q,m} |<e|d_q|m>|^2. The generator is of Lindblad form, so trace,
Hermiticity and positivity are preserved.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Literal, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm, null_space

from config import settings
from models.schemas import ProbeConfig, PulseAngles, TraceMeta, TransitionSpec
from services.angmom import angular_momentum_operators, spherical_transform, wigner3j
from services.forward import SignalTrace, chi, default_time_grid, validity_flags
from services.qstate import DensityMatrix, rotate_state
from utils.errors import ForbiddenTransitionError, IntegrationError
from utils.retry_helpers import run_with_fallback

logger = logging.getLogger(__name__)

GROUND_DIM = 3
FULL_DIM = 4
EXCITED = 3

Polarization = Literal["x", "y"]


@dataclass(frozen=True, eq=False)
class FullStateSequence:
    """Time-indexed 4x4 density matrices (ground block first, excited last)."""

    times: np.ndarray
    states: np.ndarray  # (n_times, 4, 4)

    def ground_block(self, k: int) -> np.ndarray:
        return self.states[k, :GROUND_DIM, :GROUND_DIM]

    def traces(self) -> np.ndarray:
        return np.real(np.einsum("kii->k", self.states))

    def excited_population(self) -> np.ndarray:
        return np.real(self.states[:, EXCITED, EXCITED])


@dataclass(frozen=True, eq=False)
class LiouvilleGenerator:
    hamiltonian: np.ndarray
    relaxation: np.ndarray
    dipoles: Dict[str, np.ndarray]  # Cartesian e<-g elements, shape (3,) per axis
    superoperator: np.ndarray       # (16, 16) acting on row-major vec(rho)
    probe: ProbeConfig
    polarization: Polarization

    def derivative(self, rho: np.ndarray) -> np.ndarray:
        return (self.superoperator @ np.asarray(rho).ravel()).reshape(FULL_DIM, FULL_DIM)


def _check_scope(spec: TransitionSpec) -> None:
    if spec.f_ground != 1 or spec.f_excited != 0:
        raise ForbiddenTransitionError(
            f"master-equation model supports f=1 -> F=0 only, got f={spec.f_ground}, F={spec.f_excited}"
        )


def spherical_dipole_elements() -> np.ndarray:
    """<e|d_q|m> for rows q = -1, 0, +1 and columns m = -1, 0, +1 (unit reduced element)."""
    elements = np.zeros((3, GROUND_DIM))
    for row, q in enumerate((-1, 0, 1)):
        for col, m in enumerate((-1, 0, 1)):
            # <F mu| d_q |f m> = (-1)^(F - mu) 3j(F 1 f; -mu q m) with F = mu = 0
            elements[row, col] = float(wigner3j(0, 1, 1, 0, q, m))
    return elements


def cartesian_dipole_elements() -> Dict[str, np.ndarray]:
    """<e|d_i|m> for i in x, y, z from the spherical transform."""
    spherical = spherical_dipole_elements()
    cartesian = spherical_transform().cartesian_operators(spherical)
    return {axis: np.asarray(cartesian[k], dtype=complex) for k, axis in enumerate("xyz")}


def _full_operator(elements: np.ndarray) -> np.ndarray:
    """Hermitian 4x4 operator with e<-g row `elements` and its conjugate."""
    op = np.zeros((FULL_DIM, FULL_DIM), dtype=complex)
    op[EXCITED, :GROUND_DIM] = elements
    op[:GROUND_DIM, EXCITED] = np.conj(elements)
    return op


def _left(a: np.ndarray) -> np.ndarray:
    return np.kron(a, np.eye(FULL_DIM))


def _right(b: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(FULL_DIM), b.T)


def build_generator(spec: TransitionSpec, probe: ProbeConfig, polarization: Polarization = "y") -> LiouvilleGenerator:
    """
    Assemble Hamiltonian, relaxation and repopulation into a 16x16 superoperator.

    Raises:
        ForbiddenTransitionError: For transitions other than f=1 -> F=0
        ValueError: For an unknown polarization
    """
    _check_scope(spec)
    if polarization not in ("x", "y"):
        raise ValueError(f"unknown polarization '{polarization}'")
    if probe.doppler > 0:
        logger.warning("Master-equation model ignores Doppler broadening (doppler=%.3g)", probe.doppler)

    p_ground = np.diag([1.0, 1.0, 1.0, 0.0]).astype(complex)
    p_excited = np.diag([0.0, 0.0, 0.0, 1.0]).astype(complex)
    _, _, jz = angular_momentum_operators(1)
    zeeman = np.zeros((FULL_DIM, FULL_DIM), dtype=complex)
    zeeman[:GROUND_DIM, :GROUND_DIM] = jz
    # F=0 has no Zeeman structure; the beta P_e Jz P_e term vanishes identically

    dipoles = cartesian_dipole_elements()
    optical = _full_operator(dipoles[polarization])
    hamiltonian = (
        probe.detuning * p_excited
        + probe.larmor * zeeman
        - 0.5 * probe.rabi * optical
    )
    relaxation = probe.gamma_e * p_excited + probe.gamma_g * np.eye(FULL_DIM)

    identity = np.eye(FULL_DIM)
    superop = -1j * (_left(hamiltonian) - _right(hamiltonian))
    superop += -0.5 * (_left(relaxation) + _right(relaxation))

    spherical = spherical_dipole_elements()
    strength = float(np.sum(np.abs(spherical) ** 2))
    for row in spherical:
        jump = np.zeros((FULL_DIM, FULL_DIM), dtype=complex)
        jump[:GROUND_DIM, EXCITED] = np.conj(row)
        superop += probe.gamma_e / strength * np.kron(jump, jump.conj())

    # gamma Tr(rho) P_g / 3
    superop += probe.gamma_g / GROUND_DIM * np.outer(p_ground.ravel(), identity.ravel())

    logger.debug(
        "Built generator",
        extra={"polarization": polarization, "rabi": probe.rabi, "branching_total": strength},
    )
    return LiouvilleGenerator(
        hamiltonian=hamiltonian,
        relaxation=relaxation,
        dipoles=dipoles,
        superoperator=superop,
        probe=probe,
        polarization=polarization,
    )


def embed_ground_state(rho: DensityMatrix) -> np.ndarray:
    if rho.dim != GROUND_DIM:
        raise ForbiddenTransitionError(f"expected a qutrit ground state, got dim {rho.dim}")
    full = np.zeros((FULL_DIM, FULL_DIM), dtype=complex)
    full[:GROUND_DIM, :GROUND_DIM] = rho.elements
    return full


def _as_full(rho0) -> np.ndarray:
    if isinstance(rho0, DensityMatrix):
        return embed_ground_state(rho0)
    full = np.asarray(rho0, dtype=complex)
    if full.shape != (FULL_DIM, FULL_DIM):
        raise ValueError(f"full state must be 4x4, got {full.shape}")
    return full


def _real_form(superop: np.ndarray) -> np.ndarray:
    re, im = superop.real, superop.imag
    return np.block([[re, -im], [im, re]])


def integrate(
    gen: LiouvilleGenerator,
    rho0,
    t_span,
    dt_control: Optional[float] = None,
    t_eval=None,
) -> FullStateSequence:
    """
    Adaptive integration of the master equation.

    Args:
        gen: Generator from build_generator
        rho0: 4x4 initial state or a ground-state DensityMatrix
        t_span: (t0, t1)
        dt_control: Output sampling step (ignored when t_eval is given)
        t_eval: Explicit output times

    Returns:
        FullStateSequence at the output times

    Raises:
        IntegrationError: When every method of settings.integrator_methods fails
    """
    full = _as_full(rho0)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t_eval is None:
        step = dt_control if dt_control else (t1 - t0) / 100
        t_eval = np.arange(t0, t1 + 0.5 * step, step)
        t_eval = t_eval[t_eval <= t1]
    t_eval = np.asarray(t_eval, dtype=float)

    real_generator = _real_form(gen.superoperator)
    y0 = np.concatenate([full.real.ravel(), full.imag.ravel()])
    n = FULL_DIM * FULL_DIM

    def rhs(_t, y):
        return real_generator @ y

    def jacobian(_t, _y):
        return real_generator

    def solve(method: str) -> FullStateSequence:
        kwargs = {"jac": jacobian} if method in ("Radau", "BDF", "LSODA") else {}
        result = solve_ivp(
            rhs,
            (t0, t1),
            y0,
            method=method,
            t_eval=t_eval,
            rtol=settings.integrator_rtol,
            atol=settings.integrator_atol,
            **kwargs,
        )
        if not result.success or not np.all(np.isfinite(result.y)):
            t_failed = float(result.t[-1]) if result.t.size else t0
            raise IntegrationError(
                f"{method} failed at t={t_failed:.4g}: {result.message}",
                method=method,
                t_failed=t_failed,
                nfev=int(result.nfev),
            )
        logger.debug(f"{method} finished", extra={"nfev": int(result.nfev), "n_out": result.t.size})
        states = (result.y[:n] + 1j * result.y[n:]).T.reshape(-1, FULL_DIM, FULL_DIM)
        return FullStateSequence(times=result.t, states=states)

    return run_with_fallback(solve, settings.integrator_methods)


def propagate(gen: LiouvilleGenerator, rho0, times) -> FullStateSequence:
    """
    Exact propagation rho(t) = exp(L t) rho0 at the given times.

    Consecutive equal steps reuse one matrix exponential, so uniform grids
    cost a single expm.
    """
    full = _as_full(rho0)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) < 0):
        raise ValueError("times must be a non-empty non-decreasing 1-D array")

    vec = full.ravel()
    if times[0] != 0:
        vec = expm(gen.superoperator * times[0]) @ vec
    states = np.empty((times.size, FULL_DIM, FULL_DIM), dtype=complex)
    states[0] = vec.reshape(FULL_DIM, FULL_DIM)

    cached_step, cached_map = None, None
    for k in range(1, times.size):
        step = times[k] - times[k - 1]
        if cached_step is None or not math.isclose(step, cached_step, rel_tol=1e-12, abs_tol=0.0):
            cached_step, cached_map = step, expm(gen.superoperator * step)
        vec = cached_map @ vec
        states[k] = vec.reshape(FULL_DIM, FULL_DIM)
    return FullStateSequence(times=times, states=states)


def steady_state(gen: LiouvilleGenerator) -> np.ndarray:
    """
    Stationary 4x4 state from the null space of the superoperator.

    Raises:
        ValueError: If the stationary state is not unique (e.g. gamma = 0 without pumping)
    """
    kernel = null_space(gen.superoperator, rcond=1e-10)
    if kernel.shape[1] != 1:
        raise ValueError(f"steady state is not unique (kernel dimension {kernel.shape[1]})")
    rho = kernel[:, 0].reshape(FULL_DIM, FULL_DIM)
    rho = rho / np.trace(rho)
    return (rho + rho.conj().T) / 2


def saturation_kappa2(probe: ProbeConfig) -> float:
    """Probe saturation parameter Omega_R^2 / (Gamma gamma)."""
    if probe.gamma_e <= 0 or probe.gamma_g <= 0:
        raise ValueError("kappa2 needs positive Gamma and gamma")
    return probe.rabi ** 2 / (probe.gamma_e * probe.gamma_g)


def rabi_for_kappa2(kappa2: float, probe: ProbeConfig) -> float:
    if kappa2 < 0:
        raise ValueError("kappa2 must be non-negative")
    return math.sqrt(kappa2 * probe.gamma_e * probe.gamma_g)


def signal_from_integrator(
    sequence: FullStateSequence,
    spec: TransitionSpec,
    probe: ProbeConfig,
    polarization: Polarization = "y",
    pulse: Optional[PulseAngles] = None,
) -> SignalTrace:
    """
    Light-parameter changes from the optical coherences rho_em(t).

    With z_i = -(2 chi L / Omega_R) sum_m <m|d_i|e> rho_em for the analysis
    axis i orthogonal to the probe polarization:
        delta_epsilon = Re z_perp,  delta_alpha = -Im z_perp
        delta_phase   = Re z_par,   delta_absorption = -Im z_par

    Raises:
        ValueError: If the probe Rabi frequency is zero
    """
    _check_scope(spec)
    if probe.rabi <= 0:
        raise ValueError("signals need a nonzero probe Rabi frequency")
    dipoles = cartesian_dipole_elements()
    perpendicular = "x" if polarization == "y" else "y"
    coherences = sequence.states[:, EXCITED, :GROUND_DIM]  # rho_em
    scale = -2 * chi(spec) * spec.cell_length / (probe.rabi * probe.rate_unit)

    z_perp = scale * coherences @ np.conj(dipoles[perpendicular])
    z_par = scale * coherences @ np.conj(dipoles[polarization])
    meta = TraceMeta(
        transition=spec,
        probe=probe,
        pulse=pulse or PulseAngles(),
        source="integrator",
        polarization=polarization,
        validity_flags=validity_flags(probe),
    )
    return SignalTrace(
        times=sequence.times,
        delta_alpha=-z_perp.imag,
        delta_epsilon=z_perp.real,
        delta_absorption=-z_par.imag,
        delta_phase=z_par.real,
        meta=meta,
    )


def integrated_signal(
    rho0: DensityMatrix,
    pulse: PulseAngles,
    spec: TransitionSpec,
    probe: ProbeConfig,
    times=None,
    exact: bool = True,
    polarization: Polarization = "y",
) -> SignalTrace:
    """
    Apply the control pulse to the ground state, switch the probe on at t=0 and
    compute signals with back-action included.

    Args:
        exact: Use matrix-exponential propagation (uniform grids) instead of solve_ivp
    """
    times = default_time_grid(probe) if times is None else np.asarray(times, dtype=float)
    gen = build_generator(spec, probe, polarization)
    start = embed_ground_state(rotate_state(rho0, pulse))
    if exact:
        sequence = propagate(gen, start, times)
    else:
        sequence = integrate(gen, start, (0.0, float(times[-1])), t_eval=times)
    return signal_from_integrator(sequence, spec, probe, polarization, pulse)
