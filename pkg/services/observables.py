"""
Effective observables of the f -> F probe transition.

alpha_r, alpha_i couple Delta m = 2 sublevel pairs and drive the 2 Omega_L
oscillation of the signals; beta (orientation) and delta (absorption) are
diagonal. delta_s is the isotropic absorption fraction, i.e. <delta> in the
maximally mixed state.
"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from models.schemas import PulseAngles
from services.angmom import HalfInt, Number, projections, rotation_operator, wigner3j
from services.qstate import DensityMatrix
from utils.errors import DimensionMismatchError, ForbiddenTransitionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ObservableSet:
    f: HalfInt
    F: HalfInt
    alpha_r: np.ndarray
    alpha_i: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    delta_s: float

    @property
    def dim(self) -> int:
        return self.alpha_r.shape[0]

    def index(self, m: float) -> int:
        """Basis index of sublevel m."""
        return int(round(m + float(self.f)))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"alpha_r": self.alpha_r, "alpha_i": self.alpha_i, "beta": self.beta, "delta": self.delta}


def check_dipole_allowed(f: Number, F: Number) -> None:
    tf = HalfInt.of(f).twice_value
    tF = HalfInt.of(F).twice_value
    if tf < 0 or tF < 0 or abs(tf - tF) > 2 or tf + tF < 2 or (tf - tF) % 2:
        raise ForbiddenTransitionError(f"f={f} -> F={F} is not a dipole-allowed transition")


def _three_j(*args) -> float:
    return float(wigner3j(*args))


def build_observables(f: Number, F: Number) -> ObservableSet:
    """
    Assemble alpha_r, alpha_i, beta, delta and delta_s from 3j products.

    Args:
        f: Ground-state angular momentum
        F: Excited-state angular momentum

    Returns:
        ObservableSet with (2f+1)-dimensional matrices in the m = -f..f basis

    Raises:
        ForbiddenTransitionError: If f -> F is not dipole-allowed
    """
    check_dipole_allowed(f, F)
    f_h, F_h = HalfInt.of(f), HalfInt.of(F)
    fv, Fv = f_h.value, F_h.value
    ms = projections(f_h)
    dim = len(ms)

    alpha_r = np.zeros((dim, dim), dtype=complex)
    alpha_i = np.zeros((dim, dim), dtype=complex)
    for k in range(dim - 2):
        m = -fv + k
        weight = _three_j(fv, 1, Fv, -m - 2, 1, m + 1) * _three_j(Fv, 1, fv, -m - 1, 1, m)
        alpha_r[k, k + 2] += weight
        alpha_r[k + 2, k] += weight
        alpha_i[k, k + 2] += 1j * weight
        alpha_i[k + 2, k] += -1j * weight

    sigma_plus = np.array([_three_j(fv, 1, Fv, -m, 1, m - 1) ** 2 for m in ms])
    sigma_minus = np.array([_three_j(fv, 1, Fv, -m, -1, m + 1) ** 2 for m in ms])
    beta = np.diag(sigma_plus - sigma_minus).astype(complex)
    delta = np.diag(sigma_plus + sigma_minus).astype(complex)
    delta_s = float(2.0 / dim * np.sum(sigma_plus))

    logger.debug("Built observables", extra={"f": float(f_h), "F": float(F_h), "delta_s": delta_s})
    return ObservableSet(f=f_h, F=F_h, alpha_r=alpha_r, alpha_i=alpha_i, beta=beta, delta=delta, delta_s=delta_s)


def expectation(obs: np.ndarray, rho: DensityMatrix):
    """
    Tr(rho obs); real for Hermitian observables.

    Raises:
        DimensionMismatchError: If obs and rho have different dimensions
    """
    obs = np.asarray(obs)
    if obs.shape != rho.elements.shape:
        raise DimensionMismatchError(f"observable {obs.shape} vs state {rho.elements.shape}")
    value = np.trace(rho.elements @ obs)
    if np.allclose(obs, obs.conj().T, atol=1e-14):
        if abs(value.imag) > 1e-12:
            logger.warning("Hermitian expectation has imaginary part %.3e", value.imag)
        return float(value.real)
    return complex(value)


def rotate_observable(obs: np.ndarray, pulse: PulseAngles, f: Number) -> np.ndarray:
    """Rotated observable D^dagger obs D with D = D(0, theta, phi)."""
    d = rotation_operator(f, pulse.phi, pulse.theta)
    return d.conj().T @ np.asarray(obs) @ d


def rotated_expectations(observables: ObservableSet, rho: DensityMatrix, pulse: PulseAngles) -> Dict[str, float]:
    """<X'> for X in (alpha_r, alpha_i, beta, delta) after the pulse."""
    if rho.dim != observables.dim:
        raise DimensionMismatchError(f"state dim {rho.dim} vs observables dim {observables.dim}")
    d = rotation_operator(observables.f, pulse.phi, pulse.theta)
    rotated_state = d @ rho.elements @ d.conj().T
    return {
        name: float(np.real(np.trace(rotated_state @ matrix)))
        for name, matrix in observables.as_dict().items()
    }
