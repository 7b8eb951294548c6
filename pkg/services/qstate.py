"""
Density-matrix value type and state utilities.

Basis order is m = -f, ..., +f (index = m + f), shared with services/angmom.py.

Cholesky parameters: a real vector x of length dim**2 describing a
lower-triangular complex factor T.
    x[0:dim]           -> real diagonal T[k, k]
    x[dim:] in pairs   -> (Re, Im) of T[a, b] for a > b, row-major
The physical state is rho = T T^dagger / Tr(T T^dagger), and
Tr(T T^dagger) = sum(x**2).
"""

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.stats import unitary_group

from models.schemas import DensityMatrixPayload, PulseAngles
from services.angmom import rotation_operator
from utils.errors import DimensionMismatchError, UnphysicalStateError

logger = logging.getLogger(__name__)

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "fixtures"

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
EIGENVALUE_TOL = -1e-10
SQRT_CUTOFF = 1e-14
PURE_TOL = 1e-12

Seed = Union[int, np.random.Generator, np.random.SeedSequence, None]


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite matrix over magnetic sublevels."""

    elements: np.ndarray = field(repr=False)

    def __post_init__(self):
        rho = np.array(self.elements, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise UnphysicalStateError(f"density matrix must be square, got shape {rho.shape}")
        if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
            raise UnphysicalStateError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1) > TRACE_TOL:
            raise UnphysicalStateError(f"density matrix trace is {np.trace(rho).real:.3e}, expected 1")
        min_eig = float(np.min(np.linalg.eigvalsh(rho)))
        if min_eig < EIGENVALUE_TOL:
            raise UnphysicalStateError(f"density matrix has negative eigenvalue {min_eig:.3e}")
        rho.setflags(write=False)
        object.__setattr__(self, "elements", rho)

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    def __repr__(self) -> str:
        return f"DensityMatrix(dim={self.dim}, purity={purity(self):.4f})"

    def to_payload(self) -> DensityMatrixPayload:
        return DensityMatrixPayload(
            dim=self.dim,
            re=self.elements.real.ravel().tolist(),
            im=self.elements.imag.ravel().tolist(),
        )

    @classmethod
    def from_payload(cls, payload: DensityMatrixPayload) -> "DensityMatrix":
        re = np.asarray(payload.re, dtype=float).reshape(payload.dim, payload.dim)
        im = np.asarray(payload.im, dtype=float).reshape(payload.dim, payload.dim)
        return cls(re + 1j * im)

    def to_json(self) -> str:
        return self.to_payload().model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> "DensityMatrix":
        return cls.from_payload(DensityMatrixPayload.model_validate_json(text))


def _check_dims(rho_a: DensityMatrix, rho_b: DensityMatrix) -> None:
    if rho_a.dim != rho_b.dim:
        raise DimensionMismatchError(f"dimension mismatch: {rho_a.dim} vs {rho_b.dim}")


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(matrix)
    eigvals = np.where(eigvals > SQRT_CUTOFF, eigvals, 0.0)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.conj().T


def _pure_vector(matrix: np.ndarray) -> Optional[np.ndarray]:
    """Dominant eigenvector when the state is pure to PURE_TOL, else None."""
    eigvals, eigvecs = np.linalg.eigh(matrix)
    if eigvals[-1] < 1.0 - PURE_TOL:
        return None
    return eigvecs[:, -1]


def fidelity(rho_r: DensityMatrix, rho_p: DensityMatrix) -> float:
    """
    Uhlmann fidelity (Tr sqrt(sqrt(rho_r) rho_p sqrt(rho_r)))^2.

    Evaluated as the squared nuclear norm of sqrt(rho_r) sqrt(rho_p). If either
    state is pure this reduces to <psi|rho|psi>, which is used directly.

    Raises:
        DimensionMismatchError: If the states live in different spaces
    """
    _check_dims(rho_r, rho_p)
    for pure, other in ((rho_p, rho_r), (rho_r, rho_p)):
        psi = _pure_vector(pure.elements)
        if psi is not None:
            value = float(np.vdot(psi, other.elements @ psi).real)
            return min(max(value, 0.0), 1.0)
    product = _psd_sqrt(rho_r.elements) @ _psd_sqrt(rho_p.elements)
    value = float(np.sum(np.linalg.svd(product, compute_uv=False)) ** 2)
    return min(max(value, 0.0), 1.0)


def purity(rho: DensityMatrix) -> float:
    return float(np.real(np.trace(rho.elements @ rho.elements)))


def maximally_mixed(dim: int = 3) -> DensityMatrix:
    return DensityMatrix(np.eye(dim, dtype=complex) / dim)


def pure_state(vector: np.ndarray) -> DensityMatrix:
    psi = np.asarray(vector, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return DensityMatrix(np.outer(psi, psi.conj()))


def rotate_state(rho: DensityMatrix, pulse: PulseAngles) -> DensityMatrix:
    """Post-pulse state D rho D^dagger with D = D(0, theta, phi)."""
    j = (rho.dim - 1) / 2
    d = rotation_operator(j, pulse.phi, pulse.theta)
    rotated = d @ rho.elements @ d.conj().T
    return DensityMatrix((rotated + rotated.conj().T) / 2)


# ---------------------------------------------------------------------------
# Random states
# ---------------------------------------------------------------------------

def random_unitary(dim: int, seed: Seed = None) -> np.ndarray:
    """Haar-random unitary (QR of a complex Gaussian matrix with phase-fixed R)."""
    rng = np.random.default_rng(seed)
    return unitary_group.rvs(dim, random_state=rng)


def random_pure(seed: Seed = None, dim: int = 3) -> DensityMatrix:
    """Haar-random pure state U|m=+f>."""
    unitary = random_unitary(dim, seed)
    return pure_state(unitary[:, dim - 1])


def random_mixed(seed: Seed = None, target_purity: float = 0.6, dim: int = 3) -> DensityMatrix:
    """
    Blend p |psi><psi| + (1 - p) 1/dim of a Haar-random pure state with the
    maximally mixed state, with p chosen so that Tr(rho^2) = target_purity.

    Raises:
        ValueError: If target_purity is outside [1/dim, 1]
    """
    if not (1 / dim - 1e-12 <= target_purity <= 1 + 1e-12):
        raise ValueError(f"target purity {target_purity} outside [1/{dim}, 1]")
    weight = np.sqrt(max(dim * target_purity - 1, 0.0) / (dim - 1))
    if weight == 0.0:
        return maximally_mixed(dim)
    pure = random_pure(seed, dim).elements
    return DensityMatrix(weight * pure + (1 - weight) * np.eye(dim) / dim)


# ---------------------------------------------------------------------------
# Reference states
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _load_fixture(name: str) -> DensityMatrix:
    path = FIXTURE_DIR / f"{name}.json"
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    return DensityMatrix.from_payload(DensityMatrixPayload.model_validate(document["state"]))


def reference_state(name: str) -> DensityMatrix:
    """
    Named f=1 reference states.

    thermal:   equal populations, no coherences
    aligned_y: optical-pumping dark state of a y-polarized f=1 -> F=0 pump
               (rho[1,-1] = -1/4, so <alpha_R> = -1/6 with D = exp(-i theta Jy) exp(-i phi Jz))
    stretched: |m=+1><m=+1|

    Raises:
        ValueError: For an unknown name
    """
    if name == "thermal":
        return maximally_mixed(3)
    if name == "stretched":
        return pure_state(np.array([0.0, 0.0, 1.0]))
    if name == "aligned_y":
        return _load_fixture("aligned_y")
    raise ValueError(f"unknown reference state '{name}'")


# ---------------------------------------------------------------------------
# Cholesky parameterization
# ---------------------------------------------------------------------------

def n_params(dim: int) -> int:
    return dim * dim


def dim_from_params(size: int) -> int:
    dim = int(round(np.sqrt(size)))
    if dim * dim != size:
        raise DimensionMismatchError(f"{size} parameters do not describe a square factor")
    return dim


def lower_indices(dim: int):
    """(row, col) pairs of the strictly lower triangle in row-major order."""
    return [(a, b) for a in range(dim) for b in range(a)]


def cholesky_factor(params: np.ndarray) -> np.ndarray:
    x = np.asarray(params, dtype=float)
    dim = dim_from_params(x.size)
    factor = np.diag(x[:dim]).astype(complex)
    for k, (a, b) in enumerate(lower_indices(dim)):
        factor[a, b] = x[dim + 2 * k] + 1j * x[dim + 2 * k + 1]
    return factor


def to_density(params: np.ndarray) -> DensityMatrix:
    """Physical state T T^dagger / Tr(T T^dagger); the zero vector maps to 1/dim."""
    x = np.asarray(params, dtype=float)
    dim = dim_from_params(x.size)
    norm = float(np.dot(x, x))
    if norm == 0.0:
        return maximally_mixed(dim)
    factor = cholesky_factor(x)
    rho = factor @ factor.conj().T / norm
    return DensityMatrix((rho + rho.conj().T) / 2)


def from_density(rho: DensityMatrix) -> np.ndarray:
    """
    Cholesky parameters x with to_density(x) == rho and sum(x**2) == 1.

    Works for rank-deficient states: a square root M with M M^dagger = rho is
    triangularized by QR of M^dagger, and the diagonal phases are removed.
    """
    eigvals, eigvecs = np.linalg.eigh(rho.elements)
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    _, upper = np.linalg.qr(root.conj().T)
    diag = np.diag(upper)
    phases = np.where(np.abs(diag) > 0, np.conj(diag) / np.maximum(np.abs(diag), 1e-300), 1.0)
    upper = phases[:, np.newaxis] * upper
    factor = upper.conj().T

    dim = rho.dim
    x = np.zeros(n_params(dim))
    x[:dim] = np.real(np.diag(factor))
    for k, (a, b) in enumerate(lower_indices(dim)):
        x[dim + 2 * k] = factor[a, b].real
        x[dim + 2 * k + 1] = factor[a, b].imag
    return x


def maximally_mixed_params(dim: int = 3) -> np.ndarray:
    x = np.zeros(n_params(dim))
    x[:dim] = 1.0
    return x


def as_density(value: Union[DensityMatrix, np.ndarray, DensityMatrixPayload, None]) -> Optional[DensityMatrix]:
    if value is None or isinstance(value, DensityMatrix):
        return value
    if isinstance(value, DensityMatrixPayload):
        return DensityMatrix.from_payload(value)
    return DensityMatrix(np.asarray(value))
