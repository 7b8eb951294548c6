"""
Exact angular-momentum algebra.

Wigner 3j and 6j symbols are evaluated with the Racah sum over exact integer
factorials and returned as SqrtRational values (sign * sqrt(p/q)), so that
selection rules, orthogonality and symmetry hold exactly. Rotation matrices
are floating point.

Conventions (fixed for the whole package):
    - Magnetic sublevels are ordered m = -j, ..., +j (index = m + j).
    - Euler angles follow z-y-z with active rotations,
      D(alpha, beta, gamma) = exp(-i alpha Jz) exp(-i beta Jy) exp(-i gamma Jz).
      A control pulse (phi, theta) is D(0, theta, phi): rotation about z by phi,
      then about y by theta.
    - The spherical transform U maps Cartesian (x, y, z) components to
      spherical components q = -1, 0, +1 (rows in that order):
      A_{+1} = -(A_x + i A_y)/sqrt(2), A_0 = A_z, A_{-1} = (A_x - i A_y)/sqrt(2).
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Number = Union[int, float, Fraction, "HalfInt"]


@dataclass(frozen=True, order=True)
class HalfInt:
    """Integer or half-integer stored as twice its value."""

    twice_value: int

    @classmethod
    def of(cls, value: Number) -> "HalfInt":
        if isinstance(value, HalfInt):
            return value
        twice = Fraction(value) * 2
        if twice.denominator != 1:
            raise ValueError(f"{value!r} is not an integer or half-integer")
        return cls(int(twice))

    @property
    def value(self) -> Fraction:
        return Fraction(self.twice_value, 2)

    def __float__(self) -> float:
        return self.twice_value / 2

    def __repr__(self) -> str:
        if self.twice_value % 2 == 0:
            return f"HalfInt({self.twice_value // 2})"
        return f"HalfInt({self.twice_value}/2)"


def _twice(value: Number) -> int:
    return HalfInt.of(value).twice_value


def projections(j: Number) -> np.ndarray:
    """Magnetic quantum numbers m = -j..j as floats, in basis order."""
    tj = _twice(j)
    if tj < 0:
        raise ValueError("angular momentum must be non-negative")
    return np.array([(-tj + 2 * k) / 2 for k in range(tj + 1)])


@dataclass(frozen=True)
class SqrtRational:
    """Exact value sign * sqrt(square) with a non-negative rational square."""

    sign: int
    square: Fraction

    @classmethod
    def zero(cls) -> "SqrtRational":
        return cls(0, Fraction(0))

    @classmethod
    def from_signed_square(cls, sign: int, square: Fraction) -> "SqrtRational":
        if square == 0 or sign == 0:
            return cls.zero()
        return cls(1 if sign > 0 else -1, Fraction(square))

    def __float__(self) -> float:
        return self.sign * math.sqrt(self.square)

    def __neg__(self) -> "SqrtRational":
        return SqrtRational(-self.sign, self.square)

    def __mul__(self, other: "SqrtRational") -> "SqrtRational":
        return SqrtRational.from_signed_square(self.sign * other.sign, self.square * other.square)

    def squared(self) -> Fraction:
        return self.square if self.sign else Fraction(0)

    def is_zero(self) -> bool:
        return self.sign == 0


# ---------------------------------------------------------------------------
# Wigner symbols
# ---------------------------------------------------------------------------

def _fact(n: int) -> int:
    return math.factorial(n)


def _triangle_ok(t1: int, t2: int, t3: int) -> bool:
    """Triangle condition on twice-values, including integer perimeter."""
    if (t1 + t2 + t3) % 2:
        return False
    return abs(t1 - t2) <= t3 <= t1 + t2


def _delta(t1: int, t2: int, t3: int) -> Fraction:
    """Triangle coefficient (a+b-c)!(a-b+c)!(-a+b+c)!/(a+b+c+1)! on twice-values."""
    return Fraction(
        _fact((t1 + t2 - t3) // 2) * _fact((t1 - t2 + t3) // 2) * _fact((-t1 + t2 + t3) // 2),
        _fact((t1 + t2 + t3) // 2 + 1),
    )


@lru_cache(maxsize=65536)
def _wigner3j_twice(t1: int, t2: int, t3: int, s1: int, s2: int, s3: int) -> SqrtRational:
    if s1 + s2 + s3 != 0:
        return SqrtRational.zero()
    if not _triangle_ok(t1, t2, t3):
        return SqrtRational.zero()
    for t, s in ((t1, s1), (t2, s2), (t3, s3)):
        if abs(s) > t or (t - s) % 2:
            return SqrtRational.zero()

    # integer arguments of the Racah sum
    a = (t1 + t2 - t3) // 2
    b = (t1 - s1) // 2
    c = (t2 + s2) // 2
    d = (t3 - t2 + s1) // 2
    e = (t3 - t1 - s2) // 2
    k_min = max(0, -d, -e)
    k_max = min(a, b, c)

    total = Fraction(0)
    for k in range(k_min, k_max + 1):
        denom = _fact(k) * _fact(d + k) * _fact(e + k) * _fact(a - k) * _fact(b - k) * _fact(c - k)
        total += Fraction((-1) ** k, denom)
    if total == 0:
        return SqrtRational.zero()

    prefactor = _delta(t1, t2, t3) * (
        _fact((t1 + s1) // 2) * _fact((t1 - s1) // 2)
        * _fact((t2 + s2) // 2) * _fact((t2 - s2) // 2)
        * _fact((t3 + s3) // 2) * _fact((t3 - s3) // 2)
    )
    phase = 1 if ((t1 - t2 - s3) // 2) % 2 == 0 else -1
    sign = phase * (1 if total > 0 else -1)
    return SqrtRational.from_signed_square(sign, prefactor * total * total)


def wigner3j(j1: Number, j2: Number, j3: Number, m1: Number, m2: Number, m3: Number) -> SqrtRational:
    """
    Wigner 3j symbol (j1 j2 j3; m1 m2 m3).

    Returns exactly zero for any violated selection rule (projection sum,
    triangle inequality, |m| > j, parity of j - m) instead of raising.
    """
    return _wigner3j_twice(_twice(j1), _twice(j2), _twice(j3), _twice(m1), _twice(m2), _twice(m3))


@lru_cache(maxsize=65536)
def _wigner6j_twice(t1: int, t2: int, t3: int, t4: int, t5: int, t6: int) -> SqrtRational:
    triads = ((t1, t2, t3), (t1, t5, t6), (t4, t2, t6), (t4, t5, t3))
    if not all(_triangle_ok(*triad) for triad in triads):
        return SqrtRational.zero()

    a1 = (t1 + t2 + t3) // 2
    a2 = (t1 + t5 + t6) // 2
    a3 = (t4 + t2 + t6) // 2
    a4 = (t4 + t5 + t3) // 2
    b1 = (t1 + t2 + t4 + t5) // 2
    b2 = (t2 + t3 + t5 + t6) // 2
    b3 = (t3 + t1 + t6 + t4) // 2
    k_min = max(a1, a2, a3, a4)
    k_max = min(b1, b2, b3)

    total = Fraction(0)
    for k in range(k_min, k_max + 1):
        denom = (
            _fact(k - a1) * _fact(k - a2) * _fact(k - a3) * _fact(k - a4)
            * _fact(b1 - k) * _fact(b2 - k) * _fact(b3 - k)
        )
        total += Fraction((-1) ** k * _fact(k + 1), denom)
    if total == 0:
        return SqrtRational.zero()

    prefactor = _delta(*triads[0]) * _delta(*triads[1]) * _delta(*triads[2]) * _delta(*triads[3])
    return SqrtRational.from_signed_square(1 if total > 0 else -1, prefactor * total * total)


def wigner6j(j1: Number, j2: Number, j3: Number, j4: Number, j5: Number, j6: Number) -> SqrtRational:
    """Wigner 6j symbol {j1 j2 j3; j4 j5 j6}; zero when any triad is not triangular."""
    return _wigner6j_twice(_twice(j1), _twice(j2), _twice(j3), _twice(j4), _twice(j5), _twice(j6))


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def wigner_d(j: Number, theta: float) -> np.ndarray:
    """
    Wigner small-d matrix d^{(j)}_{m'm}(theta) in the m = -j..j ordering.

    Rows are indexed by m', columns by m, so that exp(-i theta Jy) = d(theta).

    Args:
        j: Angular momentum (integer or half-integer, >= 0)
        theta: Rotation angle about y in radians

    Returns:
        Real orthogonal matrix of shape (2j+1, 2j+1)
    """
    tj = _twice(j)
    if tj < 0:
        raise ValueError("angular momentum must be non-negative")
    dim = tj + 1
    cos_half = math.cos(theta / 2)
    sin_half = math.sin(theta / 2)
    d = np.zeros((dim, dim))

    for row in range(dim):
        tm_p = -tj + 2 * row  # 2m'
        for col in range(dim):
            tm = -tj + 2 * col  # 2m
            jpm_p = (tj + tm_p) // 2
            jmm_p = (tj - tm_p) // 2
            jpm = (tj + tm) // 2
            jmm = (tj - tm) // 2
            norm = math.sqrt(_fact(jpm_p) * _fact(jmm_p) * _fact(jpm) * _fact(jmm))
            shift = (tm_p - tm) // 2  # m' - m
            k_min = max(0, -shift)
            k_max = min(jpm, jmm_p)
            value = 0.0
            for k in range(k_min, k_max + 1):
                cos_power = tj - 2 * k - shift
                sin_power = 2 * k + shift
                value += (
                    (-1) ** (k + shift)
                    * norm
                    / (_fact(jpm - k) * _fact(k) * _fact(jmm_p - k) * _fact(k + shift))
                    * cos_half ** cos_power
                    * sin_half ** sin_power
                )
            d[row, col] = value
    return d


def rotation_operator(j: Number, phi: float, theta: float) -> np.ndarray:
    """
    Control-pulse rotation D(0, theta, phi) = exp(-i theta Jy) exp(-i phi Jz).

    Matrix elements are D_{m'm} = d_{m'm}(theta) exp(-i phi m).
    """
    m = projections(j)
    return wigner_d(j, theta) * np.exp(-1j * phi * m)[np.newaxis, :]


def angular_momentum_operators(j: Number) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spin matrices (Jx, Jy, Jz) in the m = -j..j ordering, hbar = 1."""
    m = projections(j)
    jj = float(HalfInt.of(j))
    dim = len(m)
    j_plus = np.zeros((dim, dim), dtype=complex)
    for col in range(dim - 1):
        j_plus[col + 1, col] = math.sqrt(jj * (jj + 1) - m[col] * (m[col] + 1))
    j_minus = j_plus.conj().T
    jx = (j_plus + j_minus) / 2
    jy = (j_plus - j_minus) / 2j
    jz = np.diag(m).astype(complex)
    return jx, jy, jz


# ---------------------------------------------------------------------------
# Spherical basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphericalTransform:
    """Unitary U with A_q = sum_i U[q, i] A_i (rows q = -1, 0, +1; columns x, y, z)."""

    matrix: np.ndarray

    def to_spherical(self, cartesian: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(cartesian)

    def to_cartesian(self, spherical: np.ndarray) -> np.ndarray:
        return self.matrix.conj().T @ np.asarray(spherical)

    def cartesian_operators(self, spherical_ops) -> list:
        """Cartesian operators A_i = sum_q conj(U[q, i]) A_q from spherical ones."""
        u_conj = self.matrix.conj()
        return [sum(u_conj[q, i] * spherical_ops[q] for q in range(3)) for i in range(3)]


def spherical_transform() -> SphericalTransform:
    s = 1 / math.sqrt(2)
    matrix = np.array(
        [
            [s, -1j * s, 0.0],   # q = -1
            [0.0, 0.0, 1.0],     # q = 0
            [-s, -1j * s, 0.0],  # q = +1
        ],
        dtype=complex,
    )
    return SphericalTransform(matrix)
