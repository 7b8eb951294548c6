import math
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _is_half_integer(value: float) -> bool:
    return float(2 * value).is_integer()


def _wrap_angle(value: float) -> float:
    """Map an angle to [-pi, pi)."""
    wrapped = math.fmod(value + math.pi, 2 * math.pi)
    if wrapped < 0:
        wrapped += 2 * math.pi
    return wrapped - math.pi


# ---------------------------------------------------------------------------
# Physical parameters
# ---------------------------------------------------------------------------

class TransitionSpec(BaseModel):
    """Atomic constants of the probed f -> F transition (defaults: 87Rb D2, f=1 -> F'=0)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    f_ground: float = Field(default=1.0, alias="f", ge=0, description="Ground-state total angular momentum f")
    f_excited: float = Field(default=0.0, alias="F", ge=0, description="Excited-state total angular momentum F")
    j_ground: float = Field(default=0.5, alias="j", ge=0, description="Ground-state electronic angular momentum j")
    j_excited: float = Field(default=1.5, alias="J", ge=0, description="Excited-state electronic angular momentum J")
    nuclear_spin: float = Field(default=1.5, alias="I", ge=0, description="Nuclear spin I")
    reduced_dipole: float = Field(default=3.584e-29, ge=0, description="Reduced dipole <j||d||J> in C*m")
    number_density: float = Field(default=1e16, gt=0, description="Atomic number density in 1/m^3")
    cell_length: float = Field(default=0.01, gt=0, description="Geometric thickness of the medium in m")
    omega: float = Field(default=2 * math.pi * 384.230e12, gt=0, description="Light angular frequency in rad/s")

    @field_validator("f_ground", "f_excited", "j_ground", "j_excited", "nuclear_spin")
    @classmethod
    def check_half_integer(cls, value: float) -> float:
        if not _is_half_integer(value):
            raise ValueError(f"{value} is not an integer or half-integer")
        return value

    @model_validator(mode="after")
    def check_dipole_allowed(self) -> "TransitionSpec":
        if abs(self.f_ground - self.f_excited) > 1 or self.f_ground + self.f_excited < 1:
            raise ValueError(
                f"transition f={self.f_ground} -> F={self.f_excited} is not dipole-allowed"
            )
        return self

    @property
    def dim(self) -> int:
        return int(round(2 * self.f_ground)) + 1


RB_D2_LINEWIDTH = 2 * math.pi * 6.0666e6  # rad/s


class ProbeConfig(BaseModel):
    """
    Probe-light and relaxation parameters.

    Rates are expressed in units of `rate_unit` rad/s. The default unit makes
    gamma_e = 1000 the 87Rb D2 natural linewidth (2 pi x 6.0666 MHz).
    The figure presets use Larmor-normalized units (larmor = 1).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    detuning: float = Field(default=1000.0, description="Probe detuning Delta")
    rabi: float = Field(default=1.0, ge=0, description="Probe Rabi frequency Omega_R")
    gamma_e: float = Field(default=1000.0, gt=0, description="Excited-state relaxation Gamma")
    gamma_g: float = Field(default=0.05, ge=0, description="Ground-state relaxation gamma")
    larmor: float = Field(default=1.0, description="Larmor frequency Omega_L")
    doppler: float = Field(default=0.0, ge=0, description="Doppler width Gamma_D (0 = no Doppler broadening)")
    beta_ratio: float = Field(default=0.0, description="Excited/ground Lande factor ratio g_F/g_f")
    rate_unit: float = Field(default=RB_D2_LINEWIDTH / 1000, gt=0, description="rad/s represented by one rate unit")


class PulseAngles(BaseModel):
    """Control pulse: rotation about z by phi followed by rotation about y by theta."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    phi: float = Field(default=0.0, description="z-rotation angle in rad, stored in [-pi, pi)")
    theta: float = Field(default=0.0, description="y-rotation angle in rad, stored in [-pi, pi)")

    @field_validator("phi", "theta")
    @classmethod
    def wrap(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("pulse angles must be finite")
        return _wrap_angle(value)


FIGURE_PULSES = [
    PulseAngles(phi=0.0, theta=0.0),
    PulseAngles(phi=0.0, theta=math.pi / 2),
    PulseAngles(phi=math.pi / 2, theta=0.0),
    PulseAngles(phi=math.pi / 2, theta=math.pi / 2),
]


class NoiseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    snr: float = Field(..., gt=0, description="Aligned-state amplitude over noise RMS (inf = noiseless)")
    seed: int = Field(..., description="Seed of the noise generator")
    reference_amplitude: float = Field(..., gt=0, description="Aligned-state signal amplitude in rad")

    @property
    def sigma(self) -> float:
        if math.isinf(self.snr):
            return 0.0
        return self.reference_amplitude / self.snr


# ---------------------------------------------------------------------------
# Serialized values
# ---------------------------------------------------------------------------

class DensityMatrixPayload(BaseModel):
    """JSON form of a density matrix: row-major real and imaginary parts."""

    dim: int = Field(..., ge=1)
    re: List[float] = Field(..., description="Row-major real parts")
    im: List[float] = Field(..., description="Row-major imaginary parts")

    @model_validator(mode="after")
    def check_lengths(self) -> "DensityMatrixPayload":
        if len(self.re) != self.dim ** 2 or len(self.im) != self.dim ** 2:
            raise ValueError(f"expected {self.dim ** 2} entries in re and im")
        return self


class FitResult(BaseModel):
    """Envelope amplitudes of exp(-gamma t)[A sin 2 Omega_L t + B cos 2 Omega_L t + C]."""

    A: float
    B: float
    C: float
    cov: List[List[float]] = Field(..., description="3x3 covariance of (A, B, C)")
    residual_rms: float = Field(..., ge=0)
    larmor: Optional[float] = Field(default=None, description="Larmor frequency used (refined when requested)")
    gamma: Optional[float] = Field(default=None, description="Ground-state relaxation used (refined when requested)")


# |rho[-1,-1] - rho[1,1]| <= 1 for any density matrix
POP_DIFF_TOL = 1e-9


class PartialMeasurement(BaseModel):
    """Post-pulse quantities recovered from one fitted trace."""

    pulse: PulseAngles
    rho_1m1_re: float = Field(..., description="Re of the rotated-frame coherence rho_{1,-1}")
    rho_1m1_im: float = Field(..., description="Im of the rotated-frame coherence rho_{1,-1}")
    pop_diff: float = Field(..., description="Rotated-frame rho_{-1,-1} - rho_{1,1}")
    weights: Optional[List[float]] = Field(
        default=None,
        description="Inverse-variance weights for (Re, Im, pop_diff)"
    )

    @property
    def rho_1m1(self) -> complex:
        return complex(self.rho_1m1_re, self.rho_1m1_im)

    @model_validator(mode="after")
    def check_values(self) -> "PartialMeasurement":
        if not (math.isfinite(self.rho_1m1_re) and math.isfinite(self.rho_1m1_im)):
            raise ValueError("rho_1m1 must be finite")
        if not math.isfinite(self.pop_diff) or abs(self.pop_diff) > 1 + POP_DIFF_TOL:
            raise ValueError(f"pop_diff must lie in [-1, 1], got {self.pop_diff}")
        if self.weights is not None and len(self.weights) != 3:
            raise ValueError("weights must have three entries")
        return self


class ReconstructionResult(BaseModel):
    rho: DensityMatrixPayload
    distance: float = Field(..., ge=0, description="Masked Frobenius objective at the optimum")
    iterations: int = Field(..., ge=0)
    converged: bool
    fidelity_vs_truth: Optional[float] = Field(default=None, ge=0, le=1)
    rank_deficient: bool = Field(default=False, description="Pulse set does not determine the state")
    warnings: List[str] = Field(default_factory=list)


class TraceMeta(BaseModel):
    """Provenance written next to every trace."""

    transition: TransitionSpec
    probe: ProbeConfig
    pulse: PulseAngles
    seed: Optional[int] = None
    snr: Optional[float] = None
    source: Literal["analytic", "integrator"] = "analytic"
    polarization: Literal["x", "y"] = "y"
    validity_flags: Dict[str, bool] = Field(default_factory=dict)


class TracePayload(BaseModel):
    times: List[float]
    delta_alpha: List[float]
    delta_epsilon: Optional[List[float]] = None
    delta_absorption: Optional[List[float]] = None
    delta_phase: Optional[List[float]] = None
    meta: TraceMeta


# ---------------------------------------------------------------------------
# Monte-Carlo
# ---------------------------------------------------------------------------

StateClass = Literal["pure", "mixed_0.6", "thermal"]


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    axis: Literal["snr", "angle_sigma", "n_measurements", "kappa2"]
    grid: List[float] = Field(..., min_length=1)
    states: List[StateClass] = Field(default_factory=lambda: ["pure", "mixed_0.6", "thermal"])
    n_states: int = Field(default=10, ge=1)
    n_repeats: int = Field(default=100, ge=1)
    pulses: Union[Literal["random"], List[PulseAngles]] = "random"
    n_pulses: int = Field(default=4, ge=1, description="Pulses per reconstruction when drawn at random")
    snr: Optional[float] = Field(default=25.0, gt=0, description="SNR held fixed on the other axes (None = noiseless)")
    angle_sigma: float = Field(default=0.0, ge=0, description="Pulse-angle uncertainty held fixed on the other axes")
    seed: int = 0

    @field_validator("grid")
    @classmethod
    def check_sorted(cls, grid: List[float]) -> List[float]:
        if any(b < a for a, b in zip(grid, grid[1:])):
            raise ValueError("grid must be sorted ascending")
        return grid

    @model_validator(mode="after")
    def check_sample_count(self) -> "SweepConfig":
        if self.n_states * self.n_repeats < 30:
            raise ValueError("n_states * n_repeats must be at least 30 for beta fitting")
        if self.axis == "n_measurements" and any(not float(v).is_integer() or v < 1 for v in self.grid):
            raise ValueError("n_measurements grid must hold positive integers")
        return self


class BetaFit(BaseModel):
    a: float = Field(..., gt=0)
    b: float = Field(..., gt=0)
    mean: float
    variance: float = Field(..., ge=0)
    point_mass: bool = Field(default=False, description="Samples were degenerate (all equal)")


class SweepRow(BaseModel):
    axis_value: float
    state_class: str
    mean_fidelity: float
    var_fidelity: float
    beta_a: float
    beta_b: float
    n_samples: int
    n_failures: int


# ---------------------------------------------------------------------------
# Run configuration (cli) and HTTP requests
# ---------------------------------------------------------------------------

class StateSpec(BaseModel):
    """Either a named state or a DensityMatrix JSON file."""

    model_config = ConfigDict(extra="forbid")

    name: Optional[Literal["thermal", "aligned_y", "stretched", "random_pure", "random_mixed"]] = None
    file: Optional[str] = None
    purity: float = Field(default=0.6, ge=1 / 3, le=1, description="Target purity for random_mixed")

    @model_validator(mode="after")
    def check_one_source(self) -> "StateSpec":
        if (self.name is None) == (self.file is None):
            raise ValueError("give exactly one of 'name' or 'file'")
        return self


class NoiseSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    snr: Optional[float] = Field(default=None, gt=0, description="None = noiseless")
    angle_sigma: float = Field(default=0.0, ge=0, description="Std of executed pulse angles in rad")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    transition: TransitionSpec = Field(default_factory=TransitionSpec)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    state: StateSpec = Field(default_factory=lambda: StateSpec(name="random_pure"))
    pulses: List[PulseAngles] = Field(default_factory=lambda: list(FIGURE_PULSES))
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    sweep: Optional[SweepConfig] = None
    output_dir: Optional[str] = None
    seed: Optional[int] = None
    truth_file: Optional[str] = Field(default=None, description="DensityMatrix JSON used to report fidelity")


class SimulateRequest(BaseModel):
    transition: TransitionSpec = Field(default_factory=TransitionSpec)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    state: Union[DensityMatrixPayload, StateSpec] = Field(..., description="Density matrix or named state")
    pulses: List[PulseAngles] = Field(default_factory=lambda: list(FIGURE_PULSES), min_length=1)
    snr: Optional[float] = Field(default=None, gt=0)
    seed: int = 0
    force: bool = Field(default=False, description="Ignore model-validity violations")


class SimulateResponse(BaseModel):
    state: DensityMatrixPayload
    traces: List[TracePayload]


class ReconstructRequest(BaseModel):
    traces: List[TracePayload] = Field(..., min_length=1)
    truth: Optional[DensityMatrixPayload] = None
    seed: int = 0
