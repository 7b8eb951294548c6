"""
Unit tests for the master-equation model (services/liouville.py).

The analytic forward model is the oracle in the weak-probe limit; evolve_ground
is the oracle without light.
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from models.schemas import FIGURE_PULSES, ProbeConfig, PulseAngles, TransitionSpec
from services.forward import envelope_coefficients, evolve_ground
from services.liouville import (
    FULL_DIM,
    build_generator,
    cartesian_dipole_elements,
    embed_ground_state,
    integrate,
    integrated_signal,
    propagate,
    rabi_for_kappa2,
    saturation_kappa2,
    signal_from_integrator,
    spherical_dipole_elements,
    steady_state,
)
from services.measure import fit_envelope, reference_amplitude
from services.qstate import DensityMatrix, maximally_mixed, random_mixed, random_pure, reference_state
from utils.errors import ForbiddenTransitionError, IntegrationError


@pytest.fixture
def spec():
    return TransitionSpec()


@pytest.fixture
def dark_probe():
    """No light: only Larmor precession and ground-state relaxation."""
    return ProbeConfig(detuning=5.0, rabi=0.0, gamma_e=10.0, gamma_g=0.1, larmor=1.0)


@pytest.fixture
def lit_probe():
    return ProbeConfig(detuning=5.0, rabi=1.0, gamma_e=10.0, gamma_g=0.1, larmor=1.0)


def _vec_identity():
    return np.eye(FULL_DIM).ravel()


# Tests for dipole elements

def test_spherical_dipole_selection_rule():
    """<e|d_q|m> is nonzero only for q = -m, with magnitude 1/sqrt(3)."""
    elements = spherical_dipole_elements()
    for row, q in enumerate((-1, 0, 1)):
        for col, m in enumerate((-1, 0, 1)):
            if q == -m:
                assert abs(elements[row, col]) == pytest.approx(1 / math.sqrt(3), rel=1e-14)
            else:
                assert elements[row, col] == 0


def test_branching_ratios_sum_to_one():
    """Decay of the excited state is shared equally by the three sublevels."""
    branching = np.sum(spherical_dipole_elements() ** 2, axis=0)
    np.testing.assert_allclose(branching, [1 / 3] * 3, atol=1e-15)
    assert branching.sum() == pytest.approx(1.0, abs=1e-15)


def test_cartesian_dipole_elements():
    """d_x couples (-|-1> + |1>)/sqrt(6), d_y couples i(|-1> + |1>)/sqrt(6), d_z only |0>."""
    dipoles = cartesian_dipole_elements()
    root6 = math.sqrt(6)
    np.testing.assert_allclose(dipoles["x"], np.array([-1, 0, 1]) / root6, atol=1e-15)
    np.testing.assert_allclose(dipoles["y"], np.array([1j, 0, 1j]) / root6, atol=1e-15)
    np.testing.assert_allclose(np.abs(dipoles["z"]), [0, 1 / math.sqrt(3), 0], atol=1e-15)


# Tests for build_generator()

def test_generator_rejects_other_transitions():
    """Only f=1 -> F=0 is modelled."""
    with pytest.raises(ForbiddenTransitionError):
        build_generator(TransitionSpec(f=2, F=1), ProbeConfig())


def test_generator_rejects_unknown_polarization(spec):
    """Polarization must be x or y."""
    with pytest.raises(ValueError):
        build_generator(spec, ProbeConfig(), polarization="z")


def test_hamiltonian_hermitian(spec, lit_probe):
    """H is Hermitian for both polarizations."""
    for polarization in ("x", "y"):
        gen = build_generator(spec, lit_probe, polarization)
        np.testing.assert_allclose(gen.hamiltonian, gen.hamiltonian.conj().T, atol=1e-15)


def test_no_light_means_no_optical_block(spec, dark_probe):
    """Omega_R = 0 leaves the ground-excited block of H empty."""
    gen = build_generator(spec, dark_probe)
    np.testing.assert_array_equal(gen.hamiltonian[3, :3], 0)
    np.testing.assert_array_equal(gen.hamiltonian[:3, 3], 0)


def test_generator_is_trace_preserving(spec, lit_probe):
    """Tr(L rho) = 0 for every rho, i.e. vec(1)^T L = 0."""
    gen = build_generator(spec, lit_probe)
    np.testing.assert_allclose(_vec_identity() @ gen.superoperator, 0, atol=1e-12)


def test_thermal_state_is_fixed_point_without_light(spec, dark_probe):
    """The isotropic ground state does not evolve when the probe is off."""
    gen = build_generator(spec, dark_probe)
    rho = embed_ground_state(maximally_mixed(3))
    np.testing.assert_allclose(gen.derivative(rho), 0, atol=1e-15)


# Tests for integrate() and propagate()

def test_integrate_constant_thermal_solution(spec, dark_probe):
    """Thermal start, no light and no field gives a constant solution."""
    probe = dark_probe.model_copy(update={"larmor": 0.0})
    gen = build_generator(spec, probe)
    sequence = integrate(gen, maximally_mixed(3), (0.0, 5.0), dt_control=0.5)
    for k in range(sequence.times.size):
        np.testing.assert_allclose(sequence.ground_block(k), np.eye(3) / 3, atol=1e-12)


def test_coherence_matches_free_evolution(spec, dark_probe):
    """Without light rho_{1,-1} rotates at 2 Omega_L and decays at gamma."""
    rho0 = reference_state("aligned_y")
    gen = build_generator(spec, dark_probe)
    times = np.linspace(0.0, 6.0, 25)
    sequence = integrate(gen, rho0, (0.0, 6.0), t_eval=times)
    for k, t in enumerate(times):
        expected = evolve_ground(rho0, t, dark_probe.gamma_g, dark_probe.larmor).elements
        np.testing.assert_allclose(sequence.ground_block(k), expected, atol=1e-8)


def test_excited_population_decays_at_gamma(spec, dark_probe):
    """An excited atom decays at Gamma + gamma with no light."""
    start = np.zeros((FULL_DIM, FULL_DIM), dtype=complex)
    start[3, 3] = 1.0
    gen = build_generator(spec, dark_probe)
    times = np.array([0.0, 0.1, 0.2, 0.3])
    sequence = propagate(gen, start, times)
    rate = dark_probe.gamma_e + dark_probe.gamma_g
    np.testing.assert_allclose(sequence.excited_population(), np.exp(-rate * times), rtol=1e-10)


def test_propagate_agrees_with_integrate(spec, lit_probe):
    """Matrix-exponential propagation and solve_ivp agree on a lit system."""
    rho0 = random_mixed(seed=3, target_purity=0.7)
    gen = build_generator(spec, lit_probe)
    times = np.linspace(0.0, 4.0, 41)
    exact = propagate(gen, rho0, times)
    numeric = integrate(gen, rho0, (0.0, 4.0), t_eval=times)
    np.testing.assert_allclose(numeric.states, exact.states, atol=1e-7)


def test_propagate_nonuniform_grid(spec, lit_probe):
    """Nonuniform grids give the same states as a uniform grid at shared times."""
    rho0 = random_pure(seed=4)
    gen = build_generator(spec, lit_probe)
    uniform = propagate(gen, rho0, np.linspace(0.0, 2.0, 21))
    sparse = propagate(gen, rho0, np.array([0.0, 0.3, 1.0, 2.0]))
    np.testing.assert_allclose(sparse.states[1], uniform.states[3], atol=1e-12)
    np.testing.assert_allclose(sparse.states[3], uniform.states[20], atol=1e-12)


def test_propagate_rejects_decreasing_times(spec, lit_probe):
    """Times must be non-decreasing."""
    gen = build_generator(spec, lit_probe)
    with pytest.raises(ValueError):
        propagate(gen, maximally_mixed(3), [0.0, 2.0, 1.0])


def _failing_solver(failing_methods):
    """solve_ivp stand-in that reports failure for the given methods."""
    from scipy.integrate import solve_ivp as real_solve_ivp

    calls = []

    def fake(fun, t_span, y0, method="RK45", **kwargs):
        calls.append(method)
        if method in failing_methods:
            return SimpleNamespace(
                success=False,
                message="Required step size is less than spacing between numbers.",
                t=np.array([t_span[0], 0.25]),
                y=np.zeros((len(y0), 2)),
                nfev=1234,
            )
        return real_solve_ivp(fun, t_span, y0, method=method, **kwargs)

    return fake, calls


def test_integrate_falls_back_to_next_method(spec, lit_probe, monkeypatch):
    """A failed DOP853 run is retried with Radau."""
    fake, calls = _failing_solver({"DOP853"})
    monkeypatch.setattr("services.liouville.solve_ivp", fake)
    gen = build_generator(spec, lit_probe)
    sequence = integrate(gen, maximally_mixed(3), (0.0, 1.0), t_eval=[0.0, 0.5, 1.0])
    assert calls == ["DOP853", "Radau"]
    np.testing.assert_allclose(sequence.traces(), 1.0, atol=1e-8)


def test_integrate_reports_failure(spec, lit_probe, monkeypatch):
    """Exhausting the fallback chain raises IntegrationError with diagnostics."""
    fake, calls = _failing_solver({"DOP853", "Radau"})
    monkeypatch.setattr("services.liouville.solve_ivp", fake)
    gen = build_generator(spec, lit_probe)
    with pytest.raises(IntegrationError) as excinfo:
        integrate(gen, maximally_mixed(3), (0.0, 1.0), t_eval=[0.0, 1.0])
    assert calls == ["DOP853", "Radau"]
    assert excinfo.value.method == "Radau"
    assert excinfo.value.t_failed == pytest.approx(0.25)
    assert excinfo.value.nfev == 1234


class TestPhysicality:
    """Trace, Hermiticity and positivity along propagated trajectories."""

    def setup_method(self):
        self.spec = TransitionSpec()
        self.probe = ProbeConfig(detuning=2.0, rabi=3.0, gamma_e=5.0, gamma_g=0.2, larmor=0.7)
        self.times = np.linspace(0.0, 10.0, 101)

    def _trajectories(self):
        gen = build_generator(self.spec, self.probe)
        for seed in range(5):
            yield propagate(gen, random_mixed(seed=seed, target_purity=0.8), self.times)

    def test_trace_conserved(self):
        """|Tr rho(t) - 1| < 1e-8."""
        for sequence in self._trajectories():
            np.testing.assert_allclose(sequence.traces(), 1.0, atol=1e-8)

    def test_hermiticity_preserved(self):
        """rho(t) stays Hermitian to 1e-10."""
        for sequence in self._trajectories():
            np.testing.assert_allclose(
                sequence.states, np.conj(np.swapaxes(sequence.states, 1, 2)), atol=1e-10
            )

    def test_positivity_preserved(self):
        """Minimum eigenvalue stays above -1e-7."""
        for sequence in self._trajectories():
            for state in sequence.states:
                assert np.linalg.eigvalsh((state + state.conj().T) / 2).min() > -1e-7


# Tests for steady_state()

def test_pumping_steady_state_matches_aligned_fixture(spec):
    """Strong y-polarized pumping with slow relaxation accumulates in the dark states."""
    probe = ProbeConfig(detuning=0.0, rabi=5.0, gamma_e=10.0, gamma_g=1e-3, larmor=0.0)
    rho = steady_state(build_generator(spec, probe, "y"))
    ground = rho[:3, :3] / np.trace(rho[:3, :3])
    np.testing.assert_allclose(ground, reference_state("aligned_y").elements, atol=5e-3)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-12)


def test_steady_state_without_light_is_thermal(spec, dark_probe):
    """Ground relaxation alone drives to the isotropic state."""
    rho = steady_state(build_generator(spec, dark_probe))
    np.testing.assert_allclose(rho[:3, :3], np.eye(3) / 3, atol=1e-10)
    assert abs(rho[3, 3]) < 1e-12


def test_steady_state_requires_uniqueness(spec):
    """No light and no ground relaxation leave many stationary states."""
    probe = ProbeConfig(detuning=0.0, rabi=0.0, gamma_e=10.0, gamma_g=0.0, larmor=0.0)
    with pytest.raises(ValueError):
        steady_state(build_generator(spec, probe))


# Tests for saturation_kappa2()

def test_kappa2_figure_parameters():
    """Omega_R=1, Gamma=1000, gamma=0.05 gives 0.02."""
    probe = ProbeConfig(detuning=1000.0, rabi=1.0, gamma_e=1000.0, gamma_g=0.05, larmor=1.0)
    assert saturation_kappa2(probe) == pytest.approx(0.02, rel=1e-12)


def test_kappa2_scaling():
    """kappa2 vanishes without light and quadruples when Omega_R doubles."""
    probe = ProbeConfig(rabi=1.0)
    assert saturation_kappa2(probe.model_copy(update={"rabi": 0.0})) == 0.0
    ratio = saturation_kappa2(probe.model_copy(update={"rabi": 2.0})) / saturation_kappa2(probe)
    assert ratio == pytest.approx(4.0, rel=1e-12)


def test_kappa2_requires_ground_relaxation():
    """gamma = 0 is rejected."""
    with pytest.raises(ValueError):
        saturation_kappa2(ProbeConfig(gamma_g=0.0))


def test_rabi_for_kappa2_inverts_kappa2():
    """rabi_for_kappa2 and saturation_kappa2 are inverse maps."""
    probe = ProbeConfig()
    rabi = rabi_for_kappa2(0.3, probe)
    assert saturation_kappa2(probe.model_copy(update={"rabi": rabi})) == pytest.approx(0.3, rel=1e-12)


# Tests for signal_from_integrator()

def test_signal_requires_light(spec, dark_probe):
    """Signals are normalized by Omega_R, which must be nonzero."""
    sequence = propagate(build_generator(spec, dark_probe), maximally_mixed(3), [0.0, 1.0])
    with pytest.raises(ValueError):
        signal_from_integrator(sequence, spec, dark_probe)


def test_integrator_signal_meta(spec):
    """Integrator traces are tagged with their source and polarization."""
    probe = ProbeConfig()
    trace = integrated_signal(maximally_mixed(3), PulseAngles(), spec, probe, times=np.linspace(0, 1, 11))
    assert trace.meta.source == "integrator"
    assert trace.meta.polarization == "y"
    assert trace.delta_epsilon is not None and trace.delta_phase is not None


def test_thermal_state_gives_no_rotation(spec):
    """The isotropic state barely rotates the polarization compared with the aligned state."""
    probe = ProbeConfig()
    times = np.linspace(0.05, 5.0, 50)
    trace = integrated_signal(maximally_mixed(3), PulseAngles(), spec, probe, times=times)
    reference = integrated_signal(reference_state("aligned_y"), PulseAngles(), spec, probe, times=times)
    # only probe pumping builds alignment from the isotropic state
    assert np.max(np.abs(trace.delta_alpha)) < 1e-2 * np.max(np.abs(reference.delta_alpha))


class TestAnalyticAgreement:
    """Weak-probe integrator signals against the analytic envelope amplitudes."""

    def setup_method(self):
        self.spec = TransitionSpec()
        self.probe = ProbeConfig(detuning=1000.0, rabi=1.0, gamma_e=1000.0, gamma_g=0.05, larmor=1.0)
        self.transient = 10 / self.probe.gamma_e

    def _compare(self, rho0: DensityMatrix, pulse: PulseAngles):
        trace = integrated_signal(rho0, pulse, self.spec, self.probe)
        fit = fit_envelope(trace, self.probe.larmor, self.probe.gamma_g, window_start=self.transient)
        expected = np.array(envelope_coefficients(rho0, pulse, self.spec, self.probe))
        fitted = np.array([fit.A, fit.B, fit.C])
        assert np.max(np.abs(fitted - expected)) <= 0.02 * reference_amplitude(self.spec, self.probe)

    def test_aligned_state_all_pulses(self):
        """Fitted (A, B, C) agree within 2% of the reference amplitude for the four figure pulses."""
        for pulse in FIGURE_PULSES:
            self._compare(reference_state("aligned_y"), pulse)

    def test_random_states(self):
        """Fitted (A, B, C) agree within 2% of the reference amplitude for random pure and mixed states."""
        pulse = PulseAngles(phi=0.4, theta=1.1)
        self._compare(random_pure(seed=11), pulse)
        self._compare(random_mixed(seed=12, target_purity=0.6), pulse)

    def test_thermal_state_with_vanishing_envelope(self):
        """Thermal state: the analytic envelope is zero and the fit stays within noise of it."""
        for pulse in (PulseAngles(), PulseAngles(phi=0.4, theta=1.1)):
            self._compare(maximally_mixed(3), pulse)

    def test_integrate_path_matches_propagate_path(self):
        """Adaptive integration and exact propagation give the same signal."""
        times = np.linspace(0.0, 5.0, 51)
        rho0 = reference_state("aligned_y")
        exact = integrated_signal(rho0, PulseAngles(), self.spec, self.probe, times=times)
        numeric = integrated_signal(rho0, PulseAngles(), self.spec, self.probe, times=times, exact=False)
        scale = np.max(np.abs(exact.delta_alpha))
        np.testing.assert_allclose(numeric.delta_alpha, exact.delta_alpha, atol=1e-6 * scale)
