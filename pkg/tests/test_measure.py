"""
Unit tests for noise injection and envelope fitting (services/measure.py).
"""

import math

import numpy as np
import pytest

from models.schemas import NoiseSpec, ProbeConfig, PulseAngles, TransitionSpec
from services.forward import SignalTrace, default_time_grid, signal
from services.measure import add_noise, design_matrix, fit_envelope, noise_for, reference_amplitude
from services.qstate import maximally_mixed, random_pure, reference_state
from utils.errors import SingularDesignError


@pytest.fixture
def spec():
    return TransitionSpec()


@pytest.fixture
def probe():
    return ProbeConfig(detuning=1000.0, rabi=1.0, gamma_e=1000.0, gamma_g=0.05, larmor=1.0)


@pytest.fixture
def times(probe):
    return default_time_grid(probe)


def _synthetic(times, a, b, c, larmor=1.0, gamma=0.05):
    values = design_matrix(times, larmor, gamma) @ np.array([a, b, c])
    return SignalTrace(times=times, delta_alpha=values)


# Tests for add_noise()

def test_infinite_snr_leaves_trace_unchanged(spec, probe):
    """snr = inf adds nothing but records the setting."""
    trace = signal(random_pure(seed=1), PulseAngles(), spec, probe)
    noisy = add_noise(trace, NoiseSpec(snr=math.inf, seed=5, reference_amplitude=1.0))
    np.testing.assert_array_equal(noisy.delta_alpha, trace.delta_alpha)
    assert noisy.meta.snr == math.inf
    assert noisy.meta.seed == 5


def test_noise_rms_matches_sigma():
    """RMS of (noisy - clean) is reference_amplitude / snr within 3% over 10^4 samples."""
    times = np.arange(10_000) * 0.01
    clean = SignalTrace(times=times, delta_alpha=np.zeros_like(times))
    noise = NoiseSpec(snr=10.0, seed=123, reference_amplitude=2.0)
    noisy = add_noise(clean, noise)
    rms = float(np.sqrt(np.mean(noisy.delta_alpha ** 2)))
    assert rms == pytest.approx(noise.sigma, rel=0.03)
    assert noise.sigma == pytest.approx(0.2)


def test_noise_is_seeded(times):
    """Equal seeds give equal noise, different seeds differ."""
    clean = SignalTrace(times=times, delta_alpha=np.zeros_like(times))
    first = add_noise(clean, NoiseSpec(snr=5.0, seed=9, reference_amplitude=1.0))
    second = add_noise(clean, NoiseSpec(snr=5.0, seed=9, reference_amplitude=1.0))
    third = add_noise(clean, NoiseSpec(snr=5.0, seed=10, reference_amplitude=1.0))
    np.testing.assert_array_equal(first.delta_alpha, second.delta_alpha)
    assert not np.array_equal(first.delta_alpha, third.delta_alpha)


def test_noise_only_touches_rotation(spec, probe):
    """Ellipticity, absorption and phase channels stay clean."""
    trace = signal(random_pure(seed=2), PulseAngles(phi=0.3, theta=0.9), spec, probe)
    noisy = add_noise(trace, NoiseSpec(snr=1.0, seed=1, reference_amplitude=1.0))
    np.testing.assert_array_equal(noisy.delta_epsilon, trace.delta_epsilon)
    np.testing.assert_array_equal(noisy.delta_absorption, trace.delta_absorption)
    assert not np.array_equal(noisy.delta_alpha, trace.delta_alpha)


def test_reference_amplitude_is_aligned_signal_peak(spec, probe, times):
    """The SNR reference is the largest |delta_alpha| of the aligned state without a pulse."""
    trace = signal(reference_state("aligned_y"), PulseAngles(), spec, probe, times)
    assert reference_amplitude(spec, probe, times) == pytest.approx(np.max(np.abs(trace.delta_alpha)))
    assert noise_for(spec, probe, 25.0, 0, times).sigma == pytest.approx(reference_amplitude(spec, probe, times) / 25)


# Tests for fit_envelope()

def test_fit_recovers_exact_amplitudes(times):
    """A noiseless synthetic trace gives (A, B, C) to 1e-10."""
    fit = fit_envelope(_synthetic(times, 0.3, -0.2, 0.1), larmor=1.0, gamma=0.05)
    assert (fit.A, fit.B, fit.C) == pytest.approx((0.3, -0.2, 0.1), abs=1e-10)
    assert fit.residual_rms < 1e-12


def test_fit_thermal_trace_is_zero_within_errors(spec, probe):
    """The isotropic state gives amplitudes compatible with zero."""
    trace = signal(maximally_mixed(3), PulseAngles(), spec, probe)
    noisy = add_noise(trace, noise_for(spec, probe, 25.0, 42))
    fit = fit_envelope(noisy, probe.larmor, probe.gamma_g)
    errors = np.sqrt(np.diag(fit.cov))
    for value, error in zip((fit.A, fit.B, fit.C), errors):
        assert abs(value) <= 4 * error


def test_fit_stretched_state_is_constant(spec, probe):
    """The stretched state without a pulse has no oscillation but a decaying offset."""
    trace = signal(reference_state("stretched"), PulseAngles(), spec, probe)
    fit = fit_envelope(trace, probe.larmor, probe.gamma_g)
    assert abs(fit.A) < 1e-9 * abs(fit.C)
    assert abs(fit.B) < 1e-9 * abs(fit.C)
    assert fit.C != 0


def test_fit_is_linear(spec, probe):
    """fit(a * trace) = a * fit(trace)."""
    trace = signal(random_pure(seed=3), PulseAngles(phi=1.0, theta=0.4), spec, probe)
    fit = fit_envelope(trace, probe.larmor, probe.gamma_g)
    scaled = fit_envelope(trace.replace(delta_alpha=-2.5 * trace.delta_alpha), probe.larmor, probe.gamma_g)
    assert (scaled.A, scaled.B, scaled.C) == pytest.approx((-2.5 * fit.A, -2.5 * fit.B, -2.5 * fit.C), rel=1e-10)


def test_covariance_is_symmetric_psd(times):
    """The covariance matrix is symmetric positive semidefinite."""
    noisy = add_noise(_synthetic(times, 1.0, 0.5, -0.3), NoiseSpec(snr=3.0, seed=4, reference_amplitude=1.0))
    cov = np.array(fit_envelope(noisy, 1.0, 0.05).cov)
    np.testing.assert_allclose(cov, cov.T, atol=0)
    assert np.linalg.eigvalsh(cov).min() >= 0


def test_covariance_scales_with_noise_variance(times):
    """Doubling the noise (same draws) quadruples the covariance."""
    clean = _synthetic(times, 1.0, 0.5, -0.3)
    small = fit_envelope(add_noise(clean, NoiseSpec(snr=4.0, seed=8, reference_amplitude=1.0)), 1.0, 0.05)
    large = fit_envelope(add_noise(clean, NoiseSpec(snr=2.0, seed=8, reference_amplitude=1.0)), 1.0, 0.05)
    np.testing.assert_allclose(np.array(large.cov), 4 * np.array(small.cov), rtol=1e-8)


def test_fit_is_unbiased(times):
    """Mean fitted amplitudes over many seeds at SNR 1 match the truth within 5 standard errors."""
    truth = np.array([0.4, -0.1, 0.25])
    clean = _synthetic(times, *truth)
    fits = np.array([
        [f.A, f.B, f.C]
        for f in (
            fit_envelope(add_noise(clean, NoiseSpec(snr=1.0, seed=seed, reference_amplitude=1.0)), 1.0, 0.05)
            for seed in range(300)
        )
    ])
    standard_error = fits.std(axis=0, ddof=1) / math.sqrt(len(fits))
    assert np.all(np.abs(fits.mean(axis=0) - truth) < 5 * standard_error)


def test_singular_time_grid_rejected():
    """Samples at multiples of the half Larmor period cannot separate the sine term."""
    times = np.arange(10) * math.pi / 2
    trace = SignalTrace(times=times, delta_alpha=np.ones_like(times))
    with pytest.raises(SingularDesignError):
        fit_envelope(trace, larmor=1.0, gamma=0.0)


def test_too_few_samples_rejected():
    """Three amplitudes need at least three samples."""
    trace = SignalTrace(times=np.array([0.0, 0.5]), delta_alpha=np.array([1.0, 0.5]))
    with pytest.raises(SingularDesignError):
        fit_envelope(trace, larmor=1.0, gamma=0.05)


def test_window_start_drops_early_samples(times):
    """Samples before window_start do not influence the fit."""
    trace = _synthetic(times, 0.2, 0.1, 0.05)
    corrupted = trace.delta_alpha.copy()
    corrupted[times < 1.0] += 100.0
    fit = fit_envelope(trace.replace(delta_alpha=corrupted), 1.0, 0.05, window_start=1.0)
    assert (fit.A, fit.B, fit.C) == pytest.approx((0.2, 0.1, 0.05), abs=1e-10)


def test_refine_recovers_rates(times):
    """Nonlinear refinement finds slightly mis-specified Larmor frequency and relaxation rate."""
    trace = _synthetic(times, 0.3, -0.2, 0.1, larmor=1.005, gamma=0.06)
    fit = fit_envelope(trace, larmor=1.0, gamma=0.05, refine=True)
    assert fit.larmor == pytest.approx(1.005, rel=1e-6)
    assert fit.gamma == pytest.approx(0.06, rel=1e-5)
    assert (fit.A, fit.B, fit.C) == pytest.approx((0.3, -0.2, 0.1), abs=1e-6)


def test_fit_without_refine_reports_given_rates(times):
    """The rates used are echoed in the result."""
    fit = fit_envelope(_synthetic(times, 0.1, 0.1, 0.1), larmor=1.0, gamma=0.05)
    assert fit.larmor == 1.0 and fit.gamma == 0.05
