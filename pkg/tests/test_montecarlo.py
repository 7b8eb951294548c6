"""
Unit tests for Monte-Carlo sweeps and beta fitting (services/montecarlo.py).

Sweeps here use small grids and sample counts; full-scale statistics live in
test_acceptance.py behind the slow marker.
"""

import math

import numpy as np
import pytest
from scipy import stats

from models.schemas import FIGURE_PULSES, ProbeConfig, SweepConfig, TransitionSpec
from services.montecarlo import (
    SWEEP_COLUMNS,
    draw_pulses,
    fit_beta,
    kappa2_sweep,
    read_sweep_csv,
    run_sweep,
    sample_state,
    sweep_service,
    sweep_table_to_csv,
    sweep_table_to_svg,
)
from services.qstate import purity


@pytest.fixture
def spec():
    return TransitionSpec()


@pytest.fixture
def probe():
    return ProbeConfig(detuning=1000.0, rabi=1.0, gamma_e=1000.0, gamma_g=0.05, larmor=1.0)


@pytest.fixture
def small_snr_config():
    return SweepConfig(axis="snr", grid=[10.0, 100.0], n_states=3, n_repeats=10, seed=4)


# Tests for fit_beta()

def test_fit_beta_recovers_shape():
    """Beta(50, 2) samples give a, b within 15%."""
    samples = stats.beta.rvs(50, 2, size=1000, random_state=np.random.default_rng(1))
    fit = fit_beta(samples)
    assert fit.a == pytest.approx(50, rel=0.15)
    assert fit.b == pytest.approx(2, rel=0.15)
    assert not fit.point_mass


def test_fit_beta_uniform_samples():
    """Uniform samples give a = b = 1 within 15%."""
    samples = np.random.default_rng(2).uniform(size=1000)
    fit = fit_beta(samples)
    assert fit.a == pytest.approx(1, rel=0.15)
    assert fit.b == pytest.approx(1, rel=0.15)


def test_fit_beta_moments_are_consistent():
    """mean = a/(a+b) and variance = ab/((a+b)^2 (a+b+1))."""
    samples = stats.beta.rvs(5, 3, size=500, random_state=np.random.default_rng(3))
    fit = fit_beta(samples)
    total = fit.a + fit.b
    assert fit.mean == pytest.approx(fit.a / total)
    assert fit.variance == pytest.approx(fit.a * fit.b / (total ** 2 * (total + 1)))
    assert abs(fit.mean - samples.mean()) < 2 / math.sqrt(samples.size)


def test_fit_beta_near_one():
    """Fidelities clustered at 0.999 give mean 0.999 and a tiny variance."""
    samples = 0.999 + np.random.default_rng(4).normal(scale=1e-5, size=200)
    fit = fit_beta(samples)
    assert fit.mean == pytest.approx(0.999, abs=1e-4)
    assert fit.variance < 1e-8


def test_fit_beta_point_mass():
    """Identical samples are flagged; exact ones are clamped below 1."""
    fit = fit_beta([1.0] * 40)
    assert fit.point_mass
    assert fit.variance == 0.0
    assert fit.mean == pytest.approx(1 - 1e-9)


def test_fit_beta_needs_thirty_samples():
    """Fewer than 30 samples are rejected."""
    with pytest.raises(ValueError):
        fit_beta([0.5] * 29)


def test_fit_beta_rejects_out_of_range():
    """Samples must lie in [0, 1]."""
    with pytest.raises(ValueError):
        fit_beta([0.5] * 40 + [1.2])


# Tests for random problems

def test_draw_pulses_range():
    """Pulse angles lie in [0, pi)."""
    pulses = draw_pulses(500, np.random.default_rng(0))
    angles = np.array([[p.phi, p.theta] for p in pulses])
    assert angles.min() >= 0 and angles.max() < math.pi


def test_sample_state_classes():
    """State classes have the expected purities."""
    assert purity(sample_state("pure", 1)) == pytest.approx(1.0, abs=1e-12)
    assert purity(sample_state("mixed_0.6", 1)) == pytest.approx(0.6, abs=1e-12)
    assert purity(sample_state("thermal", 1)) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        sample_state("coherent", 1)


# Tests for run_sweep()

def test_sweep_row_layout(small_snr_config, spec, probe):
    """One row per (grid value, state class), grid-major."""
    rows = run_sweep(small_snr_config, spec, probe, threads=1)
    assert len(rows) == 6
    assert [(r.axis_value, r.state_class) for r in rows[:3]] == [(10.0, "pure"), (10.0, "mixed_0.6"), (10.0, "thermal")]
    assert all(r.n_samples + r.n_failures == 30 for r in rows)


def test_sweep_fidelities_in_unit_interval(small_snr_config, spec, probe):
    """Mean fidelities lie in [0, 1] and improve with SNR."""
    rows = run_sweep(small_snr_config, spec, probe, threads=1)
    for row in rows:
        assert 0.0 <= row.mean_fidelity <= 1.0
    pure = [r for r in rows if r.state_class == "pure"]
    assert pure[1].mean_fidelity >= pure[0].mean_fidelity - 1e-3


def test_sweep_is_deterministic(small_snr_config, spec, probe):
    """Identical config and seed give identical tables."""
    first = run_sweep(small_snr_config, spec, probe, threads=1)
    second = run_sweep(small_snr_config, spec, probe, threads=1)
    assert [r.model_dump() for r in first] == [r.model_dump() for r in second]


def test_sweep_independent_of_worker_count(spec, probe):
    """A process pool reproduces the sequential table."""
    cfg = SweepConfig(axis="angle_sigma", grid=[0.0], states=["pure"], n_states=3, n_repeats=10, seed=2)
    sequential = run_sweep(cfg, spec, probe, threads=1)
    parallel = run_sweep(cfg, spec, probe, threads=2)
    assert [r.model_dump() for r in sequential] == [r.model_dump() for r in parallel]


def test_noiseless_thermal_is_exact(spec, probe):
    """Without noise the thermal state is reconstructed exactly."""
    cfg = SweepConfig(axis="angle_sigma", grid=[0.0], states=["thermal"], n_states=1, n_repeats=30, snr=None)
    (row,) = run_sweep(cfg, spec, probe, threads=1)
    assert row.mean_fidelity > 1 - 1e-6
    assert row.n_failures == 0


def test_fixed_pulse_measurement_count(spec, probe):
    """With fixed pulses the n_measurements axis uses the first n of them."""
    cfg = SweepConfig(
        axis="n_measurements", grid=[2, 4], states=["pure"], pulses=FIGURE_PULSES,
        n_states=3, n_repeats=10, snr=None,
    )
    rows = run_sweep(cfg, spec, probe, threads=1)
    assert rows[1].mean_fidelity > 1 - 1e-6
    assert rows[0].mean_fidelity <= rows[1].mean_fidelity


def test_kappa2_sweep_requires_kappa2_axis(small_snr_config, spec, probe):
    """kappa2_sweep only runs kappa2 grids."""
    with pytest.raises(ValueError):
        kappa2_sweep(small_snr_config, spec, probe)


def test_kappa2_sweep_rejects_zero(spec, probe):
    """kappa2 = 0 has no probe light to measure with."""
    cfg = SweepConfig(axis="kappa2", grid=[0.0], states=["thermal"], n_states=1, n_repeats=30)
    with pytest.raises(ValueError):
        kappa2_sweep(cfg, spec, probe)


def test_kappa2_sweep_small_run(spec, probe):
    """A weak-probe point runs through the master equation and reconstructs well."""
    cfg = SweepConfig(axis="kappa2", grid=[1e-3], states=["pure"], n_states=1, n_repeats=30, snr=None, seed=3)
    (row,) = kappa2_sweep(cfg, spec, probe, threads=1)
    assert row.n_failures == 0
    assert row.mean_fidelity > 0.99


# Tests for sweep output

def test_sweep_csv_round_trip(small_snr_config, spec, probe, tmp_path):
    """The CSV has the documented header and reads back unchanged."""
    rows = run_sweep(small_snr_config, spec, probe, threads=1)
    path = sweep_table_to_csv(rows, tmp_path / "sweep.csv")
    header = path.read_text().splitlines()[0]
    assert header == "axis_value,state_class,mean_fidelity,var_fidelity,beta_a,beta_b,n_samples,n_failures"
    assert header.split(",") == SWEEP_COLUMNS
    assert [r.model_dump() for r in read_sweep_csv(path)] == [r.model_dump() for r in rows]


def test_sweep_svg(small_snr_config, spec, probe, tmp_path):
    """The optional SVG plot is written."""
    rows = sweep_service.run(small_snr_config, spec, probe, threads=1)
    path = sweep_table_to_svg(rows, tmp_path / "sweep.svg", "snr")
    assert path.read_text().lstrip().startswith("<?xml")
