import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionkzm.errors import StateError
from ionkzm.physical_model import TWO_PI, ScaledUnits, TrapParameters
from ionkzm.statics import (
    AXIAL,
    WEAK,
    critical_axial_frequency,
    equilibrium_positions,
    gradient,
    hessian,
    mode_spectrum,
    potential_energy,
    thermal_rms_displacement,
    zigzag_reference_amplitudes,
)

W_WEAK = TWO_PI * 1394.1e3


def test_two_ion_critical_point_is_weak_frequency():
    assert critical_axial_frequency(2, W_WEAK) == pytest.approx(W_WEAK, rel=1e-12)


def test_critical_point_independent_of_anisotropy():
    a = critical_axial_frequency(8, W_WEAK, 1.03)
    b = critical_axial_frequency(8, W_WEAK, 1.3)
    assert a == pytest.approx(b, rel=1e-12)


def test_critical_point_decreases_with_ion_number():
    w = [critical_axial_frequency(n, W_WEAK) for n in (3, 6, 10, 16)]
    assert all(a > b for a, b in zip(w, w[1:]))


def _rand_positions(rng, n):
    pos = rng.standard_normal((n, 3))
    pos[:, AXIAL] = np.sort(pos[:, AXIAL]) + np.arange(n) * 2.0
    return pos


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 7))
def test_gradient_and_hessian_match_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    pos = _rand_positions(rng, n)
    k2 = np.array([1.0, 1.1, 0.04])
    g = gradient(pos, k2).ravel()
    h = hessian(pos, k2)
    eps = 1e-6
    flat = pos.ravel()
    fd_g = np.empty_like(flat)
    fd_h = np.empty((flat.size, flat.size))
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = eps
        fd_g[k] = (potential_energy((flat + e).reshape(n, 3), k2)
                   - potential_energy((flat - e).reshape(n, 3), k2)) / (2 * eps)
        fd_h[:, k] = (gradient((flat + e).reshape(n, 3), k2).ravel()
                      - gradient((flat - e).reshape(n, 3), k2).ravel()) / (2 * eps)
    np.testing.assert_allclose(g, fd_g, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(h, fd_h, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(h, h.T, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_coulomb_forces_conserve_momentum(seed, n):
    pos = _rand_positions(np.random.default_rng(seed), n)
    g = gradient(pos, np.zeros(3))
    np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-12)


def test_linear_chain_is_symmetric_and_ordered(trap):
    eq = equilibrium_positions(9, trap, TWO_PI * 150e3)
    z = eq.positions[:, AXIAL]
    assert eq.branch == "linear"
    assert np.all(np.diff(z) > 0)
    np.testing.assert_allclose(z, -z[::-1], atol=1e-12)
    np.testing.assert_allclose(eq.positions[:, :2], 0.0, atol=0)


def test_zigzag_below_critical_point(trap):
    w = trap.axial_calibration
    eq = equilibrium_positions(16, trap, w)
    assert eq.branch == "zigzag"
    x = eq.positions[:, WEAK]
    spec = mode_spectrum(eq)
    assert np.all(spec.omega_sq > -1e-10)
    # alternating signs on the well-displaced ions
    big = np.abs(x) > 0.3 * np.abs(x).max()
    s = np.sign(x[big])
    assert np.all(s[1:] != s[:-1])


def test_zigzag_is_planar_for_stronger_anisotropy():
    # at 1.03 the 16-ion ground state at 344 kHz twists into the strong axis
    trap = TrapParameters(anisotropy=1.3)
    eq = equilibrium_positions(16, trap, trap.axial_calibration)
    assert np.max(np.abs(eq.positions[:, 1])) < 1e-9
    assert np.max(np.abs(eq.positions[:, WEAK])) > 0.1


def test_linear_branch_above_critical_has_unstable_mode(trap):
    eq = equilibrium_positions(16, trap, trap.axial_calibration, branch="linear")
    assert np.min(mode_spectrum(eq).omega_sq) < 0


def test_zigzag_amplitude_vanishes_near_critical_point(trap):
    w_c = critical_axial_frequency(16, trap.omega_weak)
    amp = zigzag_reference_amplitudes(16, trap, w_c * (1 + 1e-4))
    ell_ax = ScaledUnits(w_c).length_scale
    ell = ScaledUnits.for_trap(trap).length_scale
    assert amp.max() * ell / ell_ax < 0.01
    with pytest.raises(StateError):
        zigzag_reference_amplitudes(16, trap, w_c * 0.99)


def test_mode_count_and_com_modes(trap):
    w_ax = TWO_PI * 150e3
    eq = equilibrium_positions(5, trap, w_ax)
    f = mode_spectrum(eq).eigenfrequencies
    assert len(f) == 15
    for target in (trap.omega_weak, trap.omega_strong, w_ax):
        assert np.min(np.abs(f - target)) / target < 1e-9


def test_thermal_rms_single_ion_matches_equipartition():
    trap = TrapParameters()
    eq = equilibrium_positions(1, trap, TWO_PI * 300e3)
    rms = thermal_rms_displacement(eq, 0.01)
    w = eq.trap_frequencies
    np.testing.assert_allclose(rms[0], np.sqrt(0.01) / w, rtol=1e-12)


def test_equilibrium_is_deterministic(trap):
    a = equilibrium_positions(12, trap, trap.axial_calibration)
    b = equilibrium_positions(12, trap, trap.axial_calibration)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert math.isfinite(a.residual_gradient_norm) and a.residual_gradient_norm < 1e-10
