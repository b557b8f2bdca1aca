import math

import numpy as np
import pytest
import scipy.constants as const
from scipy.optimize import curve_fit
from hypothesis import given, settings
from hypothesis import strategies as st

from ionkzm.dynamics import (
    CoolingModel,
    IntegratorConfig,
    Scheme,
    SimState,
    Snapshots,
    front_speed,
    integrate,
    local_onset_times,
    run_quench,
    step,
    thermal_state,
    total_acceleration,
)
from ionkzm.errors import ConfigError, InsufficientDataError, NumericalBlowupError, SingularityError, StateError
from ionkzm.physical_model import TWO_PI, RampProtocol, RFMode, TrapParameters

W_AX = TWO_PI * 150e3


def _chain_state(n, trap, rng, temperature=0.54e-3):
    return thermal_state(n, trap, W_AX, temperature, rng)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 10))
def test_internal_forces_cancel(seed, n):
    trap = TrapParameters()
    rng = np.random.default_rng(seed)
    state = _chain_state(n, trap, rng, temperature=0.05)
    acc = total_acceleration(state, 0.0, trap, omega_ax=W_AX)
    trap_part = -np.array([trap.omega_weak, trap.omega_strong, W_AX]) ** 2 * state.positions
    resid = (acc - trap_part).sum(axis=0)
    assert np.all(np.abs(resid) <= 1e-9 * np.abs(acc).max())


def test_coulomb_pair_force_value():
    trap = TrapParameters()
    d = 5e-6
    state = SimState(0.0, np.array([[0, 0, -d / 2], [0, 0, d / 2]]), np.zeros((2, 3)))
    acc = total_acceleration(state, 0.0, trap, omega_ax=W_AX)
    k = const.e**2 / (4 * math.pi * const.epsilon_0)
    expected = -k / d**2 / trap.species.mass + W_AX**2 * d / 2  # ion 0 sits at -d/2
    assert acc[0, 2] == pytest.approx(expected, rel=1e-12)


def _energy_error(order, dt_w):
    trap = TrapParameters()
    w = np.array([trap.omega_weak, trap.omega_strong, W_AX])
    dt = dt_w / trap.omega_strong
    integ = IntegratorConfig(dt=dt, order=order, scheme=Scheme.DETERMINISTIC_VERLET, sample_stride=50)
    x0 = np.array([[1e-6, 0.5e-6, 2e-6]])
    state = SimState(0.0, x0, np.zeros((1, 3)))
    _, snaps, _ = integrate(state, 20000, integ, CoolingModel.off(), np.random.default_rng(), trap,
                            omega_ax=W_AX, record=True)
    e = np.sum(snaps.velocities[:, 0] ** 2 + (w * snaps.positions[:, 0]) ** 2, axis=1)
    e0 = np.sum((w * x0[0]) ** 2)
    return np.max(np.abs(e - e0)) / e0


@pytest.mark.parametrize("order, expected", [(2, 2), (4, 4)])
def test_energy_error_convergence_order(order, expected):
    e1, e2 = _energy_error(order, 0.2), _energy_error(order, 0.1)
    assert math.log2(e1 / e2) == pytest.approx(expected, abs=0.3)


def test_step_matches_integrate():
    trap = TrapParameters()
    integ = IntegratorConfig(order=2)
    cool = CoolingModel()
    state = _chain_state(4, trap, np.random.default_rng(1))
    a, _, _ = integrate(state, 10, integ, cool, np.random.default_rng(7), trap, omega_ax=W_AX)
    b = state
    rng = np.random.default_rng(7)
    for _ in range(10):
        b = step(b, integ.dt, integ, cool, rng, trap, omega_ax=W_AX)
    np.testing.assert_allclose(a.positions, b.positions, rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(a.velocities, b.velocities, rtol=1e-12, atol=1e-12)


def test_chain_equipartition():
    trap = TrapParameters()
    temp = 0.54e-3
    cool = CoolingModel(friction_rate=TWO_PI * 50e3, temperature=temp)
    integ = IntegratorConfig(order=2, sample_stride=10)
    rng = np.random.default_rng(3)
    state = _chain_state(6, trap, rng)
    state, _, _ = integrate(state, 20000, integ, cool, rng, trap, omega_ax=W_AX)
    _, snaps, _ = integrate(state, 400000, integ, cool, rng, trap, omega_ax=W_AX, record=True)
    ke = 0.5 * trap.species.mass * np.mean(snaps.velocities**2)
    assert ke == pytest.approx(0.5 * const.k * temp, rel=0.05)


def test_run_quench_is_deterministic():
    trap = TrapParameters()
    ramp = RampProtocol.from_tau(2e-6, settle_time=10e-6)
    cool = CoolingModel(friction_rate=TWO_PI * 50e3)
    integ = IntegratorConfig(order=2)
    a = run_quench(6, trap, ramp, cool, integ, seed=42)
    b = run_quench(6, trap, ramp, cool, integ, seed=42)
    c = run_quench(6, trap, ramp, cool, integ, seed=43)
    np.testing.assert_array_equal(a.final_state.positions, b.final_state.positions)
    assert not np.array_equal(a.final_state.positions, c.final_state.positions)
    assert a.final_state.time == pytest.approx(ramp.total_duration, abs=integ.dt)


def test_swap_is_detected():
    trap = TrapParameters()
    # two ions passing each other on opposite sides of the axis
    pos = np.array([[0.0, 3e-6, -0.5e-6], [0.0, -3e-6, 0.5e-6]])
    vel = np.array([[0.0, 0.0, 20.0], [0.0, 0.0, -20.0]])
    _, _, stats = integrate(SimState(0.0, pos, vel), 200, IntegratorConfig(order=2), CoolingModel.off(),
                            np.random.default_rng(), trap, omega_ax=W_AX)
    assert stats["swapped"]


def test_singular_and_blowup_errors():
    trap = TrapParameters()
    integ = IntegratorConfig(order=2)
    pos = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1e-13]])
    with pytest.raises(SingularityError):
        integrate(SimState(0.0, pos, np.zeros((2, 3))), 5, integ, CoolingModel.off(), np.random.default_rng(),
                  trap, omega_ax=W_AX)
    pos = np.array([[0.0, 0.0, -5e-6], [np.nan, 0.0, 5e-6]])
    with pytest.raises(NumericalBlowupError) as info:
        integrate(SimState(0.0, pos, np.zeros((2, 3))), 5, integ, CoolingModel.off(), np.random.default_rng(),
                  trap, omega_ax=W_AX)
    assert info.value.ion in (0, 1)  # the NaN reaches both ions through the Coulomb force


def test_validation_of_cooling_and_step():
    trap = TrapParameters()
    with pytest.raises(ConfigError):
        CoolingModel(friction_rate=trap.omega_weak / 5).check(trap)
    with pytest.raises(ConfigError):
        IntegratorConfig(dt=50e-9).check(trap)
    with pytest.raises(ConfigError):
        IntegratorConfig(order=3)


def test_full_rf_period_averaged_motion_matches_pseudopotential():
    trap = TrapParameters(rf_mode=RFMode.FULL_RF)
    spr = 176
    period = TWO_PI / trap.drive_frequency
    integ = IntegratorConfig(dt=period / spr, order=4, scheme=Scheme.DETERMINISTIC_VERLET, sample_stride=1)
    state = SimState(0.0, np.array([[0.5e-6, 0.0, 0.0]]), np.zeros((1, 3)))
    nper = 80
    _, snaps, _ = integrate(state, spr * nper, integ, CoolingModel.off(), np.random.default_rng(),
                            trap, omega_ax=TWO_PI * 300e3, record=True)
    # the RF-period average removes micromotion and leaves the secular oscillation
    xbar = snaps.positions[:, 0, 0].reshape(nper, spr).mean(axis=1)
    t = (np.arange(nper) + 0.5) * period

    def model(t, amp, w, ph):
        return amp * np.cos(w * t + ph)

    popt, _ = curve_fit(model, t, xbar, p0=[xbar[0], trap.omega_weak, 0.0])
    assert popt[1] == pytest.approx(trap.omega_weak, rel=0.02)


def _snapshots(env, dt=1e-8):
    times = np.arange(env.shape[0]) * dt
    pos = np.zeros(env.shape + (3,))
    pos[:, :, 0] = env
    return Snapshots(times, pos, np.zeros_like(pos))


def test_local_onset_times_requires_hold():
    omega = TWO_PI * 1e7  # hold = 50 samples
    env = np.zeros((1000, 3))
    env[100:, 0] = 1.0  # sustained
    env[50:60, 1] = 1.0  # brief spike only
    env[500:, 1] = 1.0
    on = local_onset_times(_snapshots(env), np.full(3, 0.5), omega, hold_periods=5)
    assert on[0] == pytest.approx(100e-8)
    assert on[1] == pytest.approx(500e-8)
    assert np.isnan(on[2])
    with pytest.raises(StateError):
        local_onset_times(None, np.ones(3), omega)


def test_front_speed():
    z = np.array([-3.0, -1.0, 1.0, 3.0]) * 1e-6
    t = np.abs(z) / 2.0
    assert front_speed(t, z) == pytest.approx(2.0)
    assert front_speed(np.full(4, 1e-6), z) == math.inf
    with pytest.raises(InsufficientDataError):
        front_speed([1.0, np.nan, np.nan, 2.0], z)
