"""Langevin molecular dynamics of the ion string during an axial ramp.

The deterministic part is a symplectic partitioned Runge-Kutta-Nystrom map
(order 4 by default, order 2 = velocity Verlet on request). Laser cooling is
constant isotropic friction with matched momentum diffusion, applied as the
exact Ornstein-Uhlenbeck velocity map between deterministic steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.constants as const

from . import _kernels as K
from .errors import (
    ConfigError,
    InsufficientDataError,
    NumericalBlowupError,
    SingularityError,
    StateError,
)
from .physical_model import (
    RampProtocol,
    RFMode,
    ScaledUnits,
    TrapParameters,
    axial_frequency_at,
    mathieu_q,
)
from .statics import (
    AXIAL,
    WEAK,
    equilibrium_positions,
    mode_spectrum,
    thermal_rms_displacement,
)

TWO_PI = 2.0 * math.pi

#: Doppler temperature of 40Ca+ on the 397 nm line
DOPPLER_TEMPERATURE = 0.54e-3

DEFAULT_DT = {RFMode.PSEUDOPOTENTIAL: 5e-9, RFMode.FULL_RF: 0.5e-9}

_CHUNK = 8192


@dataclass
class SimState:
    time: float  # s
    positions: np.ndarray  # (N, 3) m, columns (weak, strong, axial)
    velocities: np.ndarray  # (N, 3) m/s

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape or self.positions.shape[-1] != 3:
            raise ValueError("positions and velocities must both have shape (N, 3)")

    @property
    def n_ions(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class CoolingModel:
    friction_rate: float = TWO_PI * 5e3  # 1/s
    temperature: float = DOPPLER_TEMPERATURE  # K

    def __post_init__(self):
        if self.friction_rate < 0 or self.temperature < 0:
            raise ConfigError("friction rate and temperature must be non-negative")

    def check(self, trap: TrapParameters):
        if not self.friction_rate < trap.omega_weak / 10:
            raise ConfigError(
                f"friction rate {self.friction_rate:.4g}/s breaks the underdamped regime "
                f"(must be < omega_weak/10 = {trap.omega_weak / 10:.4g}/s)"
            )

    @classmethod
    def off(cls) -> "CoolingModel":
        return cls(0.0, 0.0)


class Scheme(str, Enum):
    DETERMINISTIC_VERLET = "deterministic_verlet"
    STOCHASTIC_SPLITTING = "stochastic_splitting"


@dataclass(frozen=True)
class IntegratorConfig:
    """Time step and scheme.

    ``deterministic_verlet`` ignores the cooling model entirely;
    ``stochastic_splitting`` interleaves the friction/diffusion map. ``order``
    selects the deterministic core: 2 (velocity Verlet) or 4 (optimized
    six-stage partitioned RKN).
    """

    dt: float = 5e-9
    scheme: Scheme = Scheme.STOCHASTIC_SPLITTING
    sample_stride: int = 20
    order: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.order not in (2, 4):
            raise ConfigError("integrator order must be 2 or 4")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")

    @classmethod
    def default_for(cls, trap: TrapParameters, **kw) -> "IntegratorConfig":
        return cls(dt=DEFAULT_DT[trap.rf_mode], **kw)

    def check(self, trap: TrapParameters, omega_ax_max: float = 0.0):
        if trap.rf_mode is RFMode.FULL_RF:
            if self.dt * trap.drive_frequency > 0.15:
                raise ConfigError(
                    f"dt * Omega = {self.dt * trap.drive_frequency:.3g} exceeds 0.15 in full_rf mode"
                )
        else:
            w = max(trap.omega_strong, omega_ax_max)
            if self.dt * w > 0.1:
                raise ConfigError(f"dt * omega_max = {self.dt * w:.3g} exceeds 0.1")


@dataclass
class TrajectoryResult:
    final_state: SimState
    swapped: bool
    min_pair_distance: float  # m
    onset_times: np.ndarray | None = None  # s, NaN where no onset
    snapshots: "Snapshots | None" = None
    seed: int | None = None
    initial_order: np.ndarray = field(default=None, repr=False)


@dataclass
class Snapshots:
    times: np.ndarray  # (S,)
    positions: np.ndarray  # (S, N, 3)
    velocities: np.ndarray  # (S, N, 3)


# ---------------------------------------------------------------------------
# parameter packing


class _Model:
    """Scaled-unit parameters for the compiled kernel."""

    def __init__(self, trap: TrapParameters, ramp: RampProtocol | None, omega_ax: float | None = None):
        self.trap = trap
        self.units = ScaledUnits.for_trap(trap)
        w0 = trap.omega_weak
        p = np.zeros(K.N_PARAMS)
        if trap.rf_mode is RFMode.FULL_RF:
            qx, qy = mathieu_q(trap)
            omega = trap.drive_frequency / w0
            p[K.P_MODE] = 1.0
            p[K.P_QX] = qx * omega**2 / 2.0
            p[K.P_QY] = qy * omega**2 / 2.0
            p[K.P_OMEGA] = omega
        p[K.P_WX2] = 1.0
        p[K.P_WY2] = trap.anisotropy**2
        if ramp is None:
            if omega_ax is None:
                raise ValueError("need a ramp or a static axial frequency")
            p[K.P_A2] = (omega_ax / w0) ** 2
            p[K.P_VS] = p[K.P_VE] = 1.0
            p[K.P_T0], p[K.P_TAU] = 0.0, 1.0
        else:
            p[K.P_A2] = (trap.axial_calibration / w0) ** 2
            p[K.P_VS], p[K.P_VE] = ramp.v_start, ramp.v_end
            p[K.P_T0] = ramp.t0 * w0
            p[K.P_TAU] = ramp.tau * w0
        self.params = p

    def to_scaled(self, state: SimState):
        u = self.units
        return (
            float(u.time(state.time)),
            np.ascontiguousarray(u.length(state.positions), dtype=float),
            np.ascontiguousarray(u.velocity(state.velocities), dtype=float),
        )

    def to_si(self, t, x, v) -> SimState:
        u = self.units
        return SimState(float(u.time_si(t)), u.length_si(x).copy(), u.velocity_si(v).copy())


def _ou_coefficients(cooling: CoolingModel, integrator: IntegratorConfig, units: ScaledUnits):
    if integrator.scheme is Scheme.DETERMINISTIC_VERLET:
        return 1.0, 0.0
    h = integrator.dt * cooling.friction_rate
    c1 = math.exp(-h)
    c2 = math.sqrt(units.thermal_velocity_sq(cooling.temperature) * -math.expm1(-2.0 * h))
    return c1, c2


def total_acceleration(state: SimState, t: float, trap: TrapParameters, ramp: RampProtocol | None = None,
                       omega_ax: float | None = None) -> np.ndarray:
    """Deterministic acceleration (m/s^2) on every ion at time ``t``.

    Sum of the axial harmonic force at omega_ax(t), the radial trap force
    (static pseudopotential or the cos(Omega t) quadrupole in full_rf mode)
    and the pairwise Coulomb repulsion. Cooling is not included.
    """
    model = _Model(trap, ramp, omega_ax)
    u = model.units
    x = np.ascontiguousarray(u.length(state.positions), dtype=float)
    out = np.empty_like(x)
    rmin = K.accelerations(x, float(u.time(t)), model.params, out)
    if len(x) > 1 and rmin < K.SINGULAR_DISTANCE:
        raise SingularityError(f"ions closer than {K.SINGULAR_DISTANCE} length units")
    return out * u.length_scale * u.omega_ref**2


def _raise_status(stats, model):
    status = int(stats[2])
    if status == K.SINGULAR:
        raise SingularityError(
            f"ion coincidence at t = {model.units.time_si(stats[4]):.6g} s "
            f"(distance < {K.SINGULAR_DISTANCE} length units)"
        )
    if status == K.BLOWUP:
        ion = int(stats[3])
        raise NumericalBlowupError(
            f"non-finite state for ion {ion} at t = {model.units.time_si(stats[4]):.6g} s", ion=ion
        )


class _Runner:
    """Chunked driver around the compiled integrator for one trajectory."""

    def __init__(self, model: _Model, integrator: IntegratorConfig, cooling: CoolingModel,
                 rng: np.random.Generator):
        self.model = model
        self.integrator = integrator
        self.rng = rng
        self.h = integrator.dt * model.trap.omega_weak
        self.c1, self.c2 = _ou_coefficients(cooling, integrator, model.units)
        self.stats = np.array([np.inf, 0.0, 0.0, -1.0, 0.0])

    def advance(self, t, x, v, nsteps, record=False):
        n = len(x)
        stride = self.integrator.sample_stride if record else 0
        rec = ([], [], [])
        done = 0
        chunk = stride * max(1, _CHUNK // stride) if stride else _CHUNK
        while done < nsteps:
            m = min(chunk, nsteps - done)
            if self.c2 > 0:
                noise = self.rng.standard_normal((m, n, 3))
            else:
                noise = np.zeros((m, n, 3))
            nrec = m // stride if stride else 0
            rx = np.empty((nrec, n, 3))
            rv = np.empty((nrec, n, 3))
            rt = np.empty(nrec)
            K.integrate(x, v, t, self.h, m, self.integrator.order, self.model.params,
                        self.c1, self.c2, noise, stride, rx, rv, rt, self.stats)
            _raise_status(self.stats, self.model)
            t = t + m * self.h
            if nrec:
                rec[0].append(rt)
                rec[1].append(rx)
                rec[2].append(rv)
            done += m
        return t, rec


def step(state: SimState, dt: float, integrator: IntegratorConfig, cooling: CoolingModel,
         rng: np.random.Generator, trap: TrapParameters, ramp: RampProtocol | None = None,
         omega_ax: float | None = None) -> SimState:
    """One integrator step from ``state``; returns a new state."""
    integrator = IntegratorConfig(dt, integrator.scheme, integrator.sample_stride, integrator.order)
    model = _Model(trap, ramp, omega_ax)
    t, x, v = model.to_scaled(state)
    runner = _Runner(model, integrator, cooling, rng)
    t, _ = runner.advance(t, x, v, 1)
    new = model.to_si(t, x, v)
    new.time = state.time + dt
    return new


def integrate(state: SimState, nsteps: int, integrator: IntegratorConfig, cooling: CoolingModel,
              rng: np.random.Generator, trap: TrapParameters, ramp: RampProtocol | None = None,
              omega_ax: float | None = None, record: bool = False):
    """Run ``nsteps`` steps. Returns (final state, Snapshots or None, stats dict)."""
    model = _Model(trap, ramp, omega_ax)
    t, x, v = model.to_scaled(state)
    runner = _Runner(model, integrator, cooling, rng)
    t, rec = runner.advance(t, x, v, nsteps, record=record)
    final = model.to_si(t, x, v)
    final.time = state.time + nsteps * integrator.dt
    snaps = _collect(rec, model.units) if record else None
    return final, snaps, {
        "min_pair_distance": float(model.units.length_si(runner.stats[0])),
        "swapped": bool(runner.stats[1]),
    }


def _collect(rec, units) -> Snapshots:
    if not rec[0]:
        return Snapshots(np.empty(0), np.empty((0, 0, 3)), np.empty((0, 0, 3)))
    return Snapshots(
        units.time_si(np.concatenate(rec[0])),
        units.length_si(np.concatenate(rec[1])),
        units.velocity_si(np.concatenate(rec[2])),
    )


# ---------------------------------------------------------------------------
# quench pipeline


def seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def thermal_state(n_ions: int, trap: TrapParameters, omega_ax: float, temperature: float,
                  rng: np.random.Generator, time: float = 0.0) -> SimState:
    """Linear-chain equilibrium with Boltzmann-distributed normal-mode excitations."""
    config = equilibrium_positions(n_ions, trap, omega_ax, branch="linear")
    units = config.units
    x = config.positions.copy()
    v = np.zeros_like(x)
    if temperature > 0:
        kt = units.thermal_velocity_sq(temperature)
        spec = mode_spectrum(config)
        if np.any(spec.omega_sq <= 0):
            raise StateError("start trap is past the critical point; the linear chain is unstable")
        amp = rng.standard_normal(len(spec.omega_sq)) * np.sqrt(kt / spec.omega_sq)
        x += (spec.eigenvectors @ amp).reshape(n_ions, 3)
        v = rng.standard_normal(x.shape) * math.sqrt(kt)
    return SimState(time, units.length_si(x), units.velocity_si(v))


def burn_in_time(cooling: CoolingModel) -> float:
    if cooling.friction_rate <= 0:
        return 200e-6
    return min(20.0 / cooling.friction_rate, 200e-6)


def run_quench(n_ions: int, trap: TrapParameters, ramp: RampProtocol, cooling: CoolingModel,
               integrator: IntegratorConfig, seed: int, record: bool = False,
               onset_thresholds: np.ndarray | None = None) -> TrajectoryResult:
    """Thermalize, ramp, settle; return the final state and diagnostics.

    Time zero is the start of the ramp window, so burn-in runs over negative
    times at (to exponential accuracy) the start voltage. With ``record`` the
    state is sampled every ``sample_stride`` steps from t = 0 on and per-ion
    onset times are extracted.
    """
    cooling.check(trap)
    integrator.check(trap, axial_frequency_at(trap, ramp, ramp.total_duration))
    init_ss, noise_ss = seed_sequence(seed).spawn(2)
    init_rng = np.random.default_rng(init_ss)
    noise_rng = np.random.default_rng(noise_ss)

    t_burn = burn_in_time(cooling)
    n_burn = int(math.ceil(t_burn / integrator.dt))
    start_w = axial_frequency_at(trap, ramp, -n_burn * integrator.dt)
    state = thermal_state(n_ions, trap, start_w, cooling.temperature, init_rng,
                          time=-n_burn * integrator.dt)
    initial_order = np.argsort(state.positions[:, AXIAL])

    model = _Model(trap, ramp)
    t, x, v = model.to_scaled(state)
    runner = _Runner(model, integrator, cooling, noise_rng)
    t, _ = runner.advance(t, x, v, n_burn)
    n_main = int(math.ceil(ramp.total_duration / integrator.dt))
    t, rec = runner.advance(0.0, x, v, n_main, record=record)

    final = model.to_si(n_main * runner.h, x, v)
    final.time = n_main * integrator.dt
    swapped = bool(runner.stats[1]) or not np.array_equal(np.argsort(x[:, AXIAL]), initial_order)
    result = TrajectoryResult(
        final_state=final,
        swapped=swapped,
        min_pair_distance=float(model.units.length_si(runner.stats[0])),
        seed=seed,
        initial_order=initial_order,
    )
    if record:
        result.snapshots = _collect(rec, model.units)
        if onset_thresholds is None:
            onset_thresholds = default_onset_thresholds(n_ions, trap, start_w, cooling.temperature)
        result.onset_times = local_onset_times(result.snapshots, onset_thresholds, trap.omega_weak)
    return result


# ---------------------------------------------------------------------------
# diagnostics


def default_onset_thresholds(n_ions: int, trap: TrapParameters, omega_ax: float, temperature: float,
                             factor: float = 5.0) -> np.ndarray:
    """``factor`` x the thermal RMS weak-axis displacement (m) of the pre-ramp chain."""
    config = equilibrium_positions(n_ions, trap, omega_ax, branch="linear")
    kt = config.units.thermal_velocity_sq(max(temperature, 1e-12))
    rms = thermal_rms_displacement(config, kt)[:, WEAK]
    return factor * config.units.length_si(rms)


def weak_axis_envelope(snapshots: Snapshots, omega_weak: float) -> np.ndarray:
    """sqrt(x^2 + (v_x / omega_weak)^2) per sample and ion."""
    x = snapshots.positions[:, :, WEAK]
    vx = snapshots.velocities[:, :, WEAK]
    return np.hypot(x, vx / omega_weak)


def local_onset_times(snapshots: Snapshots | None, thresholds, omega_weak: float,
                      hold_periods: float = 5.0) -> np.ndarray:
    """First time each ion's weak-axis envelope exceeds its threshold and stays above
    it for ``hold_periods`` radial periods. NaN for ions that never qualify.
    """
    if snapshots is None or len(snapshots.times) == 0:
        raise StateError("onset detection needs a trajectory recorded with snapshots")
    env = weak_axis_envelope(snapshots, omega_weak)
    above = env > np.asarray(thresholds)[None, :]
    times = snapshots.times
    sample_dt = times[1] - times[0] if len(times) > 1 else 1.0
    hold = max(1, int(math.ceil(hold_periods * TWO_PI / omega_weak / sample_dt)))
    n_s, n_i = above.shape
    onsets = np.full(n_i, np.nan)
    for i in range(n_i):
        a = above[:, i].astype(np.int64)
        # run-length of consecutive True samples starting at each index
        csum = np.concatenate([[0], np.cumsum(a)])
        idx = np.arange(n_s - hold + 1)
        ok = (csum[idx + hold] - csum[idx]) == hold
        hit = np.flatnonzero(ok)
        if hit.size:
            onsets[i] = times[hit[0]]
    return onsets


def front_speed(onset_times, axial_positions) -> float:
    """Outward speed (m/s) of the transition front: slope of |z_i| against onset time.

    Returns ``inf`` when all onsets coincide (degenerate regression).
    """
    t = np.asarray(onset_times, dtype=float)
    z = np.abs(np.asarray(axial_positions, dtype=float))
    ok = np.isfinite(t)
    if ok.sum() < 3:
        raise InsufficientDataError(f"front speed needs >= 3 onsets, got {int(ok.sum())}")
    t, z = t[ok], z[ok]
    tc = t - t.mean()
    var = np.sum(tc**2)
    if var <= (1e-12 * max(np.max(np.abs(t)), 1e-300)) ** 2 * len(t):
        return math.inf
    return float(np.sum(tc * (z - z.mean())) / var)


def kinetic_energy_per_dof(velocities: np.ndarray, mass: float) -> float:
    return 0.5 * mass * float(np.mean(np.asarray(velocities) ** 2))


def thermal_variance(temperature: float, mass: float) -> float:
    return const.k * temperature / mass
