"""Physical constants, trap parametrization, unit scaling and the axial ramp.

All public quantities are SI (rad/s for angular frequencies, s, m, V).
Internally the simulation works in :class:`ScaledUnits`, where the Coulomb
constant is 1, the ion mass is 1 and the weak radial secular frequency is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.constants as const
from scipy.special import expit

from .errors import ConfigError, DomainError, RangeError, StabilityError

TWO_PI = 2.0 * math.pi

#: q above which the lowest-order secular approximation is no longer trusted
MATHIEU_Q_LIMIT = 0.4


@dataclass(frozen=True)
class IonSpecies:
    name: str
    mass: float  # kg
    charge: float  # C

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError(f"ion mass must be positive, got {self.mass}")
        if not self.charge > 0:
            raise ConfigError(f"ion charge must be positive, got {self.charge}")

    @property
    def charge_number(self) -> int:
        return int(round(self.charge / const.e))


CA40 = IonSpecies("40Ca+", 39.962590863 * const.atomic_mass, const.e)

SPECIES = {"40Ca+": CA40, "Ca40": CA40, "ca40": CA40}


def species_by_name(name: str) -> IonSpecies:
    try:
        return SPECIES[name]
    except KeyError:
        raise ConfigError(f"unknown ion species {name!r}; known: {sorted(SPECIES)}") from None


class RFMode(str, Enum):
    PSEUDOPOTENTIAL = "pseudopotential"
    FULL_RF = "full_rf"


@dataclass(frozen=True)
class TrapParameters:
    """Confining fields of the linear Paul trap.

    The weak radial axis (``x`` internally) is the plane the zigzag forms in;
    ``anisotropy`` multiplies the other radial axis (``y``). The axial
    frequency follows ``axial_calibration * sqrt(V)`` for end-cap voltage V.
    """

    omega_weak: float = TWO_PI * 1394.1e3
    anisotropy: float = 1.03
    drive_frequency: float = TWO_PI * 22e6
    rf_mode: RFMode = RFMode.PSEUDOPOTENTIAL
    axial_calibration: float = TWO_PI * 344e3  # (rad/s)/sqrt(V), with v_end = 1 V
    species: IonSpecies = CA40

    def __post_init__(self):
        object.__setattr__(self, "rf_mode", RFMode(self.rf_mode))
        if not self.omega_weak > 0:
            raise ConfigError("omega_weak must be positive")
        if not 1.0 <= self.anisotropy <= 1.5:
            raise ConfigError(f"anisotropy must lie in [1, 1.5], got {self.anisotropy}")
        if not self.axial_calibration > 0:
            raise ConfigError("axial_calibration must be positive")
        if self.rf_mode is RFMode.FULL_RF:
            if not self.drive_frequency > 0:
                raise ConfigError("drive_frequency must be positive in full_rf mode")
            mathieu_q(self)

    @property
    def omega_strong(self) -> float:
        return self.omega_weak * self.anisotropy

    def with_(self, **changes) -> "TrapParameters":
        return replace(self, **changes)


@dataclass(frozen=True)
class RampProtocol:
    """Sigmoid end-cap voltage schedule.

    ``total_duration`` covers the ramp and the post-ramp ``settle_time``; the
    ramp itself ends at ``total_duration - settle_time``.
    """

    v_start: float
    v_end: float
    t0: float
    tau: float
    settle_time: float
    total_duration: float

    def __post_init__(self):
        if not self.v_end > self.v_start > 0:
            raise ConfigError("ramp voltages must satisfy v_end > v_start > 0")
        if not self.tau > 0:
            raise ConfigError("ramp tau must be positive")
        if self.settle_time < 0:
            raise ConfigError("settle_time must be non-negative")
        if abs(ramp_voltage(self, 0.0) - self.v_start) > 0.01 * self.v_start:
            raise ConfigError("t0 too small: V(0) is not within 1% of v_start")
        if abs(ramp_voltage(self, self.ramp_end) - self.v_end) > 0.01 * self.v_end:
            raise ConfigError("ramp too short: V(ramp end) is not within 1% of v_end")

    @classmethod
    def from_tau(
        cls,
        tau: float,
        v_start: float = (167.0 / 344.0) ** 2,
        v_end: float = 1.0,
        settle_time: float = 100e-6,
        t0: float | None = None,
        margin: float = 8.0,
    ) -> "RampProtocol":
        """Ramp centred ``margin`` time constants after t = 0, ending ``margin`` after t0."""
        if t0 is None:
            t0 = margin * tau
        return cls(v_start, v_end, t0, tau, settle_time, t0 + margin * tau + settle_time)

    @property
    def ramp_end(self) -> float:
        return self.total_duration - self.settle_time

    def with_tau(self, tau: float, margin: float = 8.0) -> "RampProtocol":
        """Same endpoints and settle time, with t0 and duration rescaled to ``tau``."""
        return RampProtocol.from_tau(tau, self.v_start, self.v_end, self.settle_time, margin=margin)


@dataclass(frozen=True)
class ScaledUnits:
    """Coulomb-crystal units: length ell with ell^3 = e^2 Z^2 / (4 pi eps0 m w^2)."""

    omega_ref: float
    species: IonSpecies = CA40
    length_scale: float = field(init=False)
    time_scale: float = field(init=False)

    def __post_init__(self):
        if not self.omega_ref > 0:
            raise ConfigError("reference frequency must be positive")
        k = self.species.charge**2 / (4.0 * math.pi * const.epsilon_0)
        ell = (k / (self.species.mass * self.omega_ref**2)) ** (1.0 / 3.0)
        object.__setattr__(self, "length_scale", ell)
        object.__setattr__(self, "time_scale", 1.0 / self.omega_ref)

    @classmethod
    def for_trap(cls, trap: TrapParameters) -> "ScaledUnits":
        return cls(trap.omega_weak, trap.species)

    @property
    def velocity_scale(self) -> float:
        return self.length_scale * self.omega_ref

    @property
    def energy_scale(self) -> float:
        return self.species.mass * self.velocity_scale**2

    def length(self, x):
        return np.asarray(x) / self.length_scale

    def length_si(self, x):
        return np.asarray(x) * self.length_scale

    def time(self, t):
        return np.asarray(t) * self.omega_ref

    def time_si(self, t):
        return np.asarray(t) / self.omega_ref

    def velocity(self, v):
        return np.asarray(v) / self.velocity_scale

    def velocity_si(self, v):
        return np.asarray(v) * self.velocity_scale

    def frequency(self, w):
        return np.asarray(w) / self.omega_ref

    def frequency_si(self, w):
        return np.asarray(w) * self.omega_ref

    def rate(self, r):
        """Inverse times (friction rates) share the frequency scale."""
        return self.frequency(r)

    def thermal_velocity_sq(self, temperature: float) -> float:
        """k_B T / m in scaled units."""
        return const.k * temperature / self.energy_scale


def ramp_voltage(protocol: RampProtocol, t):
    """End-cap voltage V(t) = v_start + (v_end - v_start) / (1 + exp(-(t - t0)/tau))."""
    x = (np.asarray(t, dtype=float) - protocol.t0) / protocol.tau
    v = protocol.v_start + (protocol.v_end - protocol.v_start) * expit(x)
    return float(v) if np.ndim(v) == 0 else v


def ramp_voltage_rate(protocol: RampProtocol, t):
    s = expit((np.asarray(t, dtype=float) - protocol.t0) / protocol.tau)
    r = (protocol.v_end - protocol.v_start) * s * (1.0 - s) / protocol.tau
    return float(r) if np.ndim(r) == 0 else r


def axial_frequency_from_voltage(trap: TrapParameters, voltage):
    v = np.asarray(voltage, dtype=float)
    if np.any(v < 0):
        raise DomainError(f"end-cap voltage must be non-negative, got {voltage}")
    w = trap.axial_calibration * np.sqrt(v)
    return float(w) if np.ndim(w) == 0 else w


def axial_frequency_at(trap: TrapParameters, protocol: RampProtocol, t):
    return axial_frequency_from_voltage(trap, ramp_voltage(protocol, t))


def critical_crossing_time(trap: TrapParameters, protocol: RampProtocol, omega_crit: float) -> float:
    """Time at which the axial frequency passes ``omega_crit`` during the ramp."""
    a = trap.axial_calibration
    lo, hi = a * math.sqrt(protocol.v_start), a * math.sqrt(protocol.v_end)
    if not lo < omega_crit < hi:
        raise RangeError(
            f"critical frequency {omega_crit / TWO_PI:.6g} Hz is outside the ramp range "
            f"[{lo / TWO_PI:.6g}, {hi / TWO_PI:.6g}] Hz"
        )
    # the sigmoid inverts in closed form; exact to rounding
    frac = ((omega_crit / a) ** 2 - protocol.v_start) / (protocol.v_end - protocol.v_start)
    return protocol.t0 + protocol.tau * math.log(frac / (1.0 - frac))


def gamma_at_critical_point(trap: TrapParameters, protocol: RampProtocol, omega_crit: float) -> float:
    """Quench rate d(omega_ax)/dt at the moment the ramp crosses ``omega_crit`` (rad/s^2)."""
    t_cp = critical_crossing_time(trap, protocol, omega_crit)
    v = ramp_voltage(protocol, t_cp)
    return trap.axial_calibration / (2.0 * math.sqrt(v)) * ramp_voltage_rate(protocol, t_cp)


def mathieu_q(trap: TrapParameters) -> tuple[float, float]:
    """Lowest-order Mathieu q for the (weak, strong) radial axes.

    Uses omega_secular = q * Omega / (2 sqrt 2).
    """
    if trap.rf_mode is not RFMode.FULL_RF:
        raise ConfigError("mathieu_q is only defined in full_rf mode")
    scale = 2.0 * math.sqrt(2.0) / trap.drive_frequency
    q = (scale * trap.omega_weak, scale * trap.omega_strong)
    if max(q) >= MATHIEU_Q_LIMIT:
        raise StabilityError(f"Mathieu q = {max(q):.4f} exceeds the stability limit {MATHIEU_Q_LIMIT}")
    return q


def mathieu_q_for(omega: float, drive_frequency: float) -> float:
    return 2.0 * math.sqrt(2.0) * omega / drive_frequency


def default_calibration(f_end_hz: float = 344e3, v_end: float = 1.0) -> float:
    """Calibration a such that a*sqrt(v_end) = 2 pi f_end."""
    return TWO_PI * f_end_hz / math.sqrt(v_end)
