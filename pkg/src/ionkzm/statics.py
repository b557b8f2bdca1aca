"""Equilibrium crystal structures and normal modes of an ion string.

Work is done in :class:`~ionkzm.physical_model.ScaledUnits` with the weak
radial frequency as reference, so the trap potential per ion is
``0.5 * (wz^2 z^2 + x^2 + aniso^2 y^2)`` and the Coulomb constant is 1.
Coordinates are ordered ``(x, y, z)`` = (weak radial, strong radial, axial).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InternalError, RangeError, StateError
from .physical_model import TrapParameters, ScaledUnits

log = logging.getLogger(__name__)

WEAK, STRONG, AXIAL = 0, 1, 2
BRANCH_NAMES = ("weak-transverse", "strong-transverse", "axial")

GRADIENT_TOL = 1e-10


@dataclass
class EquilibriumConfiguration:
    positions: np.ndarray  # (N, 3), scaled units
    residual_gradient_norm: float
    omega_ax: float  # rad/s
    omega_weak: float  # rad/s
    anisotropy: float
    branch: str = "linear"
    degenerate_anisotropy: bool = False
    units: ScaledUnits = field(repr=False, default=None)

    def __post_init__(self):
        if self.units is None:
            self.units = ScaledUnits(self.omega_weak)

    @property
    def n_ions(self) -> int:
        return len(self.positions)

    @property
    def positions_si(self) -> np.ndarray:
        return self.units.length_si(self.positions)

    @property
    def trap_frequencies(self) -> np.ndarray:
        """Scaled (weak, strong, axial) secular frequencies."""
        return np.array([1.0, self.anisotropy, self.omega_ax / self.omega_weak])


@dataclass
class ModeSpectrum:
    omega_sq: np.ndarray  # scaled squared frequencies, ascending
    eigenvectors: np.ndarray  # columns, (3N, 3N), coordinate index 3*i + axis
    branches: list[str]
    omega_ref: float

    @property
    def eigenfrequencies(self) -> np.ndarray:
        """Angular frequencies in rad/s; unstable modes carry a negative sign."""
        return np.sign(self.omega_sq) * np.sqrt(np.abs(self.omega_sq)) * self.omega_ref

    def branch(self, name: str) -> np.ndarray:
        """Indices of modes in one branch, ascending in frequency."""
        return np.array([k for k, b in enumerate(self.branches) if b == name], dtype=int)


# ---------------------------------------------------------------------------
# potential, gradient, Hessian (scaled units)


def potential_energy(pos: np.ndarray, k2: np.ndarray) -> float:
    """Trap plus Coulomb energy; ``k2`` holds squared scaled trap frequencies."""
    trap = 0.5 * np.sum(k2 * pos**2)
    iu = np.triu_indices(len(pos), 1)
    d = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(d**2, axis=-1))[iu]
    return float(trap + np.sum(1.0 / r))


def gradient(pos: np.ndarray, k2: np.ndarray) -> np.ndarray:
    d = pos[:, None, :] - pos[None, :, :]
    r2 = np.sum(d**2, axis=-1)
    np.fill_diagonal(r2, np.inf)
    inv_r3 = r2**-1.5
    coulomb = -np.sum(d * inv_r3[:, :, None], axis=1)
    return k2 * pos + coulomb


def hessian(pos: np.ndarray, k2: np.ndarray) -> np.ndarray:
    n = len(pos)
    d = pos[:, None, :] - pos[None, :, :]
    r2 = np.sum(d**2, axis=-1)
    np.fill_diagonal(r2, np.inf)
    inv_r3 = r2**-1.5
    inv_r5 = r2**-2.5
    # d^2(1/r)/dr_a dr_b = (3 r_a r_b - delta_ab r^2) / r^5
    blocks = 3.0 * d[:, :, :, None] * d[:, :, None, :] * inv_r5[:, :, None, None]
    blocks -= np.eye(3)[None, None] * inv_r3[:, :, None, None]
    h = np.zeros((n, 3, n, 3))
    h[:, :, :, :] = -blocks.transpose(0, 2, 1, 3)
    diag = blocks.sum(axis=1)
    for i in range(n):
        h[i, :, i, :] = diag[i] + np.diag(k2)
    return h.reshape(3 * n, 3 * n)


# ---------------------------------------------------------------------------
# minimization


def _axial_chain(n: int, wz: float, tol: float = 1e-14, max_iter: int = 200) -> np.ndarray:
    """Axial positions of the linear chain (convex 1D problem, plain damped Newton)."""
    if n == 1:
        return np.zeros(1)
    # quasi-uniform ansatz: total length from the large-N continuum estimate
    length = 2.0 * (3.0 * n * max(math.log(n), 1.0) / 4.0) ** (1.0 / 3.0)
    z = np.linspace(-0.5, 0.5, n) * length * wz ** (-2.0 / 3.0)
    z = z * 0.8

    def energy(z):
        dz = z[:, None] - z[None, :]
        iu = np.triu_indices(n, 1)
        if np.any(np.diff(z) <= 0):
            return np.inf
        return 0.5 * wz**2 * np.sum(z**2) + np.sum(1.0 / np.abs(dz[iu]))

    for _ in range(max_iter):
        dz = z[:, None] - z[None, :]
        np.fill_diagonal(dz, np.inf)
        g = wz**2 * z - np.sum(np.sign(dz) / dz**2, axis=1)
        # the trap force sets the scale of the rounding floor on g
        if np.max(np.abs(g)) < tol * max(1.0, wz**2 * np.max(np.abs(z))):
            break
        c = 2.0 / np.abs(dz) ** 3
        h = -c
        np.fill_diagonal(h, 0.0)
        h[np.diag_indices(n)] = wz**2 + c.sum(axis=1)
        step = -np.linalg.solve(h, g)
        e0, s = energy(z), 1.0
        slack = 1e-13 * abs(e0)  # energy differences below this are rounding noise
        while energy(z + s * step) > e0 + 1e-4 * s * g @ step + slack and s > 1e-12:
            s *= 0.5
        z = z + s * step
        if np.max(np.abs(s * step)) < 1e-15 * np.max(np.abs(z)):
            break
    else:
        raise ConvergenceError("axial chain minimization did not converge", best=z)
    z = 0.5 * (z - z[::-1])  # exact reflection symmetry
    return z


def _saddle_free_newton(pos, k2, tol=GRADIENT_TOL, max_iter=500, max_step=0.2):
    n = len(pos)
    x = pos.reshape(-1).copy()
    energy = lambda v: potential_energy(v.reshape(n, 3), k2)
    g = gradient(pos, k2).reshape(-1)
    e = energy(x)
    for it in range(max_iter):
        gn = np.linalg.norm(g)
        h = hessian(x.reshape(n, 3), k2)
        lam, q = np.linalg.eigh(h)
        unstable = lam[0] < -1e-12
        if gn < tol and not unstable:
            return x.reshape(n, 3), gn, it
        step = -q @ ((q.T @ g) / np.maximum(np.abs(lam), 1e-10))
        if unstable:
            # escape saddles along the negative-curvature direction
            d = q[:, 0]
            along = d @ step
            if abs(along) < 0.1 * max_step:
                sgn = -np.sign(d @ g) or np.sign(d @ x) or 1.0
                step = step + (0.5 * max_step * sgn - along) * d
        norm = np.max(np.abs(step))
        if norm > max_step:
            step *= max_step / norm
        s = 1.0
        while True:
            trial = x + s * step
            et = energy(trial)
            if et <= e + 1e-4 * s * (g @ step) or s < 1e-10:
                break
            s *= 0.5
        if s < 1e-10 and et > e:
            # no descent in the modified-Newton direction; take a gradient step
            trial = x - 1e-3 * g
            et = energy(trial)
        x, e = trial, et
        g = gradient(x.reshape(n, 3), k2).reshape(-1)
    raise ConvergenceError(
        f"Newton did not reach |grad| < {tol:g} in {max_iter} iterations "
        f"(|grad| = {np.linalg.norm(g):.3g})",
        best=x.reshape(n, 3),
    )


def _overdamped_relax(pos, k2, steps=20000, dt=0.05):
    x = pos.copy()
    for _ in range(steps):
        x -= dt * gradient(x, k2)
    return x


def _minimize(pos, k2, tol=GRADIENT_TOL):
    try:
        return _saddle_free_newton(pos, k2, tol=tol)[:2]
    except ConvergenceError as err:
        log.info("Newton failed (%s); relaxing with overdamped dynamics", err)
        relaxed = _overdamped_relax(err.best, k2)
        return _saddle_free_newton(relaxed, k2, tol=tol)[:2]


def _k2(omega_ax: float, trap: TrapParameters) -> np.ndarray:
    return np.array([1.0, trap.anisotropy**2, (omega_ax / trap.omega_weak) ** 2])


def equilibrium_positions(
    n_ions: int, trap: TrapParameters, omega_ax: float, branch: str = "auto"
) -> EquilibriumConfiguration:
    """Minimum of trap + Coulomb energy at fixed axial frequency ``omega_ax`` (rad/s).

    ``branch`` is ``"linear"``, ``"zigzag"`` or ``"auto"`` (the stable one).
    The zigzag symmetry is broken by nudging even-indexed ions +1e-6 along
    the weak axis, so repeated calls return the same ground state.
    """
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    if not omega_ax > 0:
        raise ValueError("omega_ax must be positive")
    units = ScaledUnits.for_trap(trap)
    wz = omega_ax / trap.omega_weak
    k2 = _k2(omega_ax, trap)
    degenerate = trap.anisotropy == 1.0

    pos = np.zeros((n_ions, 3))
    pos[:, AXIAL] = _axial_chain(n_ions, wz)
    lin_grad = float(np.linalg.norm(gradient(pos, k2)))

    if branch == "auto":
        branch = "zigzag" if n_ions > 1 and _lowest_weak_sq(pos, k2) < 0 else "linear"
    if branch == "linear":
        res = lin_grad
    elif branch == "zigzag":
        if degenerate:
            warnings.warn("anisotropy = 1: the zigzag plane is not physically defined", stacklevel=2)
        start = pos.copy()
        start[::2, WEAK] += 1e-6
        pos, res = _minimize(start, k2)
        pos = _symmetrize(pos)
        res = float(np.linalg.norm(gradient(pos, k2)))
    else:
        raise ValueError(f"unknown branch {branch!r}")
    if res >= GRADIENT_TOL:
        raise ConvergenceError(f"equilibrium gradient norm {res:.3g} above tolerance", best=pos)
    return EquilibriumConfiguration(
        positions=pos,
        residual_gradient_norm=res,
        omega_ax=omega_ax,
        omega_weak=trap.omega_weak,
        anisotropy=trap.anisotropy,
        branch=branch,
        degenerate_anisotropy=degenerate,
        units=units,
    )


def _symmetrize(pos: np.ndarray) -> np.ndarray:
    """Average with the z -> -z image (ion order reversed); sign of x follows the ion parity."""
    n = len(pos)
    order = np.argsort(pos[:, AXIAL])
    pos = pos[order]
    mirror = pos[::-1].copy()
    mirror[:, AXIAL] *= -1
    if n % 2 == 0:
        mirror[:, WEAK] *= -1  # zigzag of an even chain maps onto its mirror image
    if np.max(np.abs(mirror - pos)) < 1e-6:
        pos = 0.5 * (pos + mirror)
    return pos


def _lowest_weak_sq(pos, k2) -> float:
    h = hessian(pos, k2)
    weak = np.arange(len(pos)) * 3 + WEAK
    return float(np.linalg.eigvalsh(h[np.ix_(weak, weak)])[0])


def mode_spectrum(config: EquilibriumConfiguration) -> ModeSpectrum:
    k2 = config.trap_frequencies**2
    h = hessian(config.positions, k2)
    asym = np.max(np.abs(h - h.T))
    if asym > 1e-12 * max(1.0, np.max(np.abs(h))):
        raise InternalError(f"Hessian is not symmetric (max asymmetry {asym:.3g})")
    lam, vec = np.linalg.eigh(0.5 * (h + h.T))
    weights = (vec**2).reshape(config.n_ions, 3, -1).sum(axis=0)
    branches = [BRANCH_NAMES[int(np.argmax(weights[:, k]))] for k in range(len(lam))]
    return ModeSpectrum(lam, vec, branches, config.omega_weak)


def thermal_rms_displacement(config: EquilibriumConfiguration, kT_over_m: float) -> np.ndarray:
    """Per-ion, per-axis thermal RMS displacement (scaled) from the harmonic modes.

    ``kT_over_m`` is in scaled units (see ``ScaledUnits.thermal_velocity_sq``).
    """
    spec = mode_spectrum(config)
    if np.any(spec.omega_sq <= 0):
        raise StateError("thermal displacement needs a stable configuration")
    var = (spec.eigenvectors**2 / spec.omega_sq) @ np.ones(len(spec.omega_sq))
    return np.sqrt(kT_over_m * var).reshape(config.n_ions, 3)


# ---------------------------------------------------------------------------
# critical point


def _weak_softness(n_ions: int, wz: float, u_unit: np.ndarray) -> float:
    """Lowest weak-transverse squared frequency of the linear chain (scaled)."""
    pos = np.zeros((n_ions, 3))
    pos[:, AXIAL] = u_unit * wz ** (-2.0 / 3.0)
    return _lowest_weak_sq(pos, np.array([1.0, 1.0, wz**2]))


def critical_axial_frequency(
    n_ions: int, omega_weak: float, anisotropy: float = 1.03, rtol: float = 1e-12
) -> float:
    """Axial frequency (rad/s) where the linear chain's zigzag mode goes soft.

    Found by bisection on the lowest weak-transverse eigenvalue. The strong
    axis decouples from the weak one for a linear chain, so ``anisotropy``
    does not change the result.
    """
    if n_ions < 2:
        raise ValueError("a critical point needs at least two ions")
    if anisotropy == 1.0:
        warnings.warn("anisotropy = 1: the zigzag plane is not physically defined", stacklevel=2)
    u_unit = _axial_chain(n_ions, 1.0)  # axial chain scales as wz^(-2/3)
    lo, hi = 1e-3, 1.0 + 1e-9
    if not (_weak_softness(n_ions, lo, u_unit) > 0 > _weak_softness(n_ions, hi, u_unit)):
        raise RangeError("soft-mode crossing not bracketed in (1e-3, 1] * omega_weak")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _weak_softness(n_ions, mid, u_unit) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * omega_weak


def zigzag_reference_amplitudes(n_ions: int, trap: TrapParameters, omega_ax: float) -> np.ndarray:
    """|weak-axis coordinate| of each ion in the zigzag ground state (scaled units)."""
    w_crit = critical_axial_frequency(n_ions, trap.omega_weak, trap.anisotropy)
    if omega_ax <= w_crit:
        raise StateError(
            f"omega_ax/2pi = {omega_ax / 2 / math.pi:.6g} Hz is not above the critical point "
            f"{w_crit / 2 / math.pi:.6g} Hz"
        )
    config = equilibrium_positions(n_ions, trap, omega_ax, branch="zigzag")
    return np.abs(config.positions[:, WEAK])
