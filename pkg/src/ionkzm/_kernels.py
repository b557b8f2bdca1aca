"""Compiled inner loops for the Langevin integrator (scaled units).

Trap parameters travel as a flat float64 array, see ``P_*`` indices below.
"""

import math

import numpy as np
from numba import njit

P_MODE, P_WX2, P_WY2, P_QX, P_QY, P_OMEGA, P_A2, P_VS, P_VE, P_T0, P_TAU = range(11)
N_PARAMS = 11

OK, SINGULAR, BLOWUP = 0, 1, 2

SINGULAR_DISTANCE = 1e-6

# no nnan/ninf: the blow-up checks must survive optimization
_FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}

# Blanes & Moan optimized order-4 symmetric Runge-Kutta-Nystrom coefficients
_A1 = 0.245298957184271
_A2 = 0.604872665711080
_A3 = 0.5 - (_A1 + _A2)
_B1 = 0.0829844064174052
_B2 = 0.396309801498368
_B3 = -0.0390563049223486
_B4 = 1.0 - 2.0 * (_B1 + _B2 + _B3)
PRK4_DRIFT = np.array([_A1, _A2, _A3, _A3, _A2, _A1])
PRK4_KICK = np.array([_B1, _B2, _B3, _B4, _B3, _B2, _B1])


@njit(cache=True, fastmath=_FAST)
def axial_omega_sq(p, t):
    x = (t - p[P_T0]) / p[P_TAU]
    if x >= 0.0:
        s = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        s = e / (1.0 + e)
    return p[P_A2] * (p[P_VS] + (p[P_VE] - p[P_VS]) * s)


@njit(cache=True, fastmath=_FAST)
def accelerations(x, t, p, out):
    """Deterministic acceleration into ``out``; returns the minimum pair distance."""
    n = x.shape[0]
    wz2 = axial_omega_sq(p, t)
    if p[P_MODE] == 0.0:
        kx = -p[P_WX2]
        ky = -p[P_WY2]
    else:
        c = math.cos(p[P_OMEGA] * t)
        kx = p[P_QX] * c
        ky = -p[P_QY] * c
    for i in range(n):
        out[i, 0] = kx * x[i, 0]
        out[i, 1] = ky * x[i, 1]
        out[i, 2] = -wz2 * x[i, 2]
    rmin2 = np.inf
    for i in range(n):
        xi0 = x[i, 0]
        xi1 = x[i, 1]
        xi2 = x[i, 2]
        for j in range(i + 1, n):
            d0 = xi0 - x[j, 0]
            d1 = xi1 - x[j, 1]
            d2 = xi2 - x[j, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 < rmin2:
                rmin2 = r2
            inv = 1.0 / (r2 * math.sqrt(r2))
            f0 = d0 * inv
            f1 = d1 * inv
            f2 = d2 * inv
            out[i, 0] += f0
            out[i, 1] += f1
            out[i, 2] += f2
            out[j, 0] -= f0
            out[j, 1] -= f1
            out[j, 2] -= f2
    return math.sqrt(rmin2)


@njit(cache=True, fastmath=_FAST)
def _ou(v, c1, c2, noise):
    n = v.shape[0]
    for i in range(n):
        for k in range(3):
            v[i, k] = c1 * v[i, k] + c2 * noise[i, k]


@njit(cache=True, fastmath=_FAST)
def _check(x, v):
    """Index of the first ion with a non-finite coordinate, or -1."""
    n = x.shape[0]
    for i in range(n):
        for k in range(3):
            if not (math.isfinite(x[i, k]) and math.isfinite(v[i, k])):
                return i
    return -1


@njit(cache=True, fastmath=_FAST)
def _ordered(x):
    for i in range(x.shape[0] - 1):
        if x[i, 2] >= x[i + 1, 2]:
            return False
    return True


@njit(cache=True, fastmath=_FAST)
def integrate(x, v, t, h, nsteps, order, p, c1, c2, noise, stride, rec_x, rec_v, rec_t, stats):
    """Advance ``x, v`` in place by ``nsteps`` steps of size ``h`` from time ``t``.

    order 2: BAOAB splitting (velocity Verlet when c1 = 1, c2 = 0).
    order 4: [order-4 RKN] O(h). Consecutive steps compose to
    ... O(h/2) [RKN] O(h/2) ..., the symmetric splitting, since two OU half
    steps equal one full step in law.
    ``noise`` holds one standard normal per step and component, shape
    (nsteps, N, 3); ``c1 = exp(-eta h)``, ``c2 = sqrt(kT/m (1 - c1^2))``. Every ``stride`` steps the state is
    written to ``rec_*`` if those have room. ``stats`` = [min distance,
    swapped flag, status, offending ion, final time] on return.
    """
    n = x.shape[0]
    a = np.empty_like(x)
    rmin = accelerations(x, t, p, a)
    swapped = stats[1]
    nrec = rec_t.shape[0]
    irec = 0
    status = OK
    bad = -1
    t_start = t
    for s in range(nsteps):
        t = t_start + s * h
        if order == 2:
            for i in range(n):
                for k in range(3):
                    v[i, k] += 0.5 * h * a[i, k]
                    x[i, k] += 0.5 * h * v[i, k]
            _ou(v, c1, c2, noise[s])
            for i in range(n):
                for k in range(3):
                    x[i, k] += 0.5 * h * v[i, k]
            t = t_start + (s + 1) * h
            r = accelerations(x, t, p, a)
            if r < rmin:
                rmin = r
            for i in range(n):
                for k in range(3):
                    v[i, k] += 0.5 * h * a[i, k]
        else:
            for st in range(6):
                bk = PRK4_KICK[st] * h
                for i in range(n):
                    for k in range(3):
                        v[i, k] += bk * a[i, k]
                ad = PRK4_DRIFT[st] * h
                for i in range(n):
                    for k in range(3):
                        x[i, k] += ad * v[i, k]
                t += ad
                r = accelerations(x, t, p, a)
                if r < rmin:
                    rmin = r
            t = t_start + (s + 1) * h
            bk = PRK4_KICK[6] * h
            for i in range(n):
                for k in range(3):
                    v[i, k] += bk * a[i, k]
            _ou(v, c1, c2, noise[s])
        if rmin < SINGULAR_DISTANCE:
            status = SINGULAR
            break
        bad = _check(x, v)
        if bad >= 0:
            status = BLOWUP
            break
        if swapped == 0.0 and not _ordered(x):
            swapped = 1.0
        if stride > 0 and (s + 1) % stride == 0 and irec < nrec:
            rec_x[irec] = x
            rec_v[irec] = v
            rec_t[irec] = t
            irec += 1
    stats[0] = min(stats[0], rmin)
    stats[1] = swapped
    stats[2] = status
    stats[3] = bad
    stats[4] = t
    return irec
