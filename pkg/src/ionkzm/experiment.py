"""Monte-Carlo quench sweeps and power-law fitting of defect densities."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis
from .analysis import ClassifierThresholds, CrystalClass
from .dynamics import CoolingModel, IntegratorConfig, run_quench
from .errors import (
    InsufficientDataError,
    PlanError,
    SingularityError,
    NumericalBlowupError,
    SweepError,
)
from .physical_model import (
    RampProtocol,
    ScaledUnits,
    TrapParameters,
    gamma_at_critical_point,
)
from .statics import critical_axial_frequency, zigzag_reference_amplitudes

log = logging.getLogger(__name__)

#: quench time constants (s) of the default sweep, log-spaced over 0.5-4 us
DEFAULT_TAUS = tuple(float(t) for t in np.round(np.geomspace(0.5e-6, 4.0e-6, 10), 10))

DEFAULT_WINDOW = (0.05, 0.8)

MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class SweepPlan:
    tau_values: tuple[float, ...] = DEFAULT_TAUS
    trajectories_per_point: int = 200
    master_seed: int = 20240601
    n_ions: int = 16
    trap: TrapParameters = TrapParameters()
    ramp: RampProtocol = RampProtocol.from_tau(1e-6)  # endpoints and settle time; tau is replaced
    cooling: CoolingModel = CoolingModel()
    integrator: IntegratorConfig = IntegratorConfig(order=2)
    anisotropy_values: tuple[float, ...] = (1.03,)
    thresholds: ClassifierThresholds = ClassifierThresholds()
    workers: int = 1

    def __post_init__(self):
        taus = tuple(float(t) for t in self.tau_values)
        object.__setattr__(self, "tau_values", taus)
        object.__setattr__(self, "anisotropy_values", tuple(float(a) for a in self.anisotropy_values))
        if not taus or any(not t > 0 for t in taus):
            raise PlanError("tau_values must be non-empty and positive")
        if len(set(taus)) != len(taus):
            raise PlanError("tau_values must be distinct")
        if self.trajectories_per_point < 1:
            raise PlanError("trajectories_per_point must be >= 1")
        if not self.anisotropy_values:
            raise PlanError("at least one anisotropy is required")
        if self.workers < 1:
            raise PlanError("workers must be >= 1")

    def ramp_for(self, tau: float) -> RampProtocol:
        return self.ramp.with_tau(tau)


@dataclass(frozen=True)
class SweepPoint:
    anisotropy: float
    tau: float
    gamma: float
    n1: int
    n2: int
    n_ambiguous: int
    n_failed: int
    n_total: int
    d: float
    d_stderr: float
    swap_fraction: float

    def __post_init__(self):
        if self.n1 + self.n2 + self.n_ambiguous > self.n_total:
            raise ValueError("n1 + n2 + n_ambiguous exceeds n_total")
        if self.d_stderr < 0:
            raise ValueError("d_stderr must be non-negative")


@dataclass(frozen=True)
class PowerLawFit:
    beta: float
    beta_stderr: float
    log_amplitude: float  # natural log of A in d = A gamma^beta
    fit_window: tuple[float, float]  # inclusive gamma range actually used
    points_used: int

    @property
    def amplitude(self) -> float:
        return math.exp(self.log_amplitude)

    def covers(self, beta: float, k: float = 2.0) -> bool:
        return abs(self.beta - beta) <= k * self.beta_stderr


@dataclass(frozen=True)
class TrajectoryOutcome:
    index: int
    seed: int
    cls: CrystalClass | None  # None when the trajectory failed
    kink_count: int | None
    swapped: bool = False


def trajectory_seed(master_seed: int, tau: float, index: int) -> int:
    """64-bit seed from (master seed, tau in ps, trajectory index).

    Keying on the tau value instead of its list position keeps existing
    seeds unchanged when the grid is extended.
    """
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFF_FFFF_FFFF_FFFF, int(round(tau * 1e12)), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class _Job:
    n_ions: int
    trap: TrapParameters
    ramp: RampProtocol
    cooling: CoolingModel
    integrator: IntegratorConfig
    thresholds: ClassifierThresholds
    amplitudes: tuple[float, ...]
    seeds: tuple[tuple[int, int], ...]  # (index, seed)


def _run_job(job: _Job) -> list[TrajectoryOutcome]:
    out = []
    amp = np.asarray(job.amplitudes)
    for index, seed in job.seeds:
        try:
            res = run_quench(job.n_ions, job.trap, job.ramp, job.cooling, job.integrator, seed)
        except (NumericalBlowupError, SingularityError) as exc:
            log.warning("trajectory %d (seed %d) failed: %s", index, seed, exc)
            out.append(TrajectoryOutcome(index, seed, None, None))
            continue
        conf = analysis.classify_configuration(res.final_state.positions, amp, job.thresholds)
        out.append(TrajectoryOutcome(index, seed, conf.cls, conf.kink_count, res.swapped))
    return out


def aggregate(outcomes, anisotropy: float, tau: float, gamma: float) -> SweepPoint:
    """Per-point counts and statistics; independent of the order of ``outcomes``."""
    outcomes = sorted(outcomes, key=lambda o: o.index)
    n_total = len(outcomes)
    done = [o for o in outcomes if o.cls is not None]
    n_failed = n_total - len(done)
    ok = [o for o in done if o.cls is not CrystalClass.AMBIGUOUS]
    counts = np.array([o.kink_count for o in ok], dtype=float)
    n1 = int(np.sum(counts == 1))
    n2 = int(np.sum(counts == 2))
    n_amb = len(done) - len(ok)
    if len(ok):
        d = analysis.defect_density(n1, n2, len(ok))
        d_stderr = float(np.std(counts, ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else 0.0
    else:
        d, d_stderr = math.nan, math.nan
    swap = float(np.mean([o.swapped for o in done])) if done else math.nan
    return SweepPoint(anisotropy, tau, gamma, n1, n2, n_amb, n_failed, n_total, d, d_stderr, swap)


def _chunks(seq, k):
    size = max(1, math.ceil(len(seq) / k))
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def run_sweep(plan: SweepPlan, progress=None) -> list[SweepPoint]:
    """Run every (anisotropy, tau) point of ``plan``.

    Returns points ordered by anisotropy, then by the plan's tau order.
    ``progress`` is called as ``progress(done_points, total_points)``.
    """
    points = []
    jobs, keys = [], []
    for aniso in plan.anisotropy_values:
        trap = plan.trap.with_(anisotropy=aniso)
        w_crit = critical_axial_frequency(plan.n_ions, trap.omega_weak, aniso)
        w_end = trap.axial_calibration * math.sqrt(plan.ramp.v_end)
        amp = zigzag_reference_amplitudes(plan.n_ions, trap, w_end)
        amp_si = tuple(float(a) for a in ScaledUnits.for_trap(trap).length_si(amp))
        for tau in plan.tau_values:
            ramp = plan.ramp_for(tau)
            gamma = gamma_at_critical_point(trap, ramp, w_crit)
            seeds = tuple((i, trajectory_seed(plan.master_seed, tau, i)) for i in range(plan.trajectories_per_point))
            parts = _chunks(seeds, plan.workers if plan.workers > 1 else 1)
            for part in parts:
                jobs.append(_Job(plan.n_ions, trap, ramp, plan.cooling, plan.integrator,
                                 plan.thresholds, amp_si, tuple(part)))
                keys.append((aniso, tau, gamma))
    results: dict[tuple, list] = {}
    n_keys = len({k[:2] for k in keys})
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            for key, res in zip(keys, pool.map(_run_job, jobs)):
                results.setdefault(key, []).extend(res)
                if progress:
                    progress(len(results), n_keys)
    else:
        for key, job in zip(keys, jobs):
            results.setdefault(key, []).extend(_run_job(job))
            if progress:
                progress(len(results), n_keys)
    failures = []
    for key, outcomes in results.items():
        pt = aggregate(outcomes, *key)
        points.append(pt)
        if pt.n_failed > MAX_FAILURE_FRACTION * pt.n_total:
            failures.append(pt)
    if failures:
        detail = ", ".join(f"aniso {p.anisotropy} tau {p.tau * 1e6:.3g} us: {p.n_failed}/{p.n_total}"
                           for p in failures)
        raise SweepError(f"more than {MAX_FAILURE_FRACTION:.0%} of trajectories failed at {detail}")
    return points


def select_window(points, window=DEFAULT_WINDOW, by: str = "d"):
    """Points whose ``d`` (or ``gamma``, with ``by='gamma'``) lies inside ``window`` inclusive."""
    lo, hi = window
    key = (lambda p: p.d) if by == "d" else (lambda p: p.gamma)
    return [p for p in points if np.isfinite(p.d) and lo <= key(p) <= hi]


def fit_power_law(points, window=DEFAULT_WINDOW, by: str = "d", weighted: bool = True) -> PowerLawFit:
    """Least-squares fit of log d against log gamma.

    Weights are (d / d_stderr)^2, the inverse variance of log d. The
    parameter covariance is scaled by the reduced chi-square when that
    exceeds one, so the quoted error never understates the scatter about
    the fit. Points with d = 0 are dropped.
    """
    chosen = select_window(points, window, by)
    zero = [p for p in chosen if p.d <= 0]
    if zero:
        log.info("dropping %d point(s) with d = 0 from the fit", len(zero))
    chosen = [p for p in chosen if p.d > 0]
    if len(chosen) < 3:
        raise InsufficientDataError(f"power-law fit needs >= 3 points with d > 0 in the window, got {len(chosen)}")
    g = np.array([p.gamma for p in chosen])
    d = np.array([p.d for p in chosen])
    x, y = np.log(g), np.log(d)
    if weighted:
        rel = np.array([p.d_stderr / p.d for p in chosen])
        if np.any(~np.isfinite(rel)) or np.any(rel <= 0):
            raise InsufficientDataError("weighted fit needs positive finite d_stderr for every point")
        w = 1.0 / rel**2
    else:
        w = np.ones_like(x)
    xm = np.sum(w * x) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    beta = np.sum(w * (x - xm) * (y - np.sum(w * y) / np.sum(w))) / sxx
    intercept = np.sum(w * (y - beta * x)) / np.sum(w)
    resid = y - intercept - beta * x
    dof = len(x) - 2
    if weighted:
        scale = max(1.0, float(np.sum(w * resid**2)) / dof) if dof > 0 else 1.0
    else:
        scale = float(np.sum(resid**2)) / dof if dof > 0 else 0.0
    beta_stderr = math.sqrt(scale / sxx)
    return PowerLawFit(float(beta), beta_stderr, float(intercept), (float(g.min()), float(g.max())), len(x))


@dataclass
class AnisotropyComparison:
    reference: list[SweepPoint]
    other: list[SweepPoint]
    ratio: np.ndarray
    ratio_stderr: np.ndarray
    fits: dict = field(default_factory=dict)

    def mid_window_ratio(self, window=DEFAULT_WINDOW) -> tuple[float, float]:
        """Ratio at the reference point whose d is closest to the window's geometric centre."""
        target = math.sqrt(window[0] * window[1])
        ok = [i for i, p in enumerate(self.reference)
              if window[0] <= p.d <= window[1] and np.isfinite(self.ratio[i])]
        if not ok:
            raise InsufficientDataError("no reference point inside the window")
        i = min(ok, key=lambda k: abs(math.log(self.reference[k].d / target)))
        return float(self.ratio[i]), float(self.ratio_stderr[i])


def anisotropy_comparison(plan: SweepPlan, points=None, window=DEFAULT_WINDOW) -> AnisotropyComparison:
    """Pair the points of the first two anisotropies in ``plan`` by tau."""
    if len(plan.anisotropy_values) != 2:
        raise PlanError("anisotropy comparison needs exactly two anisotropy values")
    points = run_sweep(plan) if points is None else points
    a_ref, a_other = plan.anisotropy_values
    ref = sorted((p for p in points if p.anisotropy == a_ref), key=lambda p: p.tau)
    oth = sorted((p for p in points if p.anisotropy == a_other), key=lambda p: p.tau)
    if [p.tau for p in ref] != [p.tau for p in oth]:
        raise PlanError("anisotropy sweeps must share the same tau list")
    d0 = np.array([p.d for p in ref])
    d1 = np.array([p.d for p in oth])
    s0 = np.array([p.d_stderr for p in ref])
    s1 = np.array([p.d_stderr for p in oth])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d0 > 0, d1 / d0, np.nan)
        rel = np.sqrt((s0 / d0) ** 2 + np.where(d1 > 0, (s1 / d1) ** 2, 0.0))
        err = np.abs(ratio) * rel
        if np.any(d1 == 0):
            # ratio zero: propagate the numerator error alone
            err = np.where(d1 == 0, s1 / d0, err)
    fits = {}
    for a, pts in ((a_ref, ref), (a_other, oth)):
        try:
            fits[a] = fit_power_law(pts, window)
        except InsufficientDataError as exc:
            log.warning("no fit for anisotropy %s: %s", a, exc)
            fits[a] = None
    return AnisotropyComparison(ref, oth, ratio, err, fits)


def exponent_agreement(fit_a: PowerLawFit, fit_b: PowerLawFit, k: float = 2.0) -> bool:
    """True when the exponents differ by at most k combined standard errors."""
    return abs(fit_a.beta - fit_b.beta) <= k * math.hypot(fit_a.beta_stderr, fit_b.beta_stderr)


# ---------------------------------------------------------------------------
# output

SWEEP_COLUMNS = ("anisotropy", "tau_us", "gamma_rad_per_s2", "n1", "n2", "n_ambiguous", "n_failed",
                 "n_total", "d", "d_stderr", "swap_fraction")
FIT_COLUMNS = ("beta", "beta_stderr", "log_amplitude", "window_lo", "window_hi", "points_used")


def _f(x) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def write_sweep_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for p in points:
            w.writerow([_f(p.anisotropy), _f(p.tau * 1e6), _f(p.gamma), p.n1, p.n2, p.n_ambiguous,
                        p.n_failed, p.n_total, _f(p.d), _f(p.d_stderr), _f(p.swap_fraction)])


def read_sweep_csv(path) -> list[SweepPoint]:
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("tau_us", "gamma_rad_per_s2", "d", "d_stderr") if c not in (reader.fieldnames or [])]
        if missing:
            raise PlanError(f"sweep CSV {path} is missing column(s): {', '.join(missing)}")
        for row in reader:
            def get(name, cast, default):
                v = row.get(name)
                return cast(v) if v not in (None, "") else default
            n_total = get("n_total", int, 0)
            points.append(SweepPoint(
                anisotropy=get("anisotropy", float, math.nan),
                tau=float(row["tau_us"]) * 1e-6,
                gamma=float(row["gamma_rad_per_s2"]),
                n1=get("n1", int, 0), n2=get("n2", int, 0), n_ambiguous=get("n_ambiguous", int, 0),
                n_failed=get("n_failed", int, 0),
                n_total=max(n_total, get("n1", int, 0) + get("n2", int, 0) + get("n_ambiguous", int, 0)),
                d=float(row["d"]), d_stderr=float(row["d_stderr"]),
                swap_fraction=get("swap_fraction", float, math.nan),
            ))
    return points


def fit_record(fit: PowerLawFit) -> dict:
    return {"beta": fit.beta, "beta_stderr": fit.beta_stderr, "log_amplitude": fit.log_amplitude,
            "window_lo": fit.fit_window[0], "window_hi": fit.fit_window[1], "points_used": fit.points_used}


def write_fit(path_stem, fit: PowerLawFit) -> tuple[Path, Path]:
    """``<stem>.csv`` and ``<stem>.json`` with the fit parameters."""
    stem = Path(path_stem)
    rec = fit_record(fit)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIT_COLUMNS)
        w.writerow([_f(rec[c]) if isinstance(rec[c], float) else rec[c] for c in FIT_COLUMNS])
    json_path.write_text(json.dumps(rec, indent=2) + "\n")
    return csv_path, json_path


def write_plot_data(path, points) -> None:
    """log10 gamma, log10 d and the matching one-sigma errors in log10 d."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("anisotropy", "log10_gamma", "log10_d", "log10_d_err"))
        for p in points:
            if p.d > 0:
                w.writerow([_f(p.anisotropy), _f(math.log10(p.gamma)), _f(math.log10(p.d)),
                            _f(p.d_stderr / (p.d * math.log(10)))])


def with_workers(plan: SweepPlan, workers: int) -> SweepPlan:
    return replace(plan, workers=max(1, int(workers)))

