"""Command-line interface: ``ionkzm <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, config, experiment, plotting
from .dynamics import SimState, run_quench
from .errors import ConfigError, IonKZMError, PlanError, ShapeError
from .physical_model import TWO_PI, ScaledUnits, axial_frequency_from_voltage, gamma_at_critical_point
from .statics import (
    critical_axial_frequency,
    equilibrium_positions,
    mode_spectrum,
    zigzag_reference_amplitudes,
)

log = logging.getLogger("ionkzm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

STATE_COLUMNS = ("ion_index", "x_m", "y_m", "z_m", "vx_m_per_s", "vy_m_per_s", "vz_m_per_s")
TRAJECTORY_COLUMNS = ("time_s", "ion_index", "x_m", "y_m", "z_m", "vx", "vy", "vz")
CLASSIFICATION_COLUMNS = ("seed", "tau_us", "gamma", "class", "kink_count", "rejected_flag")


class UsageError(Exception):
    """Bad input files or arguments; maps to exit code 2."""


# ---------------------------------------------------------------------------
# file helpers


def write_state_csv(path, state: SimState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATE_COLUMNS)
        for i, (p, v) in enumerate(zip(state.positions, state.velocities)):
            w.writerow([i, *(repr(float(c)) for c in p), *(repr(float(c)) for c in v)])


def read_state_csv(path) -> SimState:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            missing = [c for c in STATE_COLUMNS[:4] if c not in cols]
            if missing:
                raise UsageError(f"state file {path} is missing column(s): {', '.join(missing)}")
            rows = sorted(reader, key=lambda r: int(r["ion_index"]))
    except OSError as exc:
        raise UsageError(f"cannot read state file {path}: {exc}") from exc
    if len(rows) < 2:
        raise UsageError(f"state file {path} needs at least two ions")
    try:
        pos = np.array([[float(r[c]) for c in ("x_m", "y_m", "z_m")] for r in rows])
        vel = np.array([[float(r.get(c) or 0.0) for c in STATE_COLUMNS[4:]] for r in rows])
    except ValueError as exc:
        raise UsageError(f"non-numeric entry in {path}: {exc}") from exc
    return SimState(0.0, pos, vel)


def write_trajectory_csv(path, snapshots) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for t, xs, vs in zip(snapshots.times, snapshots.positions, snapshots.velocities):
            for i, (p, v) in enumerate(zip(xs, vs)):
                w.writerow([repr(float(t)), i, *(repr(float(c)) for c in p), *(repr(float(c)) for c in v)])


def write_classification_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLASSIFICATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in CLASSIFICATION_COLUMNS])


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(outdir: Path, command: str, cfg: dict, started: str, outputs, seed=None, extra=None) -> Path:
    manifest = {
        "tool": "ionkzm",
        "version": __version__,
        "command": command,
        "config": config.jsonable(cfg),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    if extra:
        manifest.update(extra)
    path = outdir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _reference_amplitudes(trap, n_ions, cfg) -> np.ndarray:
    w_end = axial_frequency_from_voltage(trap, config.build_ramp(cfg).v_end)
    amp = zigzag_reference_amplitudes(n_ions, trap, w_end)
    return ScaledUnits.for_trap(trap).length_si(amp)


# ---------------------------------------------------------------------------
# commands


def cmd_critical_point(args, cfg) -> int:
    trap = config.build_trap(cfg)
    n = config.n_ions(cfg)
    w = critical_axial_frequency(n, trap.omega_weak, trap.anisotropy)
    print(f"critical axial frequency: {w / TWO_PI:.6f} Hz ({w / TWO_PI / 1e3:.4f} kHz) for {n} ions")
    if args.output_dir:
        started = _now()
        out = _outdir(args)
        path = out / "critical_point.json"
        path.write_text(json.dumps({"n_ions": n, "omega_crit_hz": w / TWO_PI}, indent=2) + "\n")
        write_manifest(out, "critical-point", cfg, started, [path])
    return EXIT_OK


def cmd_equilibrium(args, cfg) -> int:
    started = _now()
    trap = config.build_trap(cfg)
    n = config.n_ions(cfg)
    w = TWO_PI * args.omega_ax_hz if args.omega_ax_hz else axial_frequency_from_voltage(trap, cfg["ramp"]["v_end"])
    eq = equilibrium_positions(n, trap, w, branch=args.branch)
    spec = mode_spectrum(eq)
    print(f"branch {eq.branch}, residual {eq.residual:.2e}, omega_ax/2pi = {w / TWO_PI:.6g} Hz")
    for k, p in enumerate(eq.positions_si):
        print(f"{k:3d} {p[0] * 1e6:10.4f} {p[1] * 1e6:10.4f} {p[2] * 1e6:10.4f} um")
    if args.output_dir:
        out = _outdir(args)
        pos_path, mode_path, fig_path = out / "equilibrium.csv", out / "modes.csv", out / "equilibrium.png"
        write_state_csv(pos_path, SimState(0.0, eq.positions_si, np.zeros((n, 3))))
        with open(mode_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("mode", "branch", "frequency_hz"))
            for k, (b, f) in enumerate(zip(spec.branches, spec.eigenfrequencies)):
                wr.writerow([k, b, repr(float(f) / TWO_PI)])
        plotting.plot_equilibrium(eq.positions_si, fig_path)
        write_manifest(out, "equilibrium", cfg, started, [pos_path, mode_path, fig_path])
    return EXIT_OK


def cmd_quench(args, cfg) -> int:
    started = _now()
    trap = config.build_trap(cfg)
    n = config.n_ions(cfg)
    ramp = config.build_ramp(cfg)
    cooling = config.build_cooling(cfg)
    integrator = config.build_integrator(cfg, trap)
    seed = cfg["seed"] if cfg["seed"] is not None else secrets.randbits(63)
    cfg = {**cfg, "seed": seed}  # recorded so the manifest reruns the same trajectory
    w_crit = critical_axial_frequency(n, trap.omega_weak, trap.anisotropy)
    gamma = gamma_at_critical_point(trap, ramp, w_crit)
    res = run_quench(n, trap, ramp, cooling, integrator, seed, record=True)
    amp = _reference_amplitudes(trap, n, cfg)
    conf = analysis.classify_configuration(res.final_state.positions, amp, config.build_thresholds(cfg))
    row = {"seed": seed, "tau_us": repr(float(ramp.tau * 1e6)), "gamma": repr(float(gamma)), "class": conf.cls.value,
           "kink_count": "" if conf.kink_count is None else conf.kink_count,
           "rejected_flag": int(conf.cls is analysis.CrystalClass.AMBIGUOUS)}
    print(f"seed {seed}: {conf.cls.value}, kinks {row['kink_count']}, swapped {res.swapped}, "
          f"gamma {gamma:.4e} rad/s^2")
    out = _outdir(args)
    paths = [out / "final_state.csv", out / "classification.csv", out / "quench.png"]
    write_state_csv(paths[0], res.final_state)
    write_classification_csv(paths[1], [row])
    plotting.plot_quench(res.snapshots, res.onset_times, paths[2])
    if args.dump_trajectory:
        paths.append(out / "trajectory.csv")
        write_trajectory_csv(paths[-1], res.snapshots)
    write_manifest(out, "quench", cfg, started, paths, seed=seed,
                   extra={"gamma_rad_per_s2": gamma, "omega_crit_hz": w_crit / TWO_PI,
                          "swapped": res.swapped, "class": conf.cls.value})
    return EXIT_OK


def _fits_for(points, window, weighted):
    fits = {}
    for aniso in sorted({p.anisotropy for p in points}):
        pts = [p for p in points if p.anisotropy == aniso]
        try:
            fits[aniso] = experiment.fit_power_law(pts, window, weighted=weighted)
        except IonKZMError as exc:
            log.warning("no power-law fit for anisotropy %g: %s", aniso, exc)
            fits[aniso] = None
    return fits


def _write_fits(out: Path, fits) -> list:
    paths = []
    for aniso, fit in fits.items():
        if fit is None:
            continue
        stem = out / ("fit" if len(fits) == 1 else f"fit_aniso{aniso:g}")
        paths.extend(experiment.write_fit(stem, fit))
        print(f"anisotropy {aniso:g}: beta = {fit.beta:.4f} +/- {fit.beta_stderr:.4f} "
              f"({fit.points_used} points)")
    return paths


def cmd_sweep(args, cfg) -> int:
    started = _now()
    plan = config.build_plan(cfg)

    def progress(done, total):
        log.info("sweep: %d/%d points", done, total)

    points = experiment.run_sweep(plan, progress=progress)
    out = _outdir(args)
    sweep_path, data_path, fig_path = out / "sweep.csv", out / "plot_data.csv", out / "sweep.png"
    experiment.write_sweep_csv(sweep_path, points)
    experiment.write_plot_data(data_path, points)
    for p in points:
        print(f"aniso {p.anisotropy:g} tau {p.tau * 1e6:7.4f} us  d = {p.d:.4f} +/- {p.d_stderr:.4f}  "
              f"(n1 {p.n1}, n2 {p.n2}, ambiguous {p.n_ambiguous}, failed {p.n_failed}, swapped {p.swap_fraction:.2f})")
    fits = _fits_for(points, experiment.DEFAULT_WINDOW, True)
    paths = [sweep_path, data_path, fig_path, *_write_fits(out, fits)]
    plotting.plot_sweep(points, fits, fig_path)
    write_manifest(out, "sweep", cfg, started, paths, seed=plan.master_seed)
    return EXIT_OK


def cmd_fit(args, cfg) -> int:
    started = _now()
    try:
        points = experiment.read_sweep_csv(args.input)
    except OSError as exc:
        raise UsageError(f"cannot read sweep file {args.input}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot parse sweep file {args.input}: {exc}") from exc
    if args.gamma_lo is not None or args.gamma_hi is not None:
        window, by = (args.gamma_lo or 0.0, args.gamma_hi or math.inf), "gamma"
    else:
        window, by = (args.window_lo, args.window_hi), "d"
    fits = {}
    for aniso in sorted({p.anisotropy for p in points}, key=lambda a: (math.isnan(a), a)):
        pts = [p for p in points if p.anisotropy == aniso or (math.isnan(aniso) and math.isnan(p.anisotropy))]
        fits[aniso] = experiment.fit_power_law(pts, window, by=by, weighted=not args.unweighted)
    paths = []
    if args.output_dir:
        out = _outdir(args)
        paths = _write_fits(out, fits)
        fig = out / "fit.png"
        plotting.plot_sweep(points, fits, fig)
        write_manifest(out, "fit", cfg, started, [*paths, fig], extra={"input": str(args.input)})
    else:
        for aniso, fit in fits.items():
            print(json.dumps({"anisotropy": aniso if math.isfinite(aniso) else None, **experiment.fit_record(fit)}))
    return EXIT_OK


def cmd_classify(args, cfg) -> int:
    state = read_state_csv(args.input)
    trap = config.build_trap(cfg)
    n = state.n_ions
    amp = _reference_amplitudes(trap, n, cfg)
    conf = analysis.classify_configuration(state.positions, amp, config.build_thresholds(cfg))
    row = {"seed": "" if cfg["seed"] is None else cfg["seed"], "tau_us": "", "gamma": "",
           "class": conf.cls.value, "kink_count": "" if conf.kink_count is None else conf.kink_count,
           "rejected_flag": int(conf.cls is analysis.CrystalClass.AMBIGUOUS)}
    print(f"{conf.cls.value} kink_count={row['kink_count']} sites={list(conf.kink_sites)}")
    if args.output_dir:
        started = _now()
        out = _outdir(args)
        path = out / "classification.csv"
        write_classification_csv(path, [row])
        write_manifest(out, "classify", cfg, started, [path], extra={"input": str(args.input)})
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    started = _now()
    state = read_state_csv(args.input)
    geometry = analysis.ImagingGeometry(psf_sigma=args.psf_um * 1e-6)
    seed = cfg["seed"]
    rng = None
    if args.photons is not None:
        seed = seed if seed is not None else secrets.randbits(63)
        cfg = {**cfg, "seed": seed}
        rng = np.random.default_rng(seed)
    img = analysis.render_synthetic_image(state.positions, geometry=geometry, photons_per_ion=args.photons, rng=rng)
    out = _outdir(args)
    pgm, png = out / "render.pgm", out / "render.png"
    analysis.write_pgm(pgm, img)
    plotting.plot_image(img, png)
    if img.truncated:
        log.warning("some ions lie outside the field of view")
    print(f"wrote {pgm} ({img.shape[1]}x{img.shape[0]} px, truncated={img.truncated})")
    write_manifest(out, "render", cfg, started, [pgm, png], seed=seed, extra={"truncated": img.truncated})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, output_required=False):
    p.add_argument("--config", help="YAML config file (a run manifest also works)")
    p.add_argument("--output-dir", required=output_required, help="directory for outputs")
    p.add_argument("--n-ions", type=int)
    p.add_argument("--omega-weak-hz", type=float)
    p.add_argument("--anisotropy", type=float)
    p.add_argument("--rf-mode", choices=["pseudopotential", "full_rf"])
    p.add_argument("--drive-hz", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _dynamics_flags(p):
    p.add_argument("--tau-us", type=float, help="ramp time constant (us)")
    p.add_argument("--friction-hz", type=float, help="cooling friction rate / 2pi (Hz)")
    p.add_argument("--temperature-mK", dest="temperature_mk", type=float)
    p.add_argument("--dt-ns", type=float)
    p.add_argument("--order", type=int, choices=[2, 4])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ionkzm", description="Linear-to-zigzag quench simulations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("critical-point", help="critical axial frequency of the linear chain")
    _common(p)
    p.set_defaults(func=cmd_critical_point)

    p = sub.add_parser("equilibrium", help="equilibrium crystal and normal modes")
    _common(p)
    p.add_argument("--omega-ax-hz", type=float, help="axial frequency (Hz); default: end of ramp")
    p.add_argument("--branch", choices=["auto", "linear", "zigzag"], default="auto")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("quench", help="one thermalized quench trajectory")
    _common(p, output_required=True)
    _dynamics_flags(p)
    p.add_argument("--dump-trajectory", action="store_true", help="also write the sampled trajectory")
    p.set_defaults(func=cmd_quench)

    p = sub.add_parser("sweep", help="Monte-Carlo sweep over ramp time constants")
    _common(p, output_required=True)
    _dynamics_flags(p)
    p.add_argument("--taus-us", help="comma-separated ramp time constants (us)")
    p.add_argument("--trajectories", type=int, help="trajectories per point")
    p.add_argument("--anisotropies", help="comma-separated anisotropy values")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: KZM_WORKERS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="power-law fit of a sweep CSV")
    _common(p)
    p.add_argument("input", help="sweep CSV")
    p.add_argument("--window-lo", type=float, default=experiment.DEFAULT_WINDOW[0], help="lowest d used")
    p.add_argument("--window-hi", type=float, default=experiment.DEFAULT_WINDOW[1], help="highest d used")
    p.add_argument("--gamma-lo", type=float, help="select points by gamma instead of d")
    p.add_argument("--gamma-hi", type=float)
    p.add_argument("--unweighted", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="classify a final-state CSV")
    _common(p)
    p.add_argument("input", help="state CSV (ion_index, x_m, y_m, z_m, ...)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("render", help="render a final-state CSV as a camera image")
    _common(p, output_required=True)
    p.add_argument("input", help="state CSV")
    p.add_argument("--psf-um", type=float, default=1.5)
    p.add_argument("--photons", type=float, help="photons per ion; enables shot noise")
    p.set_defaults(func=cmd_render)
    return parser


def _csv_floats(text, name):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name} must be a comma-separated list of numbers") from None


def flags_from_args(args) -> dict:
    flags: dict = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    config.set_flag(flags, "n_ions", get("n_ions"))
    config.set_flag(flags, "trap.omega_weak_hz", get("omega_weak_hz"))
    config.set_flag(flags, "trap.anisotropy", get("anisotropy"))
    config.set_flag(flags, "trap.rf_mode", get("rf_mode"))
    config.set_flag(flags, "trap.drive_hz", get("drive_hz"))
    config.set_flag(flags, "seed", get("seed"))
    config.set_flag(flags, "ramp.tau_us", get("tau_us"))
    config.set_flag(flags, "cooling.friction_hz", get("friction_hz"))
    config.set_flag(flags, "cooling.temperature_mK", get("temperature_mk"))
    config.set_flag(flags, "integrator.dt_ns", get("dt_ns"))
    if args.command == "sweep":
        config.set_flag(flags, "sweep.order", get("order"))
        if get("taus_us"):
            config.set_flag(flags, "sweep.tau_us", _csv_floats(args.taus_us, "taus-us"))
        if get("anisotropies"):
            config.set_flag(flags, "sweep.anisotropies", _csv_floats(args.anisotropies, "anisotropies"))
        config.set_flag(flags, "sweep.trajectories_per_point", get("trajectories"))
        config.set_flag(flags, "sweep.master_seed", get("master_seed"))
        config.set_flag(flags, "workers", get("workers"))
    else:
        config.set_flag(flags, "integrator.order", get("order"))
    return flags


def _config_path(path):
    """A run manifest stands in for a config file: its ``config`` block is reused."""
    if path is None:
        return None, None
    p = Path(path)
    if p.suffix == ".json":
        try:
            data = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {p}: {exc}") from exc
        if isinstance(data, dict) and data.get("tool") == "ionkzm" and "config" in data:
            return None, data["config"]
    return p, None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path, manifest_cfg = _config_path(args.config)
        flags = flags_from_args(args)
        if manifest_cfg is not None:
            cfg = config.resolve(None, config._merge(manifest_cfg, flags) if flags else manifest_cfg)
        else:
            cfg = config.resolve(path, flags)
        return args.func(args, cfg)
    except (UsageError, ConfigError, PlanError, ShapeError) as exc:
        print(f"ionkzm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IonKZMError as exc:
        print(f"ionkzm {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"ionkzm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
