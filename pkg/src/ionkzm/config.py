"""Layered run configuration: built-in defaults < YAML file < environment < flags.

Schema (all keys optional in a file except those in :data:`REQUIRED_KEYS`)::

    n_ions: 16
    trap:
      species: 40Ca+
      omega_weak_hz: 1394.1e3      # frequencies in Hz (not rad/s)
      anisotropy: 1.03
      drive_hz: 22.0e6
      rf_mode: pseudopotential     # or full_rf
      calibration_hz: 344.0e3      # axial frequency at 1 V end-cap voltage
    ramp:
      v_start: 0.2357
      v_end: 1.0
      tau_us: 1.0
      t0_us: null                  # default 8 tau
      settle_us: 100.0
    cooling:
      friction_hz: ...             # eta / (2 pi)
      temperature_mK: 0.54
    integrator:
      dt_ns: 5.0
      scheme: stochastic_splitting
      order: 4
      sample_stride: 20
    sweep:
      tau_us: [0.5, ..., 4.0]
      trajectories_per_point: 200
      master_seed: 20240601
      anisotropies: [1.03]
      order: 2
    classifier:
      displaced_fraction: 0.3
      ambiguity_margin: 0.1
      edge_exclusion: 0.3
    seed: null
    workers: 1

Environment variables ``KZM_<SECTION>_<KEY>`` (upper case, e.g.
``KZM_TRAP_ANISOTROPY``) override the file; ``KZM_N_IONS``, ``KZM_SEED``
and ``KZM_WORKERS`` address top-level keys.
"""

from __future__ import annotations

import copy
import math
import os
import re
from pathlib import Path

import yaml

from .analysis import ClassifierThresholds
from .dynamics import CoolingModel, IntegratorConfig, Scheme
from .errors import ConfigError
from .experiment import DEFAULT_TAUS, SweepPlan
from .physical_model import TWO_PI, RampProtocol, RFMode, TrapParameters, species_by_name


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1.0e6`` (no exponent sign) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)

#: radiative friction rate eta / (2 pi) of the default Doppler-cooling model
DEFAULT_FRICTION_HZ = CoolingModel().friction_rate / TWO_PI

DEFAULTS = {
    "n_ions": 16,
    "trap": {
        "species": "40Ca+",
        "omega_weak_hz": 1394.1e3,
        "anisotropy": 1.03,
        "drive_hz": 22.0e6,
        "rf_mode": "pseudopotential",
        "calibration_hz": 344.0e3,
    },
    "ramp": {
        "v_start": (167.0 / 344.0) ** 2,
        "v_end": 1.0,
        "tau_us": 1.0,
        "t0_us": None,
        "settle_us": 100.0,
    },
    "cooling": {"friction_hz": DEFAULT_FRICTION_HZ, "temperature_mK": 0.54},
    "integrator": {"dt_ns": None, "scheme": "stochastic_splitting", "order": 4, "sample_stride": 20},
    "sweep": {
        "tau_us": [round(t * 1e6, 6) for t in DEFAULT_TAUS],
        "trajectories_per_point": 200,
        "master_seed": 20240601,
        "anisotropies": [1.03],
        "order": 2,
    },
    "classifier": {"displaced_fraction": 0.3, "ambiguity_margin": 0.1, "edge_exclusion": 0.3},
    "seed": None,
    "workers": 1,
}

#: keys a configuration file must define (dotted paths)
REQUIRED_KEYS = ("n_ions", "trap.species", "trap.omega_weak_hz", "trap.anisotropy")

_SECTIONS = tuple(k for k, v in DEFAULTS.items() if isinstance(v, dict))


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"configuration key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _lookup(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def load_file(path) -> dict:
    """Parse a YAML config file and check required keys; returns the raw mapping."""
    p = Path(path)
    try:
        data = yaml.load(p.read_text(), Loader=_Loader)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a mapping at top level")
    for key in REQUIRED_KEYS:
        try:
            _lookup(data, key)
        except KeyError:
            raise ConfigError(f"config file {p} is missing required key {key!r}") from None
    return data


def _parse_env_value(text: str):
    return yaml.load(text, Loader=_Loader)


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, text in environ.items():
        if not name.startswith("KZM_"):
            continue
        rest = name[4:].lower()
        if rest in ("n_ions", "seed", "workers"):
            out[rest] = _parse_env_value(text)
            continue
        for section in _SECTIONS:
            if rest.startswith(section + "_"):
                key = rest[len(section) + 1:]
                match = {k.lower(): k for k in DEFAULTS[section]}
                if key not in match:
                    raise ConfigError(f"environment variable {name} names unknown key {section}.{key}")
                out.setdefault(section, {})[match[key]] = _parse_env_value(text)
                break
        else:
            raise ConfigError(f"environment variable {name} does not match any configuration key")
    return out


def resolve(path=None, flags: dict | None = None, environ=None) -> dict:
    """Resolved configuration mapping (defaults < file < environment < flags)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, load_file(path))
    cfg = _merge(cfg, env_overrides(environ))
    if flags:
        cfg = _merge(cfg, flags)
    build_trap(cfg)  # validates early
    return cfg


def set_flag(flags: dict, dotted: str, value) -> None:
    """Insert ``value`` at a dotted path of a nested override mapping."""
    if value is None:
        return
    node = flags
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _num(cfg, dotted, cast=float):
    try:
        val = _lookup(cfg, dotted)
    except KeyError:
        raise ConfigError(f"missing configuration key {dotted!r}") from None
    try:
        return cast(val)
    except (TypeError, ValueError):
        raise ConfigError(f"configuration key {dotted!r} must be {cast.__name__}, got {val!r}") from None


def build_trap(cfg: dict) -> TrapParameters:
    t = cfg["trap"]
    try:
        mode = RFMode(t["rf_mode"])
    except ValueError:
        raise ConfigError(f"trap.rf_mode must be one of {[m.value for m in RFMode]}, got {t['rf_mode']!r}") from None
    return TrapParameters(
        omega_weak=TWO_PI * _num(cfg, "trap.omega_weak_hz"),
        anisotropy=_num(cfg, "trap.anisotropy"),
        drive_frequency=TWO_PI * _num(cfg, "trap.drive_hz"),
        rf_mode=mode,
        axial_calibration=TWO_PI * _num(cfg, "trap.calibration_hz"),
        species=species_by_name(str(t["species"])),
    )


def build_ramp(cfg: dict, tau_us: float | None = None) -> RampProtocol:
    r = cfg["ramp"]
    tau = (tau_us if tau_us is not None else _num(cfg, "ramp.tau_us")) * 1e-6
    t0 = None if r.get("t0_us") is None else float(r["t0_us"]) * 1e-6
    return RampProtocol.from_tau(tau, _num(cfg, "ramp.v_start"), _num(cfg, "ramp.v_end"),
                                 _num(cfg, "ramp.settle_us") * 1e-6, t0=t0)


def build_cooling(cfg: dict) -> CoolingModel:
    return CoolingModel(TWO_PI * _num(cfg, "cooling.friction_hz"), _num(cfg, "cooling.temperature_mK") * 1e-3)


def build_integrator(cfg: dict, trap: TrapParameters, order: int | None = None) -> IntegratorConfig:
    i = cfg["integrator"]
    try:
        scheme = Scheme(i["scheme"])
    except ValueError:
        raise ConfigError(f"integrator.scheme must be one of {[s.value for s in Scheme]}") from None
    kw = {"scheme": scheme, "order": int(order if order is not None else i["order"]),
          "sample_stride": int(i["sample_stride"])}
    if i.get("dt_ns") is not None:
        kw["dt"] = float(i["dt_ns"]) * 1e-9
        return IntegratorConfig(**kw)
    return IntegratorConfig.default_for(trap, **kw)


def build_thresholds(cfg: dict) -> ClassifierThresholds:
    c = cfg["classifier"]
    try:
        return ClassifierThresholds(float(c["displaced_fraction"]), float(c["ambiguity_margin"]),
                                    float(c["edge_exclusion"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_plan(cfg: dict) -> SweepPlan:
    s = cfg["sweep"]
    trap = build_trap(cfg)
    taus = tuple(float(t) * 1e-6 for t in s["tau_us"])
    if not taus:
        raise ConfigError("sweep.tau_us must list at least one value")
    return SweepPlan(
        tau_values=taus,
        trajectories_per_point=int(s["trajectories_per_point"]),
        master_seed=int(s["master_seed"]),
        n_ions=int(cfg["n_ions"]),
        trap=trap,
        ramp=build_ramp(cfg, tau_us=taus[0] * 1e6),
        cooling=build_cooling(cfg),
        integrator=build_integrator(cfg, trap, order=s.get("order")),
        anisotropy_values=tuple(float(a) for a in s["anisotropies"]),
        thresholds=build_thresholds(cfg),
        workers=max(1, int(cfg["workers"])),
    )


def n_ions(cfg: dict) -> int:
    n = _num(cfg, "n_ions", int)
    if n < 2:
        raise ConfigError("n_ions must be at least 2")
    return n


def jsonable(cfg: dict) -> dict:
    """Copy with non-finite floats replaced by strings, for manifests."""
    def fix(v):
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v
    return fix(cfg)
