"""Scenario configuration, built-in 10/18/33-bus cases and daily profiles."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .assembler import BatteryParams, TariffSchedule
from .forecast import DemandResponseParams, bell
from .netmodel import NetworkError, NetworkModel, load_network, read_wire_library

log = logging.getLogger(__name__)

LOAD_KINDS = ("residential", "business")
PROFILE_KINDS = ("clear", "cloudy", "residential", "business")


class ConfigError(ValueError):
    """Invalid scenario; the message starts with the offending field path."""


# --- built-in branch tables: (from, to, wire, length_m) ------------------------

BRANCHES_10 = [
    (1, 3, "AWG2/0x2", 80), (3, 6, "AWG8", 80), (3, 10, "AWG4/0", 80), (10, 2, "AWG10", 80),
    (3, 4, "AWG1/0x2", 80), (4, 5, "AWG6", 80), (4, 7, "AWG2/0", 80), (7, 9, "AWG10", 80),
    (7, 8, "AWG6", 80),
]

BRANCHES_18 = [
    (1, 2, "AWG750", 80), (2, 3, "AWG750", 80), (3, 4, "AWG600", 80), (4, 5, "AWG350", 80),
    (5, 6, "AWG350", 80), (6, 7, "AWG1/0", 120), (7, 8, "AWG1/0", 120), (8, 9, "AWG1/0", 120),
    (9, 10, "AWG1/0", 80), (3, 11, "AWG6", 30), (4, 12, "AWG1/0", 30), (12, 13, "AWG1/0", 30),
    (13, 14, "AWG1/0", 30), (14, 15, "AWG250", 30), (6, 16, "AWG250", 30), (9, 17, "AWG2/0", 30),
    (10, 18, "AWG1/0", 30),
]


def _branches_33():
    rows = [(1, 2, "AWG600x3", 80), (2, 3, "AWG350x3", 80)]
    rows += [(i, i + 1, "AWG250x3", 80) for i in (3, 4, 5)]
    rows += [(i, i + 1, "AWG2/0x2", 80) for i in (6, 7, 8, 9)]
    rows += [(10, 11, "AWG1/0x2", 30), (11, 12, "AWG2x2", 30), (12, 13, "AWG2x2", 30),
             (13, 14, "AWG4x2", 30), (14, 15, "AWG2", 30)]
    rows += [(i, i + 1, "AWG3", 30) for i in (15, 16, 17)]
    rows += [(2, 19, "AWG1/0x2", 30)] + [(i, i + 1, "AWG1/0x2", 30) for i in (19, 20, 21)]
    rows += [(3, 23, "AWG1/0x2", 30)] + [(i, i + 1, "AWG1/0x2", 30) for i in (23, 24)]
    rows += [(6, 26, "AWG1/0x2", 30)] + [(i, i + 1, "AWG1/0x2", 30) for i in (26, 27, 28, 29)]
    rows += [(i, i + 1, "AWG2/0x2", 30) for i in (30, 31, 32)]
    return rows


BRANCHES_33 = _branches_33()


# --- configuration types ---------------------------------------------------------

@dataclass(frozen=True)
class LoadGroup:
    bus: int
    kind: str
    rated_kw: float
    power_factor: float = 0.9  # stored for an AC extension, unused by the active-power plant


@dataclass(frozen=True)
class SourceSpec:
    bus: int
    rated_kw: float
    power_factor: float = 1.0


@dataclass(frozen=True)
class Horizon:
    dt_p: float = 1.0  # prediction step, h
    dt_d: float = 1.0  # decision step, h
    n_pre: int = 24
    k_d: int = 24  # prediction steps per day

    @property
    def substeps(self) -> int:
        return int(round(self.dt_p / self.dt_d))

    @property
    def n_decisions(self) -> int:
        return self.k_d * self.substeps


@dataclass(frozen=True)
class SecuritySettings:
    v_limits: tuple[float, float] = (0.9, 1.1)
    decision_v_limits: tuple[float, float] = (0.9, 1.1)
    current_margin: float = 1.0  # decision model uses current_margin * I_max


@dataclass(frozen=True)
class ForecastSettings:
    lag: int = 3
    history_days: int = 7
    solar_day: str = "cloudy"
    use_dictionary: bool = True
    anchor: str = "rollout"  # dictionary anchor source: "rollout" or "measurement"
    hyper: dict = field(default_factory=dict)  # kind -> (sigma, lambda); missing kinds are MSMS-tuned
    profile_csv: dict = field(default_factory=dict)  # kind -> path of realized-day CSV


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    branches: tuple[tuple[int, int, str, float], ...]
    batteries: tuple[BatteryParams, ...] = ()
    pv: tuple[SourceSpec, ...] = ()
    diesel: tuple[SourceSpec, ...] = ()
    loads: tuple[LoadGroup, ...] = ()
    tariffs: TariffSchedule = field(default_factory=TariffSchedule)
    dr: DemandResponseParams = field(default_factory=DemandResponseParams)
    horizon: Horizon = field(default_factory=Horizon)
    security: SecuritySettings = field(default_factory=SecuritySettings)
    forecast: ForecastSettings = field(default_factory=ForecastSettings)
    bases: tuple[float, float] = (1.0, 480.0)
    three_phase: bool = True
    grid_limit: float = 10.0  # pu bound on purchase/sale
    rng_seed: int = 7
    builtin: str | None = None

    def network(self) -> NetworkModel:
        devices: dict[int, list[str]] = {}
        for i, b in enumerate(self.batteries):
            devices.setdefault(b.bus, []).append(f"battery{i}")
        for i, s in enumerate(self.pv):
            devices.setdefault(s.bus, []).append(f"pv{i}")
        for i, s in enumerate(self.diesel):
            devices.setdefault(s.bus, []).append(f"diesel{i}")
        for i, ld in enumerate(self.loads):
            devices.setdefault(ld.bus, []).append(f"{ld.kind}{i}")
        return load_network(self.branches, read_wire_library(), self.bases, self.three_phase, devices)

    def loads_of(self, kind: str) -> list[LoadGroup]:
        return [ld for ld in self.loads if ld.kind == kind]

    @property
    def load_kinds(self) -> list[str]:
        return [k for k in LOAD_KINDS if any(ld.kind == k for ld in self.loads)]

    def with_changes(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def without_dr(self) -> "ScenarioConfig":
        return dataclasses.replace(self, dr=dataclasses.replace(self.dr, enabled=False))


# --- built-in cases --------------------------------------------------------------

def _residential(buses, rng) -> list[LoadGroup]:
    return [LoadGroup(b, "residential", float(10.0 + 20.0 * rng.uniform())) for b in buses]


def builtin_case(name: str, seed: int = 7, **overrides) -> tuple[NetworkModel, ScenarioConfig]:
    rng = np.random.default_rng(seed)
    if name == "10bus":
        loads = [LoadGroup(2, "residential", 12.75), LoadGroup(6, "residential", 30.0),
                 LoadGroup(8, "residential", 40.0), LoadGroup(9, "residential", 12.75),
                 LoadGroup(5, "business", 42.5), LoadGroup(7, "business", 61.2)]
        cfg = ScenarioConfig(
            name, tuple(BRANCHES_10),
            batteries=(BatteryParams(0.15, 7), BatteryParams(0.15, 10)),
            pv=(SourceSpec(4, 250.0),),
            loads=tuple(loads),
            dr=DemandResponseParams(k_adj=0.003),
        )
    elif name == "18bus":
        res_buses = [11, 15, 16, 18]  # residential load points of the CIGRE LV feeder
        loads = _residential(res_buses, rng) + [LoadGroup(2, "business", 60.0), LoadGroup(17, "business", 100.0)]
        cfg = ScenarioConfig(
            name, tuple(BRANCHES_18),
            batteries=(BatteryParams(0.15, 10), BatteryParams(0.15, 15), BatteryParams(0.15, 16)),
            pv=(SourceSpec(15, 200.0), SourceSpec(16, 300.0)),
            diesel=(SourceSpec(10, 20.0, 0.85),),
            loads=tuple(sorted(loads, key=lambda g: g.bus)),
            dr=DemandResponseParams(k_adj=0.002),
        )
    elif name == "33bus":
        bus_kw = {18: 80.0, 22: 60.0, 25: 60.0, 33: 80.0}
        res_buses = [b for b in range(2, 34) if b not in bus_kw]
        loads = _residential(res_buses, rng) + [LoadGroup(b, "business", kw) for b, kw in bus_kw.items()]
        cfg = ScenarioConfig(
            name, tuple(BRANCHES_33),
            batteries=(BatteryParams(0.2, 10), BatteryParams(0.3, 14),
                       BatteryParams(0.3, 30), BatteryParams(0.3, 24)),
            pv=(SourceSpec(7, 400.0),),
            diesel=(SourceSpec(33, 40.0, 0.85), SourceSpec(18, 80.0, 0.85)),
            loads=tuple(sorted(loads, key=lambda g: g.bus)),
            dr=DemandResponseParams(k_adj=0.001),
        )
    else:
        raise ConfigError(f"builtin: unknown case {name!r} (expected 10bus, 18bus or 33bus)")
    cfg = dataclasses.replace(cfg, rng_seed=seed, builtin=name, **overrides)
    validate(cfg)
    return cfg.network(), cfg


# --- parsing and serialization ------------------------------------------------------

def _tuple2(x):
    return (float(x[0]), float(x[1]))


def to_dict(cfg: ScenarioConfig) -> dict:
    """Plain JSON types only (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def serialize(cfg: ScenarioConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def _build(cls, data: dict, path: str, conv: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    kw = {}
    for k, v in data.items():
        if conv and k in conv:
            try:
                v = conv[k](v)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"{path}.{k}: {exc}") from exc
        kw[k] = v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("$: expected an object")
    data = copy.deepcopy(data)
    base = None
    if data.get("builtin"):
        seed = int(data.get("rng_seed", 7))
        _, base = builtin_case(data["builtin"], seed)
        merged = to_dict(base)
        for k, v in data.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k].update(v)
            else:
                merged[k] = v
        data = merged
    if "name" not in data or "branches" not in data:
        raise ConfigError("$: need 'name' and 'branches' (or a 'builtin' case)")

    def items(key, cls, conv=None):
        raw = data.get(key, [])
        if not isinstance(raw, list):
            raise ConfigError(f"$.{key}: expected a list")
        return tuple(_build(cls, r, f"$.{key}[{i}]", conv) for i, r in enumerate(raw))

    try:
        branches = tuple((int(r[0]), int(r[1]), str(r[2]), float(r[3])) for r in data["branches"])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"$.branches: rows must be [from, to, wire, length_m] ({exc})") from exc
    tariffs = _build(TariffSchedule, data.get("tariffs", {}), "$.tariffs",
                     {"periods": lambda ps: tuple((float(a), float(b), str(n)) for a, b, n in ps)})
    cfg = ScenarioConfig(
        name=str(data["name"]),
        branches=branches,
        batteries=items("batteries", BatteryParams),
        pv=items("pv", SourceSpec),
        diesel=items("diesel", SourceSpec),
        loads=items("loads", LoadGroup),
        tariffs=tariffs,
        dr=_build(DemandResponseParams, data.get("dr", {}), "$.dr"),
        horizon=_build(Horizon, data.get("horizon", {}), "$.horizon"),
        security=_build(SecuritySettings, data.get("security", {}), "$.security",
                        {"v_limits": _tuple2, "decision_v_limits": _tuple2}),
        forecast=_build(ForecastSettings, data.get("forecast", {}), "$.forecast",
                        {"hyper": lambda h: {k: _tuple2(v) for k, v in h.items()}}),
        bases=_tuple2(data.get("bases", (1.0, 480.0))),
        three_phase=bool(data.get("three_phase", True)),
        grid_limit=float(data.get("grid_limit", 10.0)),
        rng_seed=int(data.get("rng_seed", 7)),
        builtin=data.get("builtin"),
    )
    extra = set(data) - {f.name for f in dataclasses.fields(ScenarioConfig)}
    if extra:
        raise ConfigError(f"$.{sorted(extra)[0]}: unknown field")
    validate(cfg)
    return cfg


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"$: not valid JSON ({exc})") from exc
    return from_dict(data)


def validate(cfg: ScenarioConfig) -> None:
    try:
        net = cfg.network()
    except NetworkError as exc:
        raise ConfigError(f"$.branches: {exc}") from exc
    buses = set(range(2, net.n_bus + 1))
    for key, devs in (("batteries", cfg.batteries), ("pv", cfg.pv), ("diesel", cfg.diesel), ("loads", cfg.loads)):
        for i, d in enumerate(devs):
            if d.bus not in buses:
                raise ConfigError(f"$.{key}[{i}].bus: bus {d.bus} does not exist (or is the slack)")
    for i, ld in enumerate(cfg.loads):
        if ld.kind not in LOAD_KINDS:
            raise ConfigError(f"$.loads[{i}].kind: must be one of {LOAD_KINDS}")
        if ld.rated_kw < 0:
            raise ConfigError(f"$.loads[{i}].rated_kw: must be >= 0")
    kinds_at = {}
    for i, ld in enumerate(cfg.loads):
        if kinds_at.setdefault(ld.bus, ld.kind) != ld.kind:
            raise ConfigError(f"$.loads[{i}].bus: bus {ld.bus} mixes load types")
    h = cfg.horizon
    if h.dt_p <= 0 or h.dt_d <= 0 or h.n_pre < 1 or h.k_d < 1:
        raise ConfigError("$.horizon: steps and counts must be positive")
    ratio = h.dt_p / h.dt_d
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("$.horizon.dt_d: must divide dt_p")
    if abs(h.k_d * h.dt_p - 24.0) > 1e-9:
        raise ConfigError("$.horizon.k_d: k_d * dt_p must span 24 h")
    lo, hi = cfg.security.v_limits
    if not 0 < lo < hi:
        raise ConfigError("$.security.v_limits: need 0 < min < max")
    if not 0 < cfg.security.current_margin <= 1:
        raise ConfigError("$.security.current_margin: must lie in (0, 1]")
    for kind in cfg.load_kinds:
        if kind not in cfg.dr.elasticity:
            raise ConfigError(f"$.dr.elasticity: missing load type {kind}")
    if cfg.forecast.anchor not in ("rollout", "measurement"):
        raise ConfigError("$.forecast.anchor: must be 'rollout' or 'measurement'")
    if cfg.forecast.solar_day not in ("clear", "cloudy"):
        raise ConfigError("$.forecast.solar_day: must be 'clear' or 'cloudy'")


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"$: cannot read {path}: {exc}") from exc
    return parse_scenario(text)


# --- profiles ----------------------------------------------------------------------

def _hours(steps_per_day: int) -> np.ndarray:
    return np.arange(steps_per_day) * (24.0 / steps_per_day)


def synth_profiles(seed: int, kind: str, steps_per_day: int = 24) -> np.ndarray:
    """One synthetic normalized daily profile; deterministic per (seed, kind)."""
    h = _hours(steps_per_day)
    rng = np.random.default_rng([int(seed), PROFILE_KINDS.index(kind) if kind in PROFILE_KINDS else 99])
    if kind == "clear":
        return bell(steps_per_day)
    if kind == "cloudy":
        shade = np.ones(steps_per_day)
        centers = np.concatenate([[rng.uniform(10.5, 13.5)], rng.uniform(8.0, 16.0, 2)])
        for c in centers:
            depth = rng.uniform(0.45, 0.8)
            width = rng.uniform(1.0, 2.2)
            shade *= 1.0 - depth * np.exp(-((h - c) ** 2) / (2 * width**2))
        return bell(steps_per_day) * shade
    if kind == "residential":
        p = (0.35 + 0.35 * np.exp(-((h - 7.5) ** 2) / (2 * 1.2**2))
             + 0.65 * np.exp(-((h - 19.5) ** 2) / (2 * 1.8**2)))
    elif kind == "business":
        p = 0.2 + 0.8 / (1 + np.exp(-(h - 8.0) / 0.6)) / (1 + np.exp((h - 18.0) / 0.6))
    else:
        raise ConfigError(f"unknown profile kind {kind!r}")
    p = p * (1.0 + 0.03 * rng.standard_normal(steps_per_day))
    p = np.clip(p, 0.0, None)
    return p / p.max()


def historical_solar(seed: int, steps_per_day: int = 24) -> np.ndarray:
    """A mostly clear past day: the clear bell scaled and lightly shaded."""
    rng = np.random.default_rng([int(seed), 11])
    h = _hours(steps_per_day)
    shade = 1.0 - rng.uniform(0.0, 0.15) * np.exp(-((h - rng.uniform(9, 15)) ** 2) / 2.0)
    return rng.uniform(0.9, 1.0) * bell(steps_per_day) * shade


@dataclass
class ProfileSet:
    """Normalized realized day and historical training days per kind ('solar', load kinds)."""

    realized: dict[str, np.ndarray]
    history: dict[str, list[np.ndarray]]
    steps_per_day: int

    def __post_init__(self):
        for kind, p in self.realized.items():
            if len(p) != self.steps_per_day:
                raise ConfigError(f"profile {kind}: length {len(p)} != {self.steps_per_day}")
            if np.min(p) < 0:
                raise ConfigError(f"profile {kind}: negative values")


def make_profile_set(cfg: ScenarioConfig, seed: int | None = None) -> ProfileSet:
    seed = cfg.rng_seed if seed is None else seed
    T = cfg.horizon.k_d
    nh = cfg.forecast.history_days
    realized = {"solar": synth_profiles(seed, cfg.forecast.solar_day, T)}
    history = {"solar": [historical_solar(seed * 1000 + d, T) for d in range(nh)]}
    for kind in LOAD_KINDS:
        realized[kind] = synth_profiles(seed, kind, T)
        history[kind] = [synth_profiles(seed * 1000 + d + 1, kind, T) for d in range(nh)]
    for kind, path in cfg.forecast.profile_csv.items():
        realized[kind] = read_profile_csv(path, T)
    return ProfileSet(realized, history, T)


def read_profile_csv(path: str | Path, steps_per_day: int) -> np.ndarray:
    """``step,value`` CSV; values above 1 are max-normalized with a warning."""
    vals = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            raise ConfigError(f"{path}: empty profile file")
        for row in rd:
            if row:
                vals.append(float(row[1]))
    return normalize_profile(np.array(vals), steps_per_day, str(path))


def normalize_profile(vals: np.ndarray, steps_per_day: int, label: str = "profile") -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if len(vals) != steps_per_day:
        raise ConfigError(f"{label}: {len(vals)} rows, expected {steps_per_day}")
    if vals.min() < 0:
        raise ConfigError(f"{label}: negative values")
    if vals.max() > 1.0:
        log.warning("%s: values exceed 1, max-normalizing", label)
        vals = vals / vals.max()
    return vals


def load_profiles(paths: dict[str, str | Sequence[str]], steps_per_day: int = 24) -> ProfileSet:
    """Realized day and historical days per kind from CSV files.

    Each entry maps a kind to a list of day files; the last file is the
    realized day and the rest form the training history.
    """
    realized, history = {}, {}
    for kind, files in paths.items():
        files = [files] if isinstance(files, (str, Path)) else list(files)
        days = [read_profile_csv(f, steps_per_day) for f in files]
        realized[kind] = days[-1]
        history[kind] = days[:-1] or [days[-1]]
    return ProfileSet(realized, history, steps_per_day)


def write_profile_csv(values, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "value"])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
