"""Radial distribution network: wire data, per-unit conversion, topology."""

from __future__ import annotations

import csv
import math
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class WireSpec:
    name: str
    resistance_per_km: float  # ohm/km
    reactance_per_km: float  # ohm/km
    ampacity: float  # A, 75 C rating
    parallel_count: int = 1

    def __post_init__(self):
        if self.resistance_per_km <= 0:
            raise NetworkError(f"wire {self.name}: resistance must be positive")
        if self.ampacity <= 0:
            raise NetworkError(f"wire {self.name}: ampacity must be positive")
        if self.parallel_count < 1:
            raise NetworkError(f"wire {self.name}: parallel_count must be >= 1")

    @property
    def effective_resistance(self) -> float:
        return self.resistance_per_km / self.parallel_count

    @property
    def effective_reactance(self) -> float:
        return self.reactance_per_km / self.parallel_count

    @property
    def effective_ampacity(self) -> float:
        return self.ampacity * self.parallel_count


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    wire: WireSpec
    length: float  # m
    r_pu: float
    i_max_pu: float
    x_pu: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r_pu <= 0 or self.i_max_pu <= 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: r_pu and i_max_pu must be positive")


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool = False
    devices: tuple[str, ...] = ()


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    s_base: float  # MVA
    v_base: float  # V, line-to-line for three-phase bases
    three_phase: bool = True
    parent: dict[int, int] = field(default_factory=dict)  # bus -> incoming branch index
    children: dict[int, tuple[int, ...]] = field(default_factory=dict)  # bus -> outgoing branch indices
    order: tuple[int, ...] = ()  # branch indices, parents before children

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_br(self) -> int:
        return len(self.branches)

    @property
    def z_base(self) -> float:
        return self.v_base**2 / (self.s_base * 1e6)

    @property
    def i_base(self) -> float:
        return current_base(self.s_base, self.v_base, self.three_phase)

    @property
    def r(self) -> list[float]:
        return [b.r_pu for b in self.branches]

    @property
    def i_max(self) -> list[float]:
        return [b.i_max_pu for b in self.branches]

    def branch_to(self, bus: int) -> int:
        return self.parent[bus]

    def child_branches(self, bus: int) -> tuple[int, ...]:
        return self.children.get(bus, ())

    def slack_branches(self) -> tuple[int, ...]:
        return self.children.get(1, ())


def current_base(s_base: float, v_base: float, three_phase: bool = True) -> float:
    """Base current in A for an MVA / V base pair."""
    if three_phase:
        return s_base * 1e6 / (math.sqrt(3.0) * v_base)
    return s_base * 1e6 / v_base


_PARALLEL = re.compile(r"^(?P<base>.+?)\s*(?:[x×\*]\s*(?P<n>\d+))$")


def resolve_wire(name: str, library: dict[str, WireSpec]) -> WireSpec:
    """Look up a wire, honouring an ``AWGk x n`` parallel-conductor suffix."""
    key = name.strip()
    if key in library:
        return library[key]
    m = _PARALLEL.match(key)
    if m and m.group("base") in library:
        base = library[m.group("base")]
        n = int(m.group("n")) * base.parallel_count
        return WireSpec(key, base.resistance_per_km, base.reactance_per_km, base.ampacity, n)
    raise NetworkError(f"unknown wire name {name!r}")


def read_wire_library(path: str | Path | None = None) -> dict[str, WireSpec]:
    """Wire CSV with header ``name,r_ohm_per_km,x_ohm_per_km,ampacity_a,parallel``.

    Without a path the shipped copper 75 C table is used.
    """
    if path is None:
        text = resources.files("mgems.data").joinpath("wires.csv").read_text()
    else:
        text = Path(path).read_text()
    lib = {}
    for row in csv.DictReader(text.splitlines()):
        w = WireSpec(
            row["name"].strip(),
            float(row["r_ohm_per_km"]),
            float(row["x_ohm_per_km"]),
            float(row["ampacity_a"]),
            int(row.get("parallel") or 1),
        )
        lib[w.name] = w
    return lib


def read_branch_table(path: str | Path) -> list[tuple[int, int, str, float]]:
    """Branch CSV with header ``from,to,wire,length_m``."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["from"]), int(row["to"]), row["wire"].strip(), float(row["length_m"])))
    return rows


def write_branch_table(rows: Iterable[tuple[int, int, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "wire", "length_m"])
        for f, t, name, length in rows:
            w.writerow([f, t, name, length])


def radial_topology(n_bus: int, ends: Sequence[tuple[int, int]]):
    """Parent map, children map and a depth-first-safe branch order.

    ``ends`` holds (from, to) pairs; bus 1 is the root. Raises on cycles,
    unreachable buses, or branches oriented away from the root.
    """
    parent: dict[int, int] = {}
    children: dict[int, list[int]] = {b: [] for b in range(1, n_bus + 1)}
    for e, (f, t) in enumerate(ends):
        if t in parent:
            raise NetworkError(f"bus {t} fed by two branches (cycle or duplicate)")
        if t == 1:
            raise NetworkError("slack bus 1 cannot be a branch receiving end")
        parent[t] = e
        children[f].append(e)

    order = []
    seen = {1}
    queue = deque([1])
    while queue:
        bus = queue.popleft()
        for e in children[bus]:
            t = ends[e][1]
            if t in seen:
                raise NetworkError(f"cycle detected at bus {t}")
            seen.add(t)
            order.append(e)
            queue.append(t)
    missing = set(range(1, n_bus + 1)) - seen
    if missing:
        raise NetworkError(f"unreachable buses: {sorted(missing)}")
    return parent, {b: tuple(c) for b, c in children.items()}, tuple(order)


def load_network(
    branch_table: Sequence[tuple[int, int, str, float]],
    wire_library: dict[str, WireSpec] | Sequence[WireSpec] | None = None,
    bases: tuple[float, float] = (1.0, 480.0),
    three_phase: bool = True,
    devices: dict[int, Sequence[str]] | None = None,
) -> NetworkModel:
    s_base, v_base = bases
    if s_base <= 0 or v_base <= 0:
        raise NetworkError("bases must be positive")
    if wire_library is None:
        wire_library = read_wire_library()
    elif not isinstance(wire_library, dict):
        wire_library = {w.name: w for w in wire_library}

    z_base = v_base**2 / (s_base * 1e6)
    i_base = current_base(s_base, v_base, three_phase)
    seen_pairs = set()
    branches = []
    for f, t, wname, length in branch_table:
        pair = (min(f, t), max(f, t))
        if pair in seen_pairs:
            raise NetworkError(f"duplicate branch {f}-{t}")
        seen_pairs.add(pair)
        wire = resolve_wire(wname, wire_library)
        km = length / 1000.0
        branches.append(
            Branch(
                int(f), int(t), wire, float(length),
                r_pu=wire.effective_resistance * km / z_base,
                i_max_pu=wire.effective_ampacity / i_base,
                x_pu=wire.effective_reactance * km / z_base,
            )
        )

    ids = {b.from_bus for b in branches} | {b.to_bus for b in branches}
    n_bus = max(ids) if ids else 1
    if ids != set(range(1, n_bus + 1)):
        raise NetworkError("bus ids must be contiguous from 1")
    if n_bus != len(branches) + 1:
        raise NetworkError(f"not a tree: {n_bus} buses, {len(branches)} branches")
    parent, children, order = radial_topology(n_bus, [(b.from_bus, b.to_bus) for b in branches])
    devices = devices or {}
    buses = tuple(Bus(i, i == 1, tuple(devices.get(i, ()))) for i in range(1, n_bus + 1))
    return NetworkModel(buses, tuple(branches), s_base, v_base, three_phase, parent, children, order)


def per_unit_injection(power_kw: float, s_base: float, load: bool = False) -> float:
    """kW to per-unit injection; loads come back negative."""
    value = power_kw / (s_base * 1000.0)
    return -value if load else value
