"""MATPOWER-subset case parsing and the DC measurement model.

Only the ``baseMVA``, ``bus``, ``gen`` and ``branch`` tables are read; any other
``mpc.*`` assignment (``gencost``, ``bus_name`` cell arrays, version strings) is
skipped.  Loads are converted to per-unit on ``base_mva`` when the measurement
model and power flow consume them.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Sequence

import numpy as np

__all__ = [
    "BusType",
    "Bus",
    "Branch",
    "Generator",
    "GridCase",
    "MeasurementModel",
    "CaseSyntaxError",
    "CaseValidationError",
    "parse_case",
    "render_case",
    "load_case",
    "bundled_case57",
    "build_dc_model",
]


class CaseSyntaxError(ValueError):
    """Malformed case text.  Carries 1-based ``line`` and ``column``."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseValidationError(ValueError):
    """Well-formed text describing an invalid network."""


class BusType(Enum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    load_mw: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance_pu: float
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    pmax_mw: float


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        _validate(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.bus_type is BusType.SLACK)

    @property
    def active_branches(self) -> list[Branch]:
        return [br for br in self.branches if br.in_service]

    def bus_position(self) -> dict[int, int]:
        """Map bus id to its row in the bus table."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def nominal_loads_pu(self) -> np.ndarray:
        return np.array([b.load_mw for b in self.buses]) / self.base_mva

    def summary(self) -> str:
        return (
            f"{self.n_buses} buses, {len(self.active_branches)} branches, "
            f"{len(self.generators)} generators"
        )


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Linear map from non-slack bus angles to from-side branch flows.

    ``h`` is m x (n-1), in per-unit flow per radian; ``w_diag`` holds the
    measurement noise variances (the diagonal of W).
    """

    h: np.ndarray
    w_diag: np.ndarray
    meter_index: tuple[Branch, ...]
    state_index: tuple[int, ...]
    slack_bus: int
    noise_sigma: float

    def __post_init__(self):
        for arr in (self.h, self.w_diag):
            arr.setflags(write=False)
        if self.h.shape != (len(self.meter_index), len(self.state_index)):
            raise ValueError("h shape does not match meter/state index")
        if np.any(self.w_diag <= 0):
            raise ValueError("noise variances must be positive")

    @property
    def m(self) -> int:
        return self.h.shape[0]

    @property
    def n_states(self) -> int:
        return self.h.shape[1]

    def state_position(self, bus_id: int) -> int:
        try:
            return self.state_index.index(bus_id)
        except ValueError:
            if bus_id == self.slack_bus:
                raise ValueError(f"bus {bus_id} is the slack bus and has no state") from None
            raise ValueError(f"unknown bus {bus_id}") from None


def _validate(case: GridCase) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError("baseMVA must be positive")
    seen: set[int] = set()
    for b in case.buses:
        if b.id in seen:
            raise CaseValidationError(f"duplicate bus id {b.id}")
        if b.id < 1:
            raise CaseValidationError(f"bus id {b.id} is not positive")
        if not np.isfinite(b.load_mw):
            raise CaseValidationError(f"bus {b.id} has a non-finite load")
        seen.add(b.id)
    n_slack = sum(b.bus_type is BusType.SLACK for b in case.buses)
    if n_slack == 0:
        raise CaseValidationError("no slack bus")
    if n_slack > 1:
        raise CaseValidationError("multiple slack buses")
    for k, br in enumerate(case.branches, start=1):
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseValidationError(f"branch {k} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k} is a self-loop on bus {br.from_bus}")
        if not br.reactance_pu > 0:
            raise CaseValidationError(f"branch {k} has non-positive reactance {br.reactance_pu}")
    for g in case.generators:
        if g.bus not in seen:
            raise CaseValidationError(f"generator references unknown bus {g.bus}")
        if g.pmax_mw < 0:
            raise CaseValidationError(f"generator at bus {g.bus} has negative Pmax")

    adj: dict[int, list[int]] = {b: [] for b in seen}
    for br in case.branches:
        if br.in_service:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    start = case.buses[0].id
    reached = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in reached:
                reached.add(nb)
                queue.append(nb)
    if len(reached) != len(seen):
        missing = sorted(seen - reached)
        raise CaseValidationError(f"disconnected network: buses {missing[:10]} unreachable")


# --- parsing -----------------------------------------------------------------

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?(?:Inf|inf|NaN|nan)")
_TABLES = ("bus", "gen", "branch")


def _strip_comment(line: str) -> str:
    # '%' inside a quoted string is kept; MATPOWER case names never need it, but versions do use quotes
    out = []
    quoted = False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _scan_tables(text: str) -> tuple[float | None, dict[str, list[list[float]]]]:
    base_mva = None
    tables: dict[str, list[list[float]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i])
        stripped = raw.strip()
        i += 1
        if not stripped or stripped.startswith("function"):
            continue
        m = _ASSIGN.match(stripped)
        if not m:
            col = len(raw) - len(raw.lstrip()) + 1
            raise CaseSyntaxError(f"unexpected statement {stripped[:30]!r}", lineno, col)
        name = m.group(1)
        rhs = stripped[m.end():]
        rhs_col = raw.index(rhs) + 1 if rhs else len(raw) + 1
        if rhs.startswith("["):
            rows, i = _read_matrix(lines, i, rhs[1:], lineno, rhs_col + 1, close="]")
            if name in _TABLES or name == "baseMVA":
                tables[name] = rows
        elif rhs.startswith("{"):
            _, i = _read_matrix(lines, i, rhs[1:], lineno, rhs_col + 1, close="}", numeric=False)
        elif rhs.startswith("'"):
            if not rhs.rstrip().endswith(";"):
                raise CaseSyntaxError("missing ';'", lineno, len(raw.rstrip()) + 1)
        else:
            body = rhs.rstrip()
            if not body.endswith(";"):
                raise CaseSyntaxError("missing ';'", lineno, len(raw.rstrip()) + 1)
            value = body[:-1].strip()
            if not _NUMBER.fullmatch(value):
                raise CaseSyntaxError(f"expected a number, got {value!r}", lineno, rhs_col)
            if name == "baseMVA":
                base_mva = float(value)
    return base_mva, tables


def _read_matrix(lines, i, rest, lineno, col, close, numeric=True):
    rows: list[list[float]] = []
    current: list[float] = []
    line_text, line_no, offset = rest, lineno, col - 1
    while True:
        pos = 0
        text = line_text
        while pos < len(text):
            ch = text[pos]
            if ch in " \t,":
                pos += 1
                continue
            if ch == ";":
                if current:
                    rows.append(current)
                    current = []
                pos += 1
                continue
            if ch == close:
                tail = text[pos + 1:].strip()
                if tail not in (";", ""):
                    raise CaseSyntaxError(f"unexpected {tail!r} after '{close}'", line_no, offset + pos + 2)
                if current:
                    rows.append(current)
                return rows, i
            if not numeric:
                pos += 1
                continue
            m = _NUMBER.match(text, pos)
            if not m:
                raise CaseSyntaxError(f"invalid token {text[pos:pos + 12]!r}", line_no, offset + pos + 1)
            current.append(float(m.group()))
            pos = m.end()
        if current:
            rows.append(current)
            current = []
        if i >= len(lines):
            raise CaseSyntaxError(f"unterminated matrix (missing '{close}')", lineno, col)
        line_no = i + 1
        line_text = _strip_comment(lines[i])
        offset = 0
        i += 1


def _table(tables, name, min_cols):
    if name not in tables:
        raise CaseValidationError(f"missing mpc.{name} table")
    rows = tables[name]
    for k, row in enumerate(rows, start=1):
        if len(row) < min_cols:
            raise CaseValidationError(f"mpc.{name} row {k} has {len(row)} columns, need {min_cols}")
    return rows


def parse_case(text: str) -> GridCase:
    """Parse MATPOWER case text into a validated :class:`GridCase`."""
    base_mva, tables = _scan_tables(text)
    if base_mva is None:
        raise CaseValidationError("missing mpc.baseMVA")

    buses = []
    for row in _table(tables, "bus", 3):
        bus_id = row[0]
        if bus_id != int(bus_id):
            raise CaseValidationError(f"bus id {bus_id} is not an integer")
        code = int(row[1])
        if code == 4:
            raise CaseValidationError(f"bus {int(bus_id)} is isolated (type 4), which is unsupported")
        try:
            kind = BusType(code)
        except ValueError:
            raise CaseValidationError(f"bus {int(bus_id)} has unknown type code {row[1]}") from None
        base_kv = row[9] if len(row) > 9 else 0.0
        buses.append(Bus(int(bus_id), kind, float(row[2]), float(base_kv)))

    branches = []
    for row in _table(tables, "branch", 4):
        status = row[10] if len(row) > 10 else 1.0
        branches.append(Branch(int(row[0]), int(row[1]), float(row[3]), status > 0))

    generators = []
    for row in _table(tables, "gen", 1) if "gen" in tables else []:
        status = row[7] if len(row) > 7 else 1.0
        if status <= 0:
            continue
        pmax = row[8] if len(row) > 8 else 0.0
        generators.append(Generator(int(row[0]), float(pmax)))

    return GridCase(base_mva, buses, branches, generators)


def render_case(case: GridCase, name: str = "case") -> str:
    """Canonical MATPOWER text holding exactly the fields a GridCase keeps."""

    def num(v: float) -> str:
        return repr(int(v)) if float(v).is_integer() else repr(float(v))

    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {num(case.base_mva)};", ""]
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for b in case.buses:
        vals = [b.id, b.bus_type.value, b.load_mw, 0, 0, 0, 1, 1, 0, b.base_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(num(v) for v in vals) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for g in case.generators:
        vals = [g.bus, 0, 0, 0, 0, 1, case.base_mva, 1, g.pmax_mw, 0]
        out.append("\t" + "\t".join(num(v) for v in vals) + ";")
    out += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
    for br in case.branches:
        vals = [br.from_bus, br.to_bus, 0, br.reactance_pu, 0, 0, 0, 0, 0, 0, int(br.in_service)]
        out.append("\t" + "\t".join(num(v) for v in vals) + ";")
    out += ["];", ""]
    return "\n".join(out)


def load_case(path) -> GridCase:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def bundled_case57() -> GridCase:
    """The IEEE 57-bus test case shipped with the package."""
    text = resources.files("fdia_imaging.data").joinpath("case57.m").read_text(encoding="utf-8")
    return parse_case(text)


# --- measurement model -------------------------------------------------------

def incidence_reduced(case: GridCase, branches: Sequence[Branch] | None = None) -> tuple[np.ndarray, list[int]]:
    """Branch-bus incidence (+1 from, -1 to) with the slack column removed."""
    branches = case.active_branches if branches is None else list(branches)
    slack = case.slack_bus
    state_ids = [b for b in case.bus_ids if b != slack]
    col = {b: j for j, b in enumerate(state_ids)}
    a = np.zeros((len(branches), len(state_ids)))
    for i, br in enumerate(branches):
        if br.from_bus in col:
            a[i, col[br.from_bus]] = 1.0
        if br.to_bus in col:
            a[i, col[br.to_bus]] = -1.0
    return a, state_ids


def build_dc_model(case: GridCase, noise_sigma: float) -> MeasurementModel:
    """One from-side active flow meter per in-service branch, homoscedastic noise."""
    if not noise_sigma > 0:
        raise ValueError("noise_sigma must be positive")
    meters = case.active_branches
    a, state_ids = incidence_reduced(case, meters)
    x = np.array([br.reactance_pu for br in meters])
    h = a / x[:, None]
    w = np.full(len(meters), noise_sigma ** 2)
    return MeasurementModel(h, w, tuple(meters), tuple(state_ids), case.slack_bus, float(noise_sigma))
