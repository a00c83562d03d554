"""Grid data model, validation, load scaling and case-file parsers.

Two input formats are understood:

* the native line-oriented ``.case`` format (see ``data/ieee14.case`` for a
  fully commented example), and
* a subset of the PSS/E v26 RAW format (bus, generator and branch data;
  transformer adjustment data is skipped).

All angles are stored in radians; degrees appear only in files.
"""

from __future__ import annotations

import enum
import math
import shlex
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np


class BusKind(enum.Enum):
    SLACK = "SLACK"
    PV = "PV"
    PQ = "PQ"


class CaseParseError(ValueError):
    """Syntax error in a case file. Carries the 1-based line (and column, if known)."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class CaseValidationError(ValueError):
    """A case violates one or more structural invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    vm: float = 1.0  # p.u.
    va: float = 0.0  # rad
    pd: float = 0.0  # MW
    qd: float = 0.0  # MVar
    gs: float = 0.0  # MW at 1.0 p.u.
    bs: float = 0.0  # MVar at 1.0 p.u.
    base_kv: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # rad
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float  # MW
    qg: float = 0.0  # MVar
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = -math.inf
    q_max: float = math.inf
    v_set: float = 1.0
    cost_a: float = 0.0  # $/MW^2h
    cost_b: float = 0.0  # $/MWh


@dataclass(frozen=True)
class NetworkCase:
    """Immutable grid description.

    Index helpers (``bus_index``, ``slack_gen`` ...) are computed lazily and
    cached; they never change because the case itself cannot change.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    generators: tuple[Generator, ...] = ()

    def __post_init__(self) -> None:
        # accept lists from callers but store tuples so the case stays hashable
        for name in ("buses", "branches", "generators"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Map bus id to its 0-based position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_bus(self) -> int:
        """Position of the (single) slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @cached_property
    def slack_gen(self) -> int:
        """Position (in ``generators``) of the generator at the slack bus."""
        slack_id = self.buses[self.slack_bus].id
        return next(k for k, g in enumerate(self.generators) if g.bus == slack_id)

    @cached_property
    def controllable(self) -> tuple[int, ...]:
        """Generator positions excluding the slack generator, in case order."""
        return tuple(k for k in range(self.n_gen) if k != self.slack_gen)

    @property
    def total_pd(self) -> float:
        return sum(b.pd for b in self.buses)

    @property
    def total_qd(self) -> float:
        return sum(b.qd for b in self.buses)

    def gen_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    def with_dispatch(self, pg: Sequence[float]) -> "NetworkCase":
        """Copy of the case with generator ``pg`` replaced (all generators)."""
        if len(pg) != self.n_gen:
            raise ValueError(f"expected {self.n_gen} setpoints, got {len(pg)}")
        gens = tuple(replace(g, pg=float(p)) for g, p in zip(self.generators, pg))
        return replace(self, generators=gens)

    def with_costs(self, costs: Sequence[tuple[float, float]]) -> "NetworkCase":
        """Copy of the case with per-generator ``(cost_a, cost_b)`` pairs applied."""
        if len(costs) != self.n_gen:
            raise ValueError(f"expected {self.n_gen} cost rows, got {len(costs)}")
        gens = tuple(
            replace(g, cost_a=float(a), cost_b=float(b)) for g, (a, b) in zip(self.generators, costs)
        )
        return replace(self, generators=gens)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(case: NetworkCase) -> list[Violation]:
    """Return every invariant the case breaks; an empty list means the case is sound."""
    out: list[Violation] = []
    if not case.base_mva > 0:
        out.append(Violation("base_mva", "must be positive"))

    seen: set[int] = set()
    for i, b in enumerate(case.buses):
        tag = f"buses[{i}](id={b.id})"
        if not isinstance(b.id, int) or isinstance(b.id, bool) or b.id <= 0:
            out.append(Violation(f"{tag}.id", "must be a positive integer"))
        if b.id in seen:
            out.append(Violation(f"{tag}.id", "duplicate bus id"))
        seen.add(b.id)
        if not isinstance(b.kind, BusKind):
            out.append(Violation(f"{tag}.kind", "must be SLACK, PV or PQ"))
        if not (b.vm > 0 and math.isfinite(b.vm)):
            out.append(Violation(f"{tag}.vm", "must be positive and finite"))
        for name in ("va", "pd", "qd", "gs", "bs", "base_kv"):
            if not math.isfinite(getattr(b, name)):
                out.append(Violation(f"{tag}.{name}", "must be finite"))

    n_slack = sum(1 for b in case.buses if b.kind is BusKind.SLACK)
    if n_slack != 1:
        out.append(Violation("buses", f"exactly one SLACK bus required, found {n_slack}"))

    for i, br in enumerate(case.branches):
        tag = f"branches[{i}]({br.from_bus}-{br.to_bus})"
        for end in ("from_bus", "to_bus"):
            if getattr(br, end) not in seen:
                out.append(Violation(f"{tag}.{end}", f"dangling reference to bus {getattr(br, end)}"))
        if br.from_bus == br.to_bus:
            out.append(Violation(tag, "from_bus equals to_bus"))
        if br.r == 0 and br.x == 0:
            out.append(Violation(f"{tag}.r/x", "zero series impedance"))
        if not br.tap > 0:
            out.append(Violation(f"{tag}.tap", "must be positive"))
        for name in ("r", "x", "b_charging", "tap", "shift"):
            if not math.isfinite(getattr(br, name)):
                out.append(Violation(f"{tag}.{name}", "must be finite"))

    gens_at: dict[int, int] = {}
    for k, g in enumerate(case.generators):
        tag = f"generators[{k}](bus={g.bus})"
        if g.bus not in seen:
            out.append(Violation(f"{tag}.bus", f"dangling reference to bus {g.bus}"))
        gens_at[g.bus] = gens_at.get(g.bus, 0) + 1
        if not g.p_min <= g.p_max:
            out.append(Violation(f"{tag}.p_min", "p_min exceeds p_max"))
        if not g.p_min <= g.pg <= g.p_max:
            out.append(Violation(f"{tag}.pg", f"pg={g.pg} outside [{g.p_min}, {g.p_max}]"))
        if not g.q_min <= g.q_max:
            out.append(Violation(f"{tag}.q_min", "q_min exceeds q_max"))
        if not (g.v_set > 0 and math.isfinite(g.v_set)):
            out.append(Violation(f"{tag}.v_set", "must be positive and finite"))
        for name in ("pg", "qg", "cost_a", "cost_b"):
            if not math.isfinite(getattr(g, name)):
                out.append(Violation(f"{tag}.{name}", "must be finite"))

    for b in case.buses:
        if b.kind is BusKind.SLACK and gens_at.get(b.id, 0) != 1:
            out.append(Violation(f"bus {b.id}", "slack bus must host exactly one generator"))
        elif b.kind is BusKind.PV and gens_at.get(b.id, 0) == 0:
            out.append(Violation(f"bus {b.id}", "PV bus hosts no generator"))
    return out


def check(case: NetworkCase) -> NetworkCase:
    """Raise :class:`CaseValidationError` unless ``case`` validates; return it otherwise."""
    violations = validate(case)
    if violations:
        raise CaseValidationError(violations)
    return case


def scale_load(case: NetworkCase, factor: float) -> NetworkCase:
    """Multiply every bus ``pd`` and ``qd`` by ``factor``."""
    if not factor > 0:
        raise ValueError(f"load factor must be positive, got {factor}")
    buses = tuple(replace(b, pd=b.pd * factor, qd=b.qd * factor) for b in case.buses)
    return replace(case, buses=buses)


# ---------------------------------------------------------------------------
# native format
# ---------------------------------------------------------------------------

_BUS_COLS = ("id", "kind", "vm", "va_deg", "pd", "qd", "gs", "bs", "base_kv")
_BRANCH_COLS = ("from", "to", "r", "x", "b", "tap", "shift_deg", "status")
_GEN_COLS = ("bus", "pg", "qg", "p_min", "p_max", "q_min", "q_max", "v_set", "cost_a", "cost_b")


def _num(token: str, lineno: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseParseError(f"malformed number {token!r}", lineno, column) from None


def _int(token: str, lineno: int, column: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise CaseParseError(f"malformed integer {token!r}", lineno, column) from None


def parse_native_case(text: str) -> NetworkCase:
    """Parse the native whitespace-delimited case format and validate the result."""
    base_mva: float | None = None
    section: str | None = None
    buses: list[Bus] = []
    branches: list[Branch] = []
    gens: list[Generator] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].upper()
        if head == "BASEMVA":
            if len(tokens) != 2:
                raise CaseParseError("BASEMVA takes exactly one value", lineno)
            base_mva = _num(tokens[1], lineno, 2)
            section = None
            continue
        if head in ("BUS", "BRANCH", "GEN") and len(tokens) == 1:
            section = head
            continue
        if section is None:
            raise CaseParseError(f"data line outside a section: {tokens[0]!r}", lineno)

        if section == "BUS":
            if len(tokens) != len(_BUS_COLS):
                raise CaseParseError(f"BUS row needs {len(_BUS_COLS)} columns, got {len(tokens)}", lineno)
            try:
                kind = BusKind(tokens[1].upper())
            except ValueError:
                raise CaseParseError(f"unknown bus kind {tokens[1]!r}", lineno, 2) from None
            v = [_num(t, lineno, c) for c, t in enumerate(tokens[2:], start=3)]
            buses.append(Bus(_int(tokens[0], lineno, 1), kind, v[0], math.radians(v[1]), *v[2:]))
        elif section == "BRANCH":
            if len(tokens) != len(_BRANCH_COLS):
                raise CaseParseError(
                    f"BRANCH row needs {len(_BRANCH_COLS)} columns, got {len(tokens)}", lineno
                )
            f, t = _int(tokens[0], lineno, 1), _int(tokens[1], lineno, 2)
            r, x, b, tap, shift = (_num(tok, lineno, c) for c, tok in enumerate(tokens[2:7], start=3))
            status = _int(tokens[7], lineno, 8)
            if status not in (0, 1):
                raise CaseParseError(f"status must be 0 or 1, got {status}", lineno, 8)
            branches.append(Branch(f, t, r, x, b, tap, math.radians(shift), bool(status)))
        else:
            if len(tokens) != len(_GEN_COLS):
                raise CaseParseError(f"GEN row needs {len(_GEN_COLS)} columns, got {len(tokens)}", lineno)
            v = [_num(t, lineno, c) for c, t in enumerate(tokens[1:], start=2)]
            gens.append(Generator(_int(tokens[0], lineno, 1), *v))

    if base_mva is None:
        raise CaseParseError("missing BASEMVA line")
    return check(NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(gens)))


def serialize_native_case(case: NetworkCase) -> str:
    """Write ``case`` in the native format; floats are written with full precision."""
    lines = [f"BASEMVA {case.base_mva!r}", "", "BUS", "# " + " ".join(_BUS_COLS)]
    for b in case.buses:
        vals = (b.vm, math.degrees(b.va), b.pd, b.qd, b.gs, b.bs, b.base_kv)
        lines.append(" ".join([str(b.id), b.kind.value, *map(repr, vals)]))
    lines += ["", "BRANCH", "# " + " ".join(_BRANCH_COLS)]
    for br in case.branches:
        vals = (br.r, br.x, br.b_charging, br.tap, math.degrees(br.shift))
        lines.append(" ".join([str(br.from_bus), str(br.to_bus), *map(repr, vals), str(int(br.in_service))]))
    lines += ["", "GEN", "# " + " ".join(_GEN_COLS)]
    for g in case.generators:
        vals = (g.pg, g.qg, g.p_min, g.p_max, g.q_min, g.q_max, g.v_set, g.cost_a, g.cost_b)
        lines.append(" ".join([str(g.bus), *map(repr, vals)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PSS/E v26 RAW subset
# ---------------------------------------------------------------------------

# bus:    I, 'NAME', BASKV, IDE, GL, BL, AREA, ZONE, VM, VA, OWNER [, PL, QL]
# gen:    I, ID, PG, QG, QT, QB, VS, IREG, MBASE, ZR, ZX, RT, XT, GTAP, STAT, RMPCT, PT, PB
# branch: I, J, CKT, R, X, B, RATEA, RATEB, RATEC, RATIO, ANGLE, GI, BI, GJ, BJ, ST
_RAW_KINDS = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _raw_fields(line: str) -> list[str]:
    body = line.split("/", 1)[0]
    lex = shlex.shlex(body, posix=True)
    lex.whitespace = ","
    lex.whitespace_split = True
    lex.quotes = "'\""
    return [tok.strip() for tok in lex]


def _is_terminator(fields: list[str]) -> bool:
    return bool(fields) and fields[0] in ("0", "Q")


def parse_psse_raw_v26(text: str) -> NetworkCase:
    """Parse the supported RAW subset.

    Generator cost coefficients are set to zero; apply a sidecar cost file
    (:func:`parse_cost_file` + :meth:`NetworkCase.with_costs`) before dispatch use.
    Bus loads, if present, are read from two optional trailing bus fields (PL, QL).
    """
    lines = text.splitlines()
    if len(lines) < 3:
        raise CaseParseError("RAW file needs a 3-line header")
    head = _raw_fields(lines[0])
    if len(head) < 2:
        raise CaseParseError("header line must carry IC, SBASE", 1)
    base_mva = _num(head[1], 1, 2)

    sections = ("bus", "generator", "branch", "transformer adjustment")
    data: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in sections}
    current = 0
    for lineno, raw in enumerate(lines[3:], start=4):
        if not raw.strip():
            continue
        fields = _raw_fields(raw)
        if _is_terminator(fields):
            current += 1
            if current == len(sections) or fields[0] == "Q":
                break
            continue
        data[sections[current]].append((lineno, fields))
    else:
        if current == 0:
            raise CaseParseError("bus data section is not terminated by a 0 record", len(lines))
        if current < 3:
            raise CaseParseError(f"{sections[current]} data section is not terminated", len(lines))

    buses = []
    for lineno, f in data["bus"]:
        if len(f) not in (11, 13):
            raise CaseParseError(
                f"unsupported record in bus data: expected 11 or 13 fields, got {len(f)}", lineno
            )
        ide = _int(f[3], lineno, 4)
        if ide not in _RAW_KINDS:
            raise CaseParseError(f"unsupported bus type code {ide}", lineno, 4)
        pd, qd = (_num(f[11], lineno, 12), _num(f[12], lineno, 13)) if len(f) == 13 else (0.0, 0.0)
        buses.append(
            Bus(
                id=_int(f[0], lineno, 1),
                kind=_RAW_KINDS[ide],
                vm=_num(f[8], lineno, 9),
                va=math.radians(_num(f[9], lineno, 10)),
                pd=pd,
                qd=qd,
                gs=_num(f[4], lineno, 5),
                bs=_num(f[5], lineno, 6),
                base_kv=_num(f[2], lineno, 3),
            )
        )

    gens = []
    for lineno, f in data["generator"]:
        if len(f) < 18:
            raise CaseParseError(f"generator record needs 18 fields, got {len(f)}", lineno)
        if _int(f[14], lineno, 15) == 0:
            continue
        gens.append(
            Generator(
                bus=_int(f[0], lineno, 1),
                pg=_num(f[2], lineno, 3),
                qg=_num(f[3], lineno, 4),
                p_min=_num(f[17], lineno, 18),
                p_max=_num(f[16], lineno, 17),
                q_min=_num(f[5], lineno, 6),
                q_max=_num(f[4], lineno, 5),
                v_set=_num(f[6], lineno, 7),
            )
        )

    branches = []
    for lineno, f in data["branch"]:
        if len(f) < 16:
            raise CaseParseError(f"branch record needs 16 fields, got {len(f)}", lineno)
        ratio = _num(f[9], lineno, 10)
        branches.append(
            Branch(
                from_bus=abs(_int(f[0], lineno, 1)),
                to_bus=abs(_int(f[1], lineno, 2)),
                r=_num(f[3], lineno, 4),
                x=_num(f[4], lineno, 5),
                b_charging=_num(f[5], lineno, 6),
                tap=ratio if ratio != 0 else 1.0,
                shift=math.radians(_num(f[10], lineno, 11)),
                in_service=_int(f[15], lineno, 16) != 0,
            )
        )
    return check(NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(gens)))


def parse_cost_file(text: str) -> dict[int, tuple[float, float]]:
    """Parse a sidecar cost file: ``<gen index (1-based)> <cost_a> <cost_b>`` per line."""
    costs: dict[int, tuple[float, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise CaseParseError("cost rows are '<gen index> <cost_a> <cost_b>'", lineno)
        idx = _int(tokens[0], lineno, 1)
        if idx < 1:
            raise CaseParseError("generator index is 1-based", lineno, 1)
        costs[idx] = (_num(tokens[1], lineno, 2), _num(tokens[2], lineno, 3))
    return costs


def apply_costs(case: NetworkCase, costs: dict[int, tuple[float, float]]) -> NetworkCase:
    missing = [k for k in range(1, case.n_gen + 1) if k not in costs]
    extra = [k for k in costs if not 1 <= k <= case.n_gen]
    if missing or extra:
        raise ValueError(f"cost file does not match generators (missing {missing}, unknown {extra})")
    return case.with_costs([costs[k] for k in range(1, case.n_gen + 1)])


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------


def load_case(path: str | Path, costs: str | Path | None = None) -> NetworkCase:
    """Load a ``.case`` or ``.raw`` file, optionally applying a sidecar cost file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    case = parse_psse_raw_v26(text) if path.suffix.lower() == ".raw" else parse_native_case(text)
    if costs is not None:
        case = apply_costs(case, parse_cost_file(Path(costs).read_text(encoding="utf-8")))
    return case


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("oapd") / "data" / name))


def ieee14() -> NetworkCase:
    """The bundled IEEE 14-bus case with the dispatch study's limits and costs."""
    return load_case(bundled_path("ieee14.case"))
