"""MATPOWER case parsing and per-unit network construction.

Reads the ``.m`` matrix syntax that the standard transmission test cases are
distributed in, validates the raw tables, and converts them into an immutable
per-unit :class:`NetworkCase` that the solvers consume.  Contingency edits
(generator outages, load steps) produce modified copies; nothing here mutates
its inputs.

Supported sections::

    mpc.baseMVA = <value>;
    mpc.bus    = [ ... ];   % bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
    mpc.gen    = [ ... ];   % bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin ...
    mpc.branch = [ ... ];   % fbus tbus r x b rateA rateB rateC ratio angle status ...

Columns beyond the required ones (gencost, extra gen fields) are ignored.
The ``mpc.`` prefix is optional so handwritten fixture cases stay short.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

from .errors import CaseModelError, CaseParseError, ContingencyError

# MATPOWER bus types
PQ = 1
PV = 2
SLACK = 3

_BUS_COLS = 13
_GEN_COLS = 10
_BRANCH_COLS = 11


@dataclass
class BusRow:
    """One row of the raw bus matrix (MW/MVAr/kV units as in the file)."""

    bus_id: int
    bus_type: int
    pd: float
    qd: float
    gs: float
    bs: float
    vm: float
    va_deg: float
    base_kv: float
    vmax: float
    vmin: float


@dataclass
class GenRow:
    """One row of the raw generator matrix (MW/MVAr units)."""

    bus_id: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    vset: float
    mbase: float
    status: int
    pmax: float
    pmin: float


@dataclass
class BranchRow:
    """One row of the raw branch matrix (impedances already per-unit)."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float
    shift_deg: float
    status: int


@dataclass
class RawCase:
    """Validated raw case tables prior to per-unit conversion."""

    base_mva: float
    bus_rows: list[BusRow]
    gen_rows: list[GenRow]
    branch_rows: list[BranchRow]
    name: str = ""


@dataclass
class Generator:
    """In-service generator in per-unit on the system base.

    ``index`` is the row position in the original gen matrix and is the
    stable identifier used by contingency selection and reports.  ``qmin``
    and ``qmax`` are carried as metadata only; reactive limits are not
    enforced by the solvers.
    """

    index: int
    bus: int            # dense bus index
    bus_id: int         # external bus id
    pg: float
    qg: float
    vset: float
    pmin: float
    pmax: float
    mbase: float        # machine MVA base, p.u. of system base
    qmin: float
    qmax: float
    status: int = 1


@dataclass
class Branch:
    f: int              # dense from-bus index
    t: int              # dense to-bus index
    r: float
    x: float
    b: float
    tap: float
    shift: float        # radians


@dataclass
class NetworkCase:
    """Per-unitized, validated network description.

    All powers are p.u. on ``base_mva``; angles are radians; ``f_nominal``
    is in Hz.  ``vm0``/``va0`` hold the file's voltage profile and are
    refreshed with the solved base state by the balancing step, so they
    double as the warm start for contingency solves.
    """

    name: str
    base_mva: float
    f_nominal: float
    bus_ids: list[int]                 # dense index -> external id
    bus_index: dict[int, int]          # external id -> dense index
    bus_type: list[int]
    pd: list[float]
    qd: list[float]
    gs: list[float]
    bs: list[float]
    vm0: list[float]
    va0: list[float]
    vmin: list[float]
    vmax: list[float]
    gens: list[Generator]
    branches: list[Branch]
    slack_bus: int                     # dense index
    slack_angle: float                 # radians
    balanced: bool = False
    mw_lost: float = 0.0               # cumulative tripped generation, MW
    outages: list[int] = field(default_factory=list)   # tripped gen indices

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def in_service_gens(self) -> list[Generator]:
        return [g for g in self.gens if g.status]

    def gen_by_index(self, index: int) -> Generator:
        for g in self.gens:
            if g.index == index:
                return g
        raise ContingencyError(f"no generator with index {index}")


def parse_case(text: str) -> RawCase:
    """Parse MATPOWER ``.m`` case text into a :class:`RawCase`.

    Raises :class:`CaseParseError` with a line number for malformed rows and
    :class:`CaseModelError` for missing matrices or invariant violations
    (no slack bus, empty gen matrix, unknown branch endpoints).
    """
    lines = text.splitlines()
    sections: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva = None
    name = ""

    header = re.compile(r"^\s*(?:mpc\.)?(\w+)\s*=\s*\[(.*)$")
    scalar = re.compile(r"^\s*(?:mpc\.)?baseMVA\s*=\s*([0-9eE+.\-]+)\s*;")
    func = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")

    current: str | None = None
    for lineno, raw_line in enumerate(lines, start=1):
        line = raw_line.split("%", 1)[0].rstrip()
        if not line.strip():
            continue
        if current is None:
            m = func.match(line)
            if m:
                name = m.group(1)
                continue
            m = scalar.match(line)
            if m:
                base_mva = float(m.group(1))
                continue
            m = header.match(line)
            if m and m.group(1) != "baseMVA":
                current = m.group(1)
                sections.setdefault(current, [])
                line = m.group(2)
                # fall through: data may follow '[' on the same line
        if current is not None:
            body = line
            closed = "]" in body
            body = body.split("]", 1)[0]
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    sections[current].append(
                        (lineno, [float(v) for v in chunk.split()])
                    )
                except ValueError:
                    raise CaseParseError(
                        f"non-numeric field in {current} row", line=lineno
                    ) from None
            if closed:
                current = None

    if base_mva is None:
        raise CaseModelError("missing required scalar baseMVA")
    if base_mva <= 0:
        raise CaseModelError(f"baseMVA must be positive, got {base_mva}")
    for required in ("bus", "gen", "branch"):
        if required not in sections:
            raise CaseModelError(f"missing required matrix '{required}'")
    if not sections["bus"]:
        raise CaseModelError("bus matrix is empty")
    if not sections["gen"]:
        raise CaseModelError("gen matrix is empty (no generators)")

    bus_rows = []
    for lineno, row in sections["bus"]:
        if len(row) < _BUS_COLS:
            raise CaseParseError(
                f"bus row has {len(row)} fields, expected >= {_BUS_COLS}",
                line=lineno,
            )
        bus_rows.append(
            BusRow(
                bus_id=int(row[0]),
                bus_type=int(row[1]),
                pd=row[2],
                qd=row[3],
                gs=row[4],
                bs=row[5],
                vm=row[7],
                va_deg=row[8],
                base_kv=row[9],
                vmax=row[11],
                vmin=row[12],
            )
        )

    gen_rows = []
    for lineno, row in sections["gen"]:
        if len(row) < _GEN_COLS:
            raise CaseParseError(
                f"gen row has {len(row)} fields, expected >= {_GEN_COLS}",
                line=lineno,
            )
        gen_rows.append(
            GenRow(
                bus_id=int(row[0]),
                pg=row[1],
                qg=row[2],
                qmax=row[3],
                qmin=row[4],
                vset=row[5],
                mbase=row[6],
                status=1 if row[7] > 0 else 0,
                pmax=row[8],
                pmin=row[9],
            )
        )

    branch_rows = []
    for lineno, row in sections["branch"]:
        if len(row) < _BRANCH_COLS:
            raise CaseParseError(
                f"branch row has {len(row)} fields, expected >= {_BRANCH_COLS}",
                line=lineno,
            )
        branch_rows.append(
            BranchRow(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b=row[4],
                tap=row[8],
                shift_deg=row[9],
                status=1 if row[10] > 0 else 0,
            )
        )

    raw = RawCase(base_mva, bus_rows, gen_rows, branch_rows, name=name)
    _validate_raw(raw)
    return raw


def _validate_raw(raw: RawCase) -> None:
    ids = [b.bus_id for b in raw.bus_rows]
    id_set = set(ids)
    if len(id_set) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseModelError(f"duplicate bus ids: {dupes}")
    for b in raw.bus_rows:
        if b.bus_type not in (PQ, PV, SLACK):
            raise CaseModelError(
                f"unsupported bus type {b.bus_type} at bus {b.bus_id}"
            )
    slacks = [b.bus_id for b in raw.bus_rows if b.bus_type == SLACK]
    if len(slacks) != 1:
        raise CaseModelError(f"expected exactly one slack bus, found {slacks}")
    for g in raw.gen_rows:
        if g.bus_id not in id_set:
            raise CaseModelError(f"generator references unknown bus {g.bus_id}")
    for br in raw.branch_rows:
        if br.from_bus not in id_set or br.to_bus not in id_set:
            raise CaseModelError(
                f"branch references unknown bus {br.from_bus}-{br.to_bus}"
            )
    if not any(g.status for g in raw.gen_rows):
        raise CaseModelError("no in-service generators")


def build_network(raw: RawCase, f_nominal: float = 60.0) -> NetworkCase:
    """Convert a :class:`RawCase` into a per-unit :class:`NetworkCase`.

    Bus dense indices follow ascending external id.  Out-of-service
    generators and branches are dropped; taps of 0 normalize to 1.0 per the
    MATPOWER convention.  The network must be connected over in-service
    branches, otherwise a :class:`CaseModelError` is raised.
    """
    import math

    base = raw.base_mva
    order = sorted(range(len(raw.bus_rows)), key=lambda i: raw.bus_rows[i].bus_id)
    bus_rows = [raw.bus_rows[i] for i in order]
    bus_ids = [b.bus_id for b in bus_rows]
    bus_index = {bid: i for i, bid in enumerate(bus_ids)}

    gens = []
    for idx, g in enumerate(raw.gen_rows):
        if not g.status:
            continue
        gens.append(
            Generator(
                index=idx,
                bus=bus_index[g.bus_id],
                bus_id=g.bus_id,
                pg=g.pg / base,
                qg=g.qg / base,
                vset=g.vset,
                pmin=g.pmin / base,
                pmax=g.pmax / base,
                mbase=g.mbase / base,
                qmin=g.qmin / base,
                qmax=g.qmax / base,
            )
        )
    if not gens:
        raise CaseModelError("no in-service generators")

    branches = []
    for br in raw.branch_rows:
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise CaseModelError(
                f"zero-impedance branch {br.from_bus}-{br.to_bus}"
            )
        branches.append(
            Branch(
                f=bus_index[br.from_bus],
                t=bus_index[br.to_bus],
                r=br.r,
                x=br.x,
                b=br.b,
                tap=br.tap if br.tap != 0.0 else 1.0,
                shift=math.radians(br.shift_deg),
            )
        )

    slack_dense = next(
        i for i, b in enumerate(bus_rows) if b.bus_type == SLACK
    )
    net = NetworkCase(
        name=raw.name,
        base_mva=base,
        f_nominal=f_nominal,
        bus_ids=bus_ids,
        bus_index=bus_index,
        bus_type=[b.bus_type for b in bus_rows],
        pd=[b.pd / base for b in bus_rows],
        qd=[b.qd / base for b in bus_rows],
        gs=[b.gs / base for b in bus_rows],
        bs=[b.bs / base for b in bus_rows],
        vm0=[b.vm for b in bus_rows],
        va0=[math.radians(b.va_deg) for b in bus_rows],
        vmin=[b.vmin for b in bus_rows],
        vmax=[b.vmax for b in bus_rows],
        gens=gens,
        branches=branches,
        slack_bus=slack_dense,
        slack_angle=math.radians(bus_rows[slack_dense].va_deg),
    )
    _check_connected(net)
    return net


def _check_connected(net: NetworkCase) -> None:
    n = net.n_bus
    if n == 1:
        return
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in net.branches:
        adj[br.f].append(br.t)
        adj[br.t].append(br.f)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    if count != n:
        missing = [net.bus_ids[i] for i in range(n) if not seen[i]][:10]
        raise CaseModelError(
            f"network is not connected; {n - count} buses unreachable "
            f"(e.g. {missing})"
        )


def load_case(path: str, f_nominal: float = 60.0) -> NetworkCase:
    """Read, parse and build a network case from a file path."""
    with open(path, encoding="utf-8", errors="ignore") as fh:
        return build_network(parse_case(fh.read()), f_nominal=f_nominal)


def apply_contingency(net: NetworkCase, gen_index: int) -> NetworkCase:
    """Return a copy of ``net`` with generator ``gen_index`` tripped.

    Records the tripped unit's pre-outage output in ``mw_lost``.  Refuses to
    trip the last in-service generator (no frequency-responsive resource
    would remain).
    """
    target = net.gen_by_index(gen_index)
    if not target.status:
        raise ContingencyError(f"generator {gen_index} is already out of service")
    if len(net.in_service_gens()) < 2:
        raise ContingencyError(
            "cannot trip the only in-service generator"
        )
    out = copy.deepcopy(net)
    tgt = out.gen_by_index(gen_index)
    tgt.status = 0
    out.mw_lost = net.mw_lost + target.pg * net.base_mva
    out.outages = net.outages + [gen_index]
    return out


def apply_load_step(
    net: NetworkCase, bus_id: int, dp_mw: float, dq_mvar: float = 0.0
) -> NetworkCase:
    """Return a copy of ``net`` with the load at ``bus_id`` stepped by the
    given MW/MVAr amounts (positive = load increase)."""
    if bus_id not in net.bus_index:
        raise ContingencyError(f"unknown bus id {bus_id}")
    out = copy.deepcopy(net)
    i = out.bus_index[bus_id]
    out.pd[i] += dp_mw / net.base_mva
    out.qd[i] += dq_mvar / net.base_mva
    return out
