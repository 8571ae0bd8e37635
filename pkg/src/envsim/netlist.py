"""SPICE-like netlist frontend and node tearing into subcircuits.

The accepted format is line oriented; ``*`` starts a comment line.

Devices::

    R<name> n+ n- value          C<name> n+ n- value
    L<name> n+ n- value          D<name> n+ n- Is Vt
    M<name> nd ng ns K VT lambda
    V<name> n+ n- <sourcespec>   I<name> n+ n- <sourcespec>

Source specs::

    dc V0                  constant
    sin V0 VA <harmonic>   V0 + VA * sin(2*pi*h*t/P), harmonic h >= 1
    am  V0 VA <envelope>   V0 + VA * e(tau) * sin(2*pi*t/P)

``<envelope>`` names a slow modulation of tau: ``unit``, ``ramp:<a>``
(1 + a*tau), ``sinmod:<f>:<m>`` (1 + m*sin(2*pi*f*tau)), or a ``*.csv``
file with rows ``tau,value`` (linear interpolation).

Directives::

    .period P
    .omega const W | .omega table file.csv
    .partition <name> n1 n2 ...

Node names are case sensitive; ``0`` and ``gnd`` both denote ground.
Ground is the shared reference of every subcircuit: it is never duplicated
by tearing and may be listed in any partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import (
    AmbiguousPartitionError,
    DeviceSpansThreeSubcircuitsError,
    DuplicateNameError,
    MissingPeriodError,
    NetlistSyntaxError,
    UncoveredNodeError,
    UndefinedNodeError,
    UnknownDeviceError,
)

GROUND_NAMES = ("0", "gnd")

#: device kind -> (number of terminals, number of plain numeric params)
_DEVICE_ARITY = {
    "resistor": (2, 1),
    "capacitor": (2, 1),
    "inductor": (2, 1),
    "diode": (2, 2),
    "mosfet": (3, 3),
    "vsource": (2, 0),
    "isource": (2, 0),
}

_KIND_BY_LETTER = {
    "r": "resistor",
    "c": "capacitor",
    "l": "inductor",
    "d": "diode",
    "m": "mosfet",
    "v": "vsource",
    "i": "isource",
}


def is_ground(node: str) -> bool:
    return node in GROUND_NAMES


@dataclass(frozen=True)
class SourceSpec:
    """Descriptor of a bivariate source s(tau, t)."""

    kind: str  # dc | sin | am
    v0: float
    va: float = 0.0
    harmonic: int = 1
    envelope: str = "unit"

    def tokens(self):
        if self.kind == "dc":
            return ["dc", repr(self.v0)]
        if self.kind == "sin":
            return ["sin", repr(self.v0), repr(self.va), str(self.harmonic)]
        return ["am", repr(self.v0), repr(self.va), self.envelope]


@dataclass(frozen=True)
class OmegaSpec:
    """Angular frequency of the fast axis: constant or tabulated over tau."""

    kind: str  # const | table
    value: float = 0.0
    path: str = ""


@dataclass(frozen=True)
class Device:
    kind: str
    name: str
    terminals: tuple
    params: tuple = ()
    source: SourceSpec | None = None


@dataclass(frozen=True)
class Circuit:
    nodes: tuple  # non-ground node names in first-use order
    devices: tuple
    partition_directives: tuple  # ((name, (node, ...)), ...)
    period: float
    omega: OmegaSpec

    @property
    def sources(self):
        """(device name, SourceSpec) for every independent source."""
        return tuple(
            (d.name, d.source) for d in self.devices if d.source is not None
        )


@dataclass(frozen=True)
class Connection:
    """Torn-node pairing: local node mu of sub k joined to nu of sub l.

    ``current_unknowns`` holds the per-subcircuit connection-end ordinals
    (i_mu^k, i_nu^l); the absolute unknown positions follow from the
    SystemLayout ordering (ends come last).
    """

    index: int
    sub_k: int
    node_mu: int
    sub_l: int
    node_nu: int
    current_unknowns: tuple


@dataclass(frozen=True)
class Subcircuit:
    name: str
    nodes: tuple  # local non-ground node names
    origin: tuple  # original global node of each local node
    devices: tuple  # terminals remapped to local names / ground
    conn_ends: tuple  # (connection index, local node index) in ordinal order


@dataclass(frozen=True)
class PartitionedCircuit:
    subcircuits: tuple
    connections: tuple
    period: float
    omega: OmegaSpec
    circuit: Circuit

    @property
    def n_subcircuits(self):
        return len(self.subcircuits)


def _parse_float(tok, lineno, what):
    try:
        return float(tok)
    except ValueError:
        raise NetlistSyntaxError(f"cannot parse {what} {tok!r}", lineno) from None


def _parse_source(toks, lineno):
    if not toks:
        raise NetlistSyntaxError("missing source specification", lineno)
    kind = toks[0].lower()
    if kind == "dc":
        if len(toks) != 2:
            raise NetlistSyntaxError("dc source takes one value", lineno)
        return SourceSpec("dc", _parse_float(toks[1], lineno, "dc value"))
    if kind == "sin":
        if len(toks) not in (3, 4):
            raise NetlistSyntaxError("sin source takes V0 VA [harmonic]", lineno)
        harmonic = 1
        if len(toks) == 4:
            try:
                harmonic = int(toks[3])
            except ValueError:
                raise NetlistSyntaxError(
                    f"cannot parse harmonic {toks[3]!r}", lineno
                ) from None
            if harmonic < 1:
                raise NetlistSyntaxError("harmonic must be >= 1", lineno)
        return SourceSpec(
            "sin",
            _parse_float(toks[1], lineno, "V0"),
            _parse_float(toks[2], lineno, "VA"),
            harmonic=harmonic,
        )
    if kind == "am":
        if len(toks) != 4:
            raise NetlistSyntaxError("am source takes V0 VA envelope", lineno)
        return SourceSpec(
            "am",
            _parse_float(toks[1], lineno, "V0"),
            _parse_float(toks[2], lineno, "VA"),
            envelope=toks[3],
        )
    raise NetlistSyntaxError(f"unknown source kind {toks[0]!r}", lineno)


def _check_params(kind, params, name, lineno):
    positive = {
        "resistor": [(0, "resistance")],
        "capacitor": [(0, "capacitance")],
        "inductor": [(0, "inductance")],
        "diode": [(0, "saturation current"), (1, "thermal voltage")],
        "mosfet": [(0, "transconductance")],
    }
    for idx, what in positive.get(kind, []):
        if params[idx] <= 0.0:
            raise NetlistSyntaxError(f"{name}: {what} must be positive", lineno)
    if kind == "mosfet" and params[2] < 0.0:
        raise NetlistSyntaxError(f"{name}: lambda must be >= 0", lineno)


def parse_netlist(text: str) -> Circuit:
    """Parse netlist source into a validated Circuit."""
    devices = []
    names = set()
    partitions = []
    partition_names = set()
    period = None
    omega = None
    node_order = []
    node_seen = set()

    def note_node(nd):
        if not is_ground(nd) and nd not in node_seen:
            node_seen.add(nd)
            node_order.append(nd)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        toks = line.split()
        head = toks[0]

        if head.startswith("."):
            directive = head.lower()
            if directive == ".period":
                if len(toks) != 2:
                    raise NetlistSyntaxError(".period takes one value", lineno)
                period = _parse_float(toks[1], lineno, "period")
                if period <= 0.0:
                    raise NetlistSyntaxError("period must be positive", lineno)
            elif directive == ".omega":
                if len(toks) == 3 and toks[1].lower() == "const":
                    omega = OmegaSpec("const", _parse_float(toks[2], lineno, "omega"))
                elif len(toks) == 3 and toks[1].lower() == "table":
                    omega = OmegaSpec("table", path=toks[2])
                else:
                    raise NetlistSyntaxError(
                        ".omega takes 'const W' or 'table file'", lineno
                    )
            elif directive == ".partition":
                if len(toks) < 2:
                    raise NetlistSyntaxError(".partition needs a name", lineno)
                pname = toks[1]
                if pname in partition_names:
                    raise DuplicateNameError(f"partition {pname!r}", lineno)
                partition_names.add(pname)
                partitions.append((pname, tuple(toks[2:])))
            else:
                raise NetlistSyntaxError(f"unknown directive {head!r}", lineno)
            continue

        kind = _KIND_BY_LETTER.get(head[0].lower())
        if kind is None:
            raise UnknownDeviceError(f"unknown device letter in {head!r}", lineno)
        if head in names:
            raise DuplicateNameError(f"device {head!r}", lineno)
        names.add(head)

        nterm, nparam = _DEVICE_ARITY[kind]
        terms = toks[1 : 1 + nterm]
        if len(terms) < nterm:
            raise NetlistSyntaxError(f"{head}: expected {nterm} nodes", lineno)
        rest = toks[1 + nterm :]
        if kind in ("vsource", "isource"):
            source = _parse_source(rest, lineno)
            dev = Device(kind, head, tuple(terms), (), source)
        else:
            if len(rest) != nparam:
                raise NetlistSyntaxError(
                    f"{head}: expected {nparam} parameter(s), got {len(rest)}", lineno
                )
            params = tuple(_parse_float(tok, lineno, "parameter") for tok in rest)
            _check_params(kind, params, head, lineno)
            dev = Device(kind, head, tuple(terms), params)
        for nd in dev.terminals:
            note_node(nd)
        devices.append(dev)

    if period is None:
        raise MissingPeriodError("netlist has no .period directive")
    if omega is None:
        omega = OmegaSpec("const", 2.0 * math.pi / period)

    for pname, pnodes in partitions:
        for nd in pnodes:
            if not is_ground(nd) and nd not in node_seen:
                raise UndefinedNodeError(
                    f"partition {pname!r} references unknown node {nd!r}"
                )

    return Circuit(
        nodes=tuple(node_order),
        devices=tuple(devices),
        partition_directives=tuple(partitions),
        period=period,
        omega=omega,
    )


def serialize_netlist(circuit: Circuit) -> str:
    """Canonical netlist text; parse(serialize(c)) == c."""
    lines = []
    for d in circuit.devices:
        toks = [d.name, *d.terminals]
        if d.source is not None:
            toks += d.source.tokens()
        else:
            toks += [repr(p) for p in d.params]
        lines.append(" ".join(toks))
    lines.append(f".period {circuit.period!r}")
    if circuit.omega.kind == "const":
        lines.append(f".omega const {circuit.omega.value!r}")
    else:
        lines.append(f".omega table {circuit.omega.path}")
    for pname, pnodes in circuit.partition_directives:
        lines.append(" ".join([".partition", pname, *pnodes]))
    return "\n".join(lines) + "\n"


def apply_node_tearing(circuit: Circuit) -> PartitionedCircuit:
    """Split the circuit at shared nodes into connected subcircuits.

    Every node referenced across a partition boundary is duplicated in the
    foreign partition; each duplication adds one Connection carrying two
    branch-current unknowns.  When k >= 3 partitions meet at one node the
    duplicates form a chain (home, then foreign partitions in declaration
    order) of k-1 pairwise connections.
    """
    directives = circuit.partition_directives
    if not directives:
        directives = (("main", circuit.nodes),)

    part_names = [p for p, _ in directives]
    part_index = {p: i for i, p in enumerate(part_names)}

    home = {}
    for pname, pnodes in directives:
        for nd in pnodes:
            if is_ground(nd):
                continue  # ground is shared by every subcircuit
            if nd in home:
                raise AmbiguousPartitionError(
                    f"node {nd!r} in partitions {home[nd]!r} and {pname!r}"
                )
            home[nd] = pname
    for nd in circuit.nodes:
        if nd not in home:
            raise UncoveredNodeError(f"node {nd!r} not covered by any partition")

    # first-declared partition that lists ground owns ground-first devices
    ground_home = None
    for pname, pnodes in directives:
        if any(is_ground(nd) for nd in pnodes):
            ground_home = pname
            break

    def owner(dev: Device) -> str:
        parts = [home[t] for t in dev.terminals if not is_ground(t)]
        if len(set(parts)) > 2:
            raise DeviceSpansThreeSubcircuitsError(
                f"device {dev.name!r} touches partitions {sorted(set(parts))}"
            )
        first = dev.terminals[0]
        if is_ground(first) and ground_home is not None:
            return ground_home
        if not parts:
            return ground_home if ground_home is not None else part_names[0]
        return parts[0]

    dev_owner = {d.name: owner(d) for d in circuit.devices}

    # nodes referenced from foreign partitions, in deterministic order
    foreign_refs = {nd: [] for nd in circuit.nodes}
    for d in circuit.devices:
        o = dev_owner[d.name]
        for t in d.terminals:
            if not is_ground(t) and home[t] != o and o not in foreign_refs[t]:
                foreign_refs[t].append(o)
    for nd in foreign_refs:
        foreign_refs[nd].sort(key=part_index.__getitem__)

    # local node tables: home nodes first (global declaration order)
    local_nodes = {p: [] for p in part_names}
    local_origin = {p: [] for p in part_names}
    for nd in circuit.nodes:
        local_nodes[home[nd]].append(nd)
        local_origin[home[nd]].append(nd)

    # duplicated nodes and chain connections
    dup_name = {}  # (node, partition) -> local duplicate name
    raw_connections = []  # (sub_k, node_name_k, sub_l, node_name_l)
    for nd in circuit.nodes:
        if not foreign_refs[nd]:
            continue
        chain = [home[nd]] + foreign_refs[nd]
        for q in foreign_refs[nd]:
            dname = f"{nd}@{q}"
            dup_name[(nd, q)] = dname
            local_nodes[q].append(dname)
            local_origin[q].append(nd)
        for a, b in zip(chain[:-1], chain[1:]):
            na = nd if a == home[nd] else dup_name[(nd, a)]
            nb = dup_name[(nd, b)]
            raw_connections.append((a, na, b, nb))

    def localize(dev: Device) -> Device:
        o = dev_owner[dev.name]
        terms = []
        for t in dev.terminals:
            if is_ground(t):
                terms.append(t)
            elif home[t] == o:
                terms.append(t)
            else:
                terms.append(dup_name[(t, o)])
        return Device(dev.kind, dev.name, tuple(terms), dev.params, dev.source)

    sub_devices = {p: [] for p in part_names}
    for d in circuit.devices:
        sub_devices[dev_owner[d.name]].append(localize(d))

    node_pos = {
        p: {nd: i for i, nd in enumerate(local_nodes[p])} for p in part_names
    }
    end_count = {p: 0 for p in part_names}
    conn_ends = {p: [] for p in part_names}
    connections = []
    for ci, (pa, na, pb, nb) in enumerate(raw_connections):
        ka, kb = part_index[pa], part_index[pb]
        ord_a, ord_b = end_count[pa], end_count[pb]
        end_count[pa] += 1
        end_count[pb] += 1
        conn_ends[pa].append((ci, node_pos[pa][na]))
        conn_ends[pb].append((ci, node_pos[pb][nb]))
        connections.append(
            Connection(ci, ka, node_pos[pa][na], kb, node_pos[pb][nb], (ord_a, ord_b))
        )

    subs = tuple(
        Subcircuit(
            name=p,
            nodes=tuple(local_nodes[p]),
            origin=tuple(local_origin[p]),
            devices=tuple(sub_devices[p]),
            conn_ends=tuple(conn_ends[p]),
        )
        for p in part_names
    )
    return PartitionedCircuit(
        subcircuits=subs,
        connections=tuple(connections),
        period=circuit.period,
        omega=circuit.omega,
        circuit=circuit,
    )


@dataclass
class ValidationReport:
    """Unknown bookkeeping and splitting-quality warnings."""

    rows: list = field(default_factory=list)  # (name, m, internal, ends)
    n_connections: int = 0
    warnings: list = field(default_factory=list)

    def to_text(self) -> str:
        out = [f"{'subcircuit':<14}{'unknowns':>9}{'internal':>9}{'conn-ends':>10}"]
        for name, m, internal, ends in self.rows:
            out.append(f"{name:<14}{m:>9}{internal:>9}{ends:>10}")
        out.append(f"connections: {self.n_connections}")
        for w in self.warnings:
            out.append(f"warning: {w}")
        return "\n".join(out)

    def to_keyvalues(self) -> str:
        lines = [f"connections={self.n_connections}"]
        for name, m, internal, ends in self.rows:
            lines.append(f"unknowns_{name}={m}")
            lines.append(f"conn_ends_{name}={ends}")
        lines.append(f"warnings={len(self.warnings)}")
        return "\n".join(lines) + "\n"


def validate_circuit(pcircuit: PartitionedCircuit) -> ValidationReport:
    """Report per-subcircuit unknown counts and poor-splitting warnings."""
    report = ValidationReport(n_connections=len(pcircuit.connections))
    for sub in pcircuit.subcircuits:
        n_branch = sum(1 for d in sub.devices if d.kind in ("vsource", "inductor"))
        ends = len(sub.conn_ends)
        m = len(sub.nodes) + n_branch + ends
        internal = m - ends
        report.rows.append((sub.name, m, internal, ends))
        if ends > internal:
            report.warnings.append(
                f"subcircuit {sub.name!r}: connection unknowns ({ends}) exceed "
                f"internal unknowns ({internal})"
            )
    return report
