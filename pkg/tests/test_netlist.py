"""Netlist parsing, serialization, node tearing, and split validation."""

import numpy as np
import pytest

from envsim import netlist
from envsim.errors import (
    AmbiguousPartitionError,
    DeviceSpansThreeSubcircuitsError,
    DuplicateNameError,
    MissingPeriodError,
    NetlistSyntaxError,
    UncoveredNodeError,
    UndefinedNodeError,
    UnknownDeviceError,
)

SERIES_RR = """\
* two resistors in series across ground, middle node torn
R1 m 0 1.0
R2 0 m 2.0
.period 1.0
.partition A m
.partition B 0
"""


class TestParse:
    def test_single_resistor(self):
        c = netlist.parse_netlist("R1 n1 0 2.0\n.period 1.0")
        assert len(c.devices) == 1
        d = c.devices[0]
        assert d.kind == "resistor"
        assert d.terminals == ("n1", "0")
        assert d.params == (2.0,)
        assert c.period == 1.0
        assert c.nodes == ("n1",)

    def test_capacitor_with_partition(self):
        c = netlist.parse_netlist("C1 n1 0 1e-6\n.partition A n1\n.period 1.0")
        assert c.devices[0].kind == "capacitor"
        assert c.partition_directives == (("A", ("n1",)),)

    def test_missing_value_is_syntax_error(self):
        with pytest.raises(NetlistSyntaxError) as ei:
            netlist.parse_netlist("R1 n1 0")
        assert ei.value.lineno == 1

    def test_sources(self):
        c = netlist.parse_netlist(
            "V1 a 0 dc 5\nV2 b 0 sin 0 1 2\nI1 c 0 am 0 2 ramp:0.5\n.period 2.0"
        )
        dc, sn, am = (d.source for d in c.devices)
        assert (dc.kind, dc.v0) == ("dc", 5.0)
        assert (sn.kind, sn.v0, sn.va, sn.harmonic) == ("sin", 0.0, 1.0, 2)
        assert (am.kind, am.envelope) == ("am", "ramp:0.5")

    def test_default_omega_is_carrier(self):
        c = netlist.parse_netlist("R1 a 0 1\n.period 0.5")
        assert c.omega.kind == "const"
        assert c.omega.value == pytest.approx(2 * np.pi / 0.5)

    def test_errors(self):
        with pytest.raises(UnknownDeviceError):
            netlist.parse_netlist("Q1 a b c 1\n.period 1")
        with pytest.raises(DuplicateNameError):
            netlist.parse_netlist("R1 a 0 1\nR1 b 0 1\n.period 1")
        with pytest.raises(MissingPeriodError):
            netlist.parse_netlist("R1 a 0 1")
        with pytest.raises(UndefinedNodeError):
            netlist.parse_netlist("R1 a 0 1\n.period 1\n.partition A a zz")
        with pytest.raises(NetlistSyntaxError):
            netlist.parse_netlist("R1 a 0 -5\n.period 1")
        with pytest.raises(NetlistSyntaxError):
            netlist.parse_netlist("R1 a 0 1\n.period -1")
        with pytest.raises(NetlistSyntaxError):
            netlist.parse_netlist("R1 a 0 1\n.period 1\n.bogus x")

    def test_diode_and_mosfet(self):
        c = netlist.parse_netlist(
            "D1 a 0 1e-12 0.025\nM1 d g s 1e-3 1.0 0.0\n.period 1"
        )
        assert c.devices[0].params == (1e-12, 0.025)
        assert c.devices[1].kind == "mosfet"
        assert c.devices[1].terminals == ("d", "g", "s")

    def test_round_trip(self):
        text = (
            "R1 n1 n2 2.0\nC1 n2 0 1e-6\nL1 n2 n3 1e-3\n"
            "D1 n3 0 1e-12 0.025\nM1 n1 n2 n3 1e-3 1.0 0.02\n"
            "V1 n1 0 sin 0.0 1.0 1\nI1 n2 0 am 0.0 0.5 sinmod:0.1:0.5\n"
            ".period 1e-06\n.omega const 6283185.0\n"
            ".partition A n1 n2\n.partition B n3 0\n"
        )
        c1 = netlist.parse_netlist(text)
        c2 = netlist.parse_netlist(netlist.serialize_netlist(c1))
        assert c1 == c2


class TestTearing:
    def test_series_pair(self):
        c = netlist.parse_netlist(SERIES_RR)
        pc = netlist.apply_node_tearing(c)
        assert pc.n_subcircuits == 2
        assert len(pc.connections) == 1
        conn = pc.connections[0]
        assert conn.sub_k != conn.sub_l
        assert len(conn.current_unknowns) == 2
        a, b = pc.subcircuits
        assert a.nodes == ("m",)
        assert b.nodes == ("m@B",)
        assert [d.name for d in a.devices] == ["R1"]
        assert [d.name for d in b.devices] == ["R2"]
        assert b.devices[0].terminals == ("0", "m@B")

    def test_no_shared_nodes(self):
        c = netlist.parse_netlist(
            "R1 a 0 1\nR2 b 0 1\n.period 1\n.partition A a\n.partition B b"
        )
        pc = netlist.apply_node_tearing(c)
        assert len(pc.connections) == 0
        assert pc.subcircuits[0].nodes == ("a",)
        assert pc.subcircuits[1].nodes == ("b",)

    def test_star_node_three_partitions_chain(self):
        c = netlist.parse_netlist(
            "R1 s 0 1\nR2 nb s 1\nR3 nc s 1\n.period 1\n"
            ".partition A s\n.partition B nb\n.partition C nc"
        )
        pc = netlist.apply_node_tearing(c)
        assert len(pc.connections) == 2
        # oracle: edges must form a spanning tree over the sharing partitions
        edges = {(conn.sub_k, conn.sub_l) for conn in pc.connections}
        assert len(edges) == 3 - 1
        nodes = {0}
        grew = True
        while grew:
            grew = False
            for a, b in edges:
                if (a in nodes) != (b in nodes):
                    nodes |= {a, b}
                    grew = True
        assert nodes == {0, 1, 2}

    def test_partition_errors(self):
        with pytest.raises(UncoveredNodeError):
            netlist.apply_node_tearing(
                netlist.parse_netlist("R1 a b 1\n.period 1\n.partition A a")
            )
        with pytest.raises(AmbiguousPartitionError):
            netlist.apply_node_tearing(
                netlist.parse_netlist(
                    "R1 a 0 1\n.period 1\n.partition A a\n.partition B a"
                )
            )
        with pytest.raises(DeviceSpansThreeSubcircuitsError):
            netlist.apply_node_tearing(
                netlist.parse_netlist(
                    "M1 a b c 1e-3 1 0\n.period 1\n"
                    ".partition A a\n.partition B b\n.partition C c"
                )
            )

    def test_no_directives_single_subcircuit(self):
        c = netlist.parse_netlist("R1 a b 1\nC1 b 0 1e-6\n.period 1")
        pc = netlist.apply_node_tearing(c)
        assert pc.n_subcircuits == 1
        assert len(pc.connections) == 0
        assert pc.subcircuits[0].nodes == ("a", "b")

    def test_conservation(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            c, pc = _random_partitioned_ladder(rng)
            n_dev = sum(len(s.devices) for s in pc.subcircuits)
            assert n_dev == len(c.devices)
            n_dup = sum(
                1
                for s in pc.subcircuits
                for ln, og in zip(s.nodes, s.origin)
                if ln != og
            )
            # one duplicate voltage per connection in a chain tearing
            added = 2 * len(pc.connections) + n_dup
            assert n_dup == len(pc.connections)
            assert added == 3 * len(pc.connections)

    def test_merge_back_reproduces_incidence(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            c, pc = _random_partitioned_ladder(rng)
            orig = {
                (d.name, tuple("0" if netlist.is_ground(t) else t for t in d.terminals))
                for d in c.devices
            }
            merged = set()
            for s in pc.subcircuits:
                back = dict(zip(s.nodes, s.origin))
                for d in s.devices:
                    terms = tuple(
                        "0" if netlist.is_ground(t) else back[t] for t in d.terminals
                    )
                    merged.add((d.name, terms))
            assert merged == orig

    def test_connection_graph_connected(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            c, pc = _random_partitioned_ladder(rng)
            n = pc.n_subcircuits
            if n == 1:
                continue
            reach = {0}
            grew = True
            while grew:
                grew = False
                for conn in pc.connections:
                    if (conn.sub_k in reach) != (conn.sub_l in reach):
                        reach |= {conn.sub_k, conn.sub_l}
                        grew = True
            # the ladder itself is connected, so the connection graph must be
            assert reach == set(range(n))


class TestValidate:
    def test_series_pair_report(self):
        pc = netlist.apply_node_tearing(netlist.parse_netlist(SERIES_RR))
        rep = netlist.validate_circuit(pc)
        assert rep.n_connections == 1
        assert rep.rows[0][1] == 2 and rep.rows[1][1] == 2
        assert rep.warnings == []
        assert "unknowns_A=2" in rep.to_keyvalues()

    def test_single_subcircuit_no_warnings(self):
        c = netlist.parse_netlist("R1 a 0 1\nV1 a 0 dc 1\n.period 1")
        rep = netlist.validate_circuit(netlist.apply_node_tearing(c))
        assert rep.n_connections == 0
        assert rep.warnings == []

    def test_pathological_split_warns(self):
        # chain-interior subcircuit with two duplicated nodes carrying two
        # connection ends each: 4 ends vs 3 internal voltages
        text = (
            "RA1 n1 0 1\nRA2 n2 0 1\n"
            "RB1 nb n1 1\nRB2 nb n2 1\n"
            "RC1 nc n1 1\nRC2 nc n2 1\nRC3 nc 0 1\n"
            ".period 1\n.partition A n1 n2\n.partition B nb\n.partition C nc\n"
        )
        pc = netlist.apply_node_tearing(netlist.parse_netlist(text))
        rep = netlist.validate_circuit(pc)
        assert any("B" in w for w in rep.warnings)


def _random_partitioned_ladder(rng):
    """Random RC ladder over 4-9 nodes with a random contiguous partition."""
    n_nodes = int(rng.integers(4, 10))
    nodes = [f"n{i}" for i in range(n_nodes)]
    lines = []
    for i, nd in enumerate(nodes):
        prev = "0" if i == 0 else nodes[i - 1]
        lines.append(f"R{i} {prev} {nd} 1.0")
        if rng.random() < 0.5:
            lines.append(f"C{i} {nd} 0 1e-6")
    n_parts = int(rng.integers(1, 4))
    cuts = sorted(rng.choice(np.arange(1, n_nodes), size=n_parts - 1, replace=False))
    bounds = [0, *cuts, n_nodes]
    for p in range(n_parts):
        members = " ".join(nodes[bounds[p] : bounds[p + 1]])
        extra = " 0" if p == 0 else ""
        lines.append(f".partition P{p} {members}{extra}")
    lines.append(".period 1.0")
    c = netlist.parse_netlist("\n".join(lines))
    return c, netlist.apply_node_tearing(c)
