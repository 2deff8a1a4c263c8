"""Scenario generators and independent audits shared by the test modules."""
from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction

import numpy as np

from semstack.core import EntityId
from semstack.sim.scenario import scenario_from_dict

PS = 10**12
RADIO = {"name": "radio", "stability": 1.0e-12, "malleability": 1.0e9}


def random_connected_graph(rng: np.random.Generator, n_min=2, n_max=8, extra_p=0.3):
    """(n, edges) with a random spanning tree plus extra edges."""
    n = int(rng.integers(n_min, n_max + 1))
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for a, b in itertools.combinations(range(n), 2):
        if (a, b) not in edges and rng.random() < extra_p:
            edges.add((a, b))
    return n, sorted(edges)


def bfs_hops(n, edges, src):
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in sorted(adj[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def graph_doc(name, n, edges, *, seed=0, duration=8.0, capacity=1.0e6, loss=None,
              tx_energy=0.0, battery=None, positions=None, trust=None, flows=(),
              group_of=None, plane_mode="unified", extra_channels=(), **top):
    """Scenario document for nodes n0..n{n-1} joined by point-to-point channels."""
    nodes = []
    for i in range(n):
        node = {"name": f"n{i}", "position": list(positions[i]) if positions else [0.0, 0.0, 0.0]}
        if trust and trust[i] == "untrusted":
            node["trust"] = "untrusted"
        if battery is not None:
            node["battery"] = battery
        nodes.append(node)
    channels = []
    for a, b in edges:
        ch = {"name": f"c{a}-{b}", "attached": [f"n{a}", f"n{b}"], "embodiment": "radio",
              "capacity": capacity, "tx_energy_per_bit": tx_energy}
        if loss:
            ch["loss"] = dict(loss)
        if group_of and (a, b) in group_of:
            ch["group"] = group_of[(a, b)]
        channels.append(ch)
    channels.extend(extra_channels)
    doc = {"name": name, "duration": duration, "seed": seed, "plane_mode": plane_mode,
           "embodiments": [dict(RADIO)], "nodes": nodes, "channels": channels,
           "flows": list(flows)}
    doc.update(top)
    return doc


def graph_scenario(*args, **kwargs):
    return scenario_from_dict(graph_doc(*args, **kwargs))


def bulk_flow(name, src, dst, bits=4096, **extra):
    flow = {"name": name, "source": src, "destination": {"node": dst},
            "app": {"kind": "bulk", "total_bits": bits}}
    flow.update(extra)
    return flow


def exhaustive_offers(topo, src, targets, max_hops, bits):
    """Oracle: every node sequence, every channel choice per hop, metrics by hand."""
    others = [n for n in topo.nodes if n != src]
    found = []
    for k in range(1, max_hops + 1):
        for seq in itertools.permutations(others, k):
            if seq[-1] not in targets:
                continue
            nodes = (src,) + seq
            choices = []
            for u, v in zip(nodes, nodes[1:]):
                choices.append([c.id for c in topo.channels.values() if u in c.attached and v in c.attached])
            for chans in itertools.product(*choices):
                terms = []
                for (u, v), cid in zip(zip(nodes, nodes[1:]), chans):
                    ch = topo.channels[cid]
                    q = (1 - ch.loss.p) ** bits
                    dist = math.dist(topo.nodes[u].position.position, topo.nodes[v].position.position)
                    terms.append((1 / q) * bits / ch.capacity + dist / ch.propagation_speed)
                # correctly rounded, so paths with equal hop costs tie exactly
                found.append((tuple(zip(nodes, chans, nodes[1:])), math.fsum(terms)))
    return found


def run_until(sim, t_ps: int) -> None:
    """Step ``sim`` until its next event lies beyond ``t_ps``."""
    while sim._heap and sim._heap[0][0] <= t_ps and sim.step():
        pass
    sim.now = max(sim.now, t_ps)


# --- audits -------------------------------------------------------------------

def lightcone_violations(trace) -> list:
    """Delivery records whose receiver sits outside the sender's light cone.

    Recomputed from the recorded send time, positions and arrival time with
    exact rational arithmetic.
    """
    bad = []
    for rec in trace.of_kind("rx"):
        f = rec.fields
        dt = Fraction(rec.time - f["send_ps"], PS)
        dist_sq = sum((Fraction(a) - Fraction(b)) ** 2 for a, b in zip(f["send_pos"], f["recv_pos"]))
        reach = Fraction(f["speed"]) * dt
        if dt < 0 or dist_sq > reach * reach:
            bad.append(rec)
    return bad


def energy_ledger_mismatches(result) -> list:
    """Nodes whose battery delta differs from the trace's summed energy records."""
    logged: dict = {}
    for rec in result.trace.of_kind("energy"):
        logged[rec.ids[0]] = logged.get(rec.ids[0], 0) + rec.fields["fj"]
    bad = []
    for nid, node in result.sim.topo.nodes.items():
        total = logged.get(nid, 0)
        if node.spent_fj != total:
            bad.append((node.name, "spent", node.spent_fj, total))
        if node.initial_battery_fj is not None:
            if node.initial_battery_fj - node.battery_fj != total or node.battery_fj < 0:
                bad.append((node.name, "battery", node.initial_battery_fj - node.battery_fj, total))
    return bad


def channel_rate_segments(trace):
    """Per channel: list of (start_ps, end_ps, rate) service segments."""
    rate: dict = {}
    since: dict = {}
    active: set = set()
    segs: dict = {}

    def close(ch, t):
        if ch in active and t > since[ch]:
            segs.setdefault(ch, []).append((since[ch], t, rate[ch]))
        since[ch] = t

    for rec in trace.records:
        if rec.kind == "tx":
            ch = rec.ids[1]
            active.add(ch)
            since[ch] = rec.time
        elif rec.kind == "rate":
            ch = rec.ids[0]
            close(ch, rec.time)
            rate[ch] = rec.fields["rate"]
        elif rec.kind == "tx-end":
            ch = rec.ids[1]
            close(ch, rec.time)
            active.discard(ch)
    return segs


def window_throughput(segments, channels, start_ps, end_ps) -> float:
    """Bits served across ``channels`` inside [start_ps, end_ps)."""
    total = 0.0
    for ch in channels:
        for a, b, r in segments.get(ch, ()):
            lo, hi = max(a, start_ps), min(b, end_ps)
            if hi > lo:
                total += r * (hi - lo) / PS
    return total


def node_ids(sim, names):
    return {sim.topo.by_name[n] for n in names}


def is_node(eid) -> bool:
    return isinstance(eid, EntityId) and eid.namespace == "node"
