"""Backhaul topologies: node placement, routing tree to the gateway, demands."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

# QAM order -> SINR threshold (dB). Uncoded BER ~1e-5 operating points.
MCS_TABLE_DB = {4: 9.8, 16: 16.5, 64: 22.5, 256: 28.4}

OFDM_SYMBOLS_PER_SLOT = 14


class PlacementInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    positions: np.ndarray  # (K, 2) metres
    gateway: int
    links: tuple  # ordered ((s, d), ...)
    parent: tuple  # parent[n] = next hop toward the gateway (-1 for gateway)
    area_side: float
    seed: int

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_links(self) -> int:
        return len(self.links)

    def distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def link_index(self, s: int, d: int) -> int:
        return self.links.index((s, d))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "area_side": self.area_side,
            "gateway": self.gateway,
            "nodes": [
                {"id": i, "x": float(x), "y": float(y), "parent": int(self.parent[i])}
                for i, (x, y) in enumerate(self.positions)
            ],
            "links": [{"index": j, "src": s, "dst": d} for j, (s, d) in enumerate(self.links)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        nodes = sorted(doc["nodes"], key=lambda n: n["id"])
        links = sorted(doc["links"], key=lambda l: l["index"])
        return cls(
            positions=np.array([[n["x"], n["y"]] for n in nodes], dtype=float),
            gateway=int(doc["gateway"]),
            links=tuple((int(l["src"]), int(l["dst"])) for l in links),
            parent=tuple(int(n["parent"]) for n in nodes),
            area_side=float(doc["area_side"]),
            seed=int(doc["seed"]),
        )


@dataclass(frozen=True)
class DemandSet:
    """Per-link traffic demand; arrays are aligned with ``Topology.links``."""

    demand_bits: np.ndarray
    rate_bits_per_slot: np.ndarray
    qam_order: np.ndarray
    sinr_threshold: np.ndarray  # linear
    block_slots: int = 1
    period_slots: int = 1
    required_slots: np.ndarray = field(init=False)

    def __post_init__(self):
        tau = self.block_slots
        req = np.ceil(self.demand_bits / (self.rate_bits_per_slot * tau)).astype(int)
        object.__setattr__(self, "required_slots", req)

    def to_dict(self) -> dict:
        return {
            "block_slots": self.block_slots,
            "period_slots": self.period_slots,
            "demands": [
                {
                    "link": j,
                    "demand_bits": float(self.demand_bits[j]),
                    "rate_bits_per_slot": float(self.rate_bits_per_slot[j]),
                    "qam_order": int(self.qam_order[j]),
                    "sinr_threshold": float(self.sinr_threshold[j]),
                    "required_slots": int(self.required_slots[j]),
                }
                for j in range(len(self.demand_bits))
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DemandSet":
        rows = sorted(doc["demands"], key=lambda r: r["link"])
        return cls(
            demand_bits=np.array([r["demand_bits"] for r in rows]),
            rate_bits_per_slot=np.array([r["rate_bits_per_slot"] for r in rows]),
            qam_order=np.array([r["qam_order"] for r in rows], dtype=int),
            sinr_threshold=np.array([r["sinr_threshold"] for r in rows]),
            block_slots=int(doc.get("block_slots", 1)),
            period_slots=int(doc.get("period_slots", 1)),
        )


def _place_nodes(rng, num_nodes, side, min_dist, max_dist, max_attempts):
    attempts = 0
    while True:
        pts = []
        stalled = 0
        while len(pts) < num_nodes:
            if attempts >= max_attempts:
                raise PlacementInfeasible(
                    f"could not place {num_nodes} nodes in a {side} m field with "
                    f"pairwise distances in [{min_dist}, {max_dist}] m after {attempts} draws"
                )
            attempts += 1
            cand = rng.uniform(0.0, side, size=2)
            if pts:
                d = np.linalg.norm(np.asarray(pts) - cand, axis=1)
                if d.min() < min_dist or d.max() > max_dist:
                    stalled += 1
                    if stalled > 200:
                        break  # restart from scratch
                    continue
            pts.append(cand)
            stalled = 0
        if len(pts) == num_nodes:
            return np.asarray(pts)


def route_cost(dist, cost_exponent: float = 2.0):
    return dist ** cost_exponent


def compute_routes(positions, gateway: int, cost_exponent: float = 2.0):
    """Dijkstra over the complete graph, edge cost ``distance**cost_exponent``.

    Returns ``(parent, cost)`` where ``parent[n]`` is n's next hop toward the
    gateway (``-1`` at the gateway) and ``cost[n]`` the path cost.
    With exponent 1 every node would route directly (triangle inequality),
    hence the path-loss-like default of 2.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    w = route_cost(np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1), cost_exponent)
    cost = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=int)
    cost[gateway] = 0.0
    done = np.zeros(n, dtype=bool)
    heap = [(0.0, gateway)]
    while heap:
        c, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v in range(n):
            if done[v] or v == u:
                continue
            nc = c + w[u, v]
            if nc < cost[v] - 1e-12:
                cost[v] = nc
                parent[v] = u
                heapq.heappush(heap, (nc, v))
    return parent, cost


def tree_links(parent, gateway: int):
    """Both directions of each tree edge, ordered by node id: (child->parent, parent->child)."""
    links = []
    for n, p in enumerate(parent):
        if n == gateway:
            continue
        links.append((n, int(p)))
        links.append((int(p), n))
    return tuple(links)


def generate_topology(
    seed: int,
    num_nodes: int,
    area_side: float = 100.0,
    min_dist: float = 15.0,
    max_dist: float = 100.0,
    min_density: float = 0.0,
    cost_exponent: float = 2.0,
    max_attempts: int = 100_000,
) -> Topology:
    """Random placement by rejection sampling, gateway nearest the field centre,
    shortest-path routing tree. ``min_density`` is in BSs per km^2."""
    if num_nodes < 1:
        raise ValueError("need at least one node")
    if min_dist > max_dist:
        raise PlacementInfeasible("min_dist exceeds max_dist")
    density = num_nodes / (area_side / 1000.0) ** 2
    if density < min_density:
        raise PlacementInfeasible(
            f"{num_nodes} nodes in {area_side} m square gives {density:.0f}/km^2 < {min_density}"
        )
    rng = np.random.default_rng(seed)
    pos = _place_nodes(rng, num_nodes, area_side, min_dist, max_dist, max_attempts)
    centre = np.array([area_side / 2, area_side / 2])
    gateway = int(np.argmin(np.linalg.norm(pos - centre, axis=1)))
    parent, _ = compute_routes(pos, gateway, cost_exponent)
    return Topology(
        positions=pos,
        gateway=gateway,
        links=tree_links(parent, gateway),
        parent=tuple(int(p) for p in parent),
        area_side=float(area_side),
        seed=int(seed),
    )


def path_to_gateway(topology: Topology, node: int) -> list:
    path = [node]
    while path[-1] != topology.gateway:
        path.append(topology.parent[path[-1]])
        if len(path) > topology.num_nodes:
            raise RuntimeError("routing loop")
    return path


def node_loads(links, required_slots, num_nodes):
    """Slots each node must transmit and receive over the period."""
    tx = np.zeros(num_nodes, dtype=int)
    rx = np.zeros(num_nodes, dtype=int)
    for (s, d), r in zip(links, required_slots):
        tx[s] += r
        rx[d] += r
    return tx, rx


def slots_feasible(links, required_slots, num_nodes, period_slots) -> bool:
    """Half-duplex-per-direction slot count check.

    Links form a bipartite (transmit side, receive side) multigraph; a proper
    edge colouring with ``period_slots`` colours exists iff no node's transmit
    or receive load exceeds the period (Konig's edge-colouring theorem).
    """
    tx, rx = node_loads(links, required_slots, num_nodes)
    return bool(tx.max(initial=0) <= period_slots and rx.max(initial=0) <= period_slots)


def assign_demands(
    topology: Topology,
    seed: int,
    period_slots: int,
    mcs_table: dict | None = None,
    qam_orders=None,
    max_slots: int | None = None,
    subcarriers: int = 1024,
    block_slots: int = 1,
) -> DemandSet:
    """Random per-link demands in whole slots, trimmed until the period can hold them.

    QAM orders are drawn uniformly from ``qam_orders`` (default: every key of
    the MCS table); the SINR threshold follows from the table.
    """
    if period_slots < 1:
        raise ValueError("period_slots must be >= 1")
    table = MCS_TABLE_DB if mcs_table is None else mcs_table
    orders = sorted(table) if qam_orders is None else list(qam_orders)
    rng = np.random.default_rng([seed, 0xD3]) if seed is not None else np.random.default_rng()
    n = topology.num_links
    hi = period_slots if max_slots is None else min(max_slots, period_slots)
    slots = rng.integers(1, hi + 1, size=n)
    # trim the heaviest link at any overloaded node until the period fits
    while not slots_feasible(topology.links, slots, topology.num_nodes, period_slots):
        tx, rx = node_loads(topology.links, slots, topology.num_nodes)
        worst = int(np.argmax(np.maximum(tx, rx)))
        use_tx = tx[worst] >= rx[worst]
        cand = [j for j, (s, d) in enumerate(topology.links) if (s if use_tx else d) == worst]
        j = max(cand, key=lambda j: (slots[j], -j))
        if slots[j] <= 1:
            raise ValueError("period too short for one slot per link")
        slots[j] -= 1
    qam = rng.choice(orders, size=n)
    rate = np.log2(qam) * subcarriers * OFDM_SYMBOLS_PER_SLOT
    # a demand that needs exactly `slots` blocks: (slots-1, slots] * R * tau
    frac = rng.uniform(0.05, 1.0, size=n)
    bits = (slots - 1 + frac) * rate * block_slots
    gamma = 10.0 ** (np.array([table[int(q)] for q in qam]) / 10.0)
    return DemandSet(
        demand_bits=bits,
        rate_bits_per_slot=rate.astype(float),
        qam_order=qam.astype(int),
        sinr_threshold=gamma,
        block_slots=block_slots,
        period_slots=period_slots,
    )
