"""Scenario generation: structured planted-tree layouts, random placements,
and the real-world city-latency fixture."""
from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .domain import (
    Edge,
    MulticastTree,
    NetworkTopology,
    NodeId,
    NodeKind,
    SessionConfig,
    client,
    sfu,
)


class UnknownCity(KeyError):
    pass


class MissingLatency(KeyError):
    pass


STRUCTURED_SIZES = {
    "small": (3, 5),     # (SFUs, clients incl. source)
    "medium": (7, 11),
    "large": (10, 50),
}

# receivers per cluster; clusters use one SFU each behind the gateway
_CLUSTER_PLANS = {
    "small": [2, 2],
    "medium": [2, 2, 2, 2, 2],          # plus one far decoy SFU
    "large": [6, 6, 6, 6, 5, 5, 5, 5, 5],
}

STRUCTURED_MAX_LAYERS = 3
RANDOM_MAX_LAYERS = 5
RANDOM_AREA = 600.0
DEFAULT_ALPHA = 0.7


@dataclass
class Scenario:
    name: str
    topo: NetworkTopology
    configs: dict[NodeId, SessionConfig]       # one per source
    planted: Optional[MulticastTree] = None
    cities: Optional[dict[NodeId, str]] = None


@dataclass
class ScenarioSpec:
    family: str                                 # structured-small|structured-medium|structured-large|random|real-world
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    trigger_ms: float = 5000.0
    rounds: int = 300
    sources: tuple[str, ...] = ()               # node ids ("c0") or city names
    n_sfus: int = 10                            # random family only
    n_clients: int = 50


def gen_structured(size: str, seed: int, alpha: float = DEFAULT_ALPHA):
    """Planted-tree layout: a gateway SFU next to the source and client
    clusters placed exactly on rays through their serving SFU, so relaying
    through the cluster SFU adds no latency while the gateway's budget makes
    the planted tree the unique feasible optimum.

    Returns (topo, config, planted_tree).
    """
    if size not in STRUCTURED_SIZES:
        raise ValueError(f"unknown structured size {size!r}")
    rng = random.Random(f"structured:{size}:{seed}")
    plan = _CLUSTER_PLANS[size]
    n_sfus, n_clients = STRUCTURED_SIZES[size]
    n_receivers = n_clients - 1
    assert sum(plan) == n_receivers

    q_max = STRUCTURED_MAX_LAYERS
    source = client(0)
    gateway = sfu(0)
    positions: dict[NodeId, tuple[float, float]] = {}
    gx, gy = 500.0, 100.0
    positions[source] = (gx, gy - 40.0)
    positions[gateway] = (gx, gy)

    span = math.radians(160.0)
    start = math.radians(190.0)
    k = len(plan)
    demands: dict[NodeId, int] = {}
    clusters: dict[NodeId, list[NodeId]] = {}
    ci = 1
    for idx, csize in enumerate(plan):
        frac = 0.5 if k == 1 else idx / (k - 1)
        theta = start + frac * span + math.radians(rng.uniform(-3.0, 3.0))
        radius = 350.0 + rng.uniform(-15.0, 15.0)
        ux, uy = math.cos(theta), math.sin(theta)
        s = sfu(idx + 1)
        positions[s] = (gx + radius * ux, gy + radius * uy)
        members = []
        for j in range(csize):
            off = 50.0 + 40.0 * j + rng.uniform(-8.0, 8.0)
            c = client(ci)
            ci += 1
            positions[c] = (gx + (radius + off) * ux, gy + (radius + off) * uy)
            demands[c] = rng.choice([2, 3])
            members.append(c)
        clusters[s] = members

    sfus = [gateway] + sorted(clusters)
    if size == "medium":
        decoy = sfu(len(sfus))
        positions[decoy] = (gx + 1100.0, gy + 900.0)
        sfus.append(decoy)

    bandwidths = {}
    cluster_max = {s: max(demands[c] for c in cs) for s, cs in clusters.items()}
    bandwidths[gateway] = sum(cluster_max.values())
    for s, cs in clusters.items():
        bandwidths[s] = max(sum(demands[c] for c in cs), n_receivers)
    if size == "medium":
        bandwidths[sfus[-1]] = n_receivers

    receivers = tuple(sorted(demands))
    # the source bootstraps at the nearest SFU able to host the whole session;
    # that is the gateway when its budget covers one edge per receiver
    initial = gateway if bandwidths[gateway] >= n_receivers else min(
        (s for s in clusters if bandwidths[s] >= n_receivers),
        key=lambda s: (math.dist(positions[source], positions[s]), s),
    )
    config = SessionConfig(
        source=source,
        clients=receivers,
        demands=demands,
        sfus=tuple(sfus),
        bandwidths=bandwidths,
        max_layers=q_max,
        alpha=alpha,
        initial_sfu=initial,
    )
    topo = NetworkTopology.from_positions(positions)

    edges = [Edge(source, gateway, q_max)]
    resp: dict[NodeId, frozenset[NodeId]] = {gateway: frozenset(receivers)}
    for s in sorted(clusters):
        edges.append(Edge(gateway, s, cluster_max[s]))
        resp[s] = frozenset(clusters[s])
        for c in sorted(clusters[s]):
            edges.append(Edge(s, c, demands[c]))
    planted = MulticastTree(source, tuple(edges), resp)
    return topo, config, planted


def gen_random(n_sfus: int, n_clients: int, seed: int, alpha: float = DEFAULT_ALPHA):
    """Uniform node placement on the plane; bandwidths sized so no single SFU
    can carry the full demand while the pool comfortably can."""
    if n_sfus < 1 or n_clients < 2:
        raise ValueError("need at least one SFU and two clients")
    rng = random.Random(f"random:{n_sfus}:{n_clients}:{seed}")
    positions: dict[NodeId, tuple[float, float]] = {}

    def place(node: NodeId):
        while True:
            p = (rng.uniform(0, RANDOM_AREA), rng.uniform(0, RANDOM_AREA))
            if all(math.dist(p, q) >= 10.0 for q in positions.values()):
                positions[node] = p
                return

    clients_all = [client(i) for i in range(n_clients)]
    sfus_all = [sfu(i) for i in range(n_sfus)]
    for n in clients_all + sfus_all:
        place(n)

    source = clients_all[0]
    receivers = clients_all[1:]
    demands = {c: rng.randint(1, RANDOM_MAX_LAYERS) for c in receivers}
    total_demand = sum(demands.values())
    floor = len(receivers)
    b = max(math.ceil(total_demand * 1.5 / n_sfus), floor)
    bandwidths = {s: b for s in sfus_all}
    initial = min(sfus_all, key=lambda s: (math.dist(positions[source], positions[s]), s))
    config = SessionConfig(
        source=source,
        clients=tuple(receivers),
        demands=demands,
        sfus=tuple(sfus_all),
        bandwidths=bandwidths,
        max_layers=RANDOM_MAX_LAYERS,
        alpha=alpha,
        initial_sfu=initial,
    )
    return NetworkTopology.from_positions(positions), config


# ---------------------------------------------------------------------------
# Real-world fixture
# ---------------------------------------------------------------------------

def _default_fixture(name: str) -> str:
    return resources.files("moray.data").joinpath(name).read_text()


def load_real_world(
    latency_csv: Optional[str] = None,
    roles_csv: Optional[str] = None,
    alpha: float = DEFAULT_ALPHA,
):
    """City-RTT topology with roles (sfu/client). Returns (topo, config,
    cities) where cities maps node ids back to city names."""
    lat_text = latency_csv if latency_csv is not None else _default_fixture("city_rtt.csv")
    roles_text = roles_csv if roles_csv is not None else _default_fixture("city_roles.csv")

    roles: list[tuple[str, str]] = []
    for row in csv.DictReader(roles_text.splitlines()):
        roles.append((row["city"].strip(), row["role"].strip().lower()))
    cities_by_role = {"client": [], "sfu": []}
    for city_name, role in roles:
        if role not in cities_by_role:
            raise ValueError(f"unknown role {role!r} for {city_name}")
        cities_by_role[role].append(city_name)

    nodes: dict[str, NodeId] = {}
    cities: dict[NodeId, str] = {}
    for i, city_name in enumerate(cities_by_role["client"]):
        nodes[city_name] = client(i)
        cities[nodes[city_name]] = city_name
    for i, city_name in enumerate(cities_by_role["sfu"]):
        nodes[city_name] = sfu(i)
        cities[nodes[city_name]] = city_name

    latency: dict[tuple[NodeId, NodeId], float] = {}
    for row in csv.DictReader(lat_text.splitlines()):
        a, b = row["city_a"].strip(), row["city_b"].strip()
        if a not in nodes or b not in nodes:
            raise UnknownCity(f"latency row references unknown city {a}/{b}")
        key = (nodes[a], nodes[b])
        ms = float(row["rtt_ms"])
        if (key[1], key[0]) in latency and latency[(key[1], key[0])] != ms:
            raise ValueError(f"conflicting latencies for {a}-{b}")
        latency[key] = ms
    all_nodes = sorted(nodes.values())
    for i, a in enumerate(all_nodes):
        for b in all_nodes[i + 1 :]:
            if (a, b) not in latency and (b, a) not in latency:
                raise MissingLatency(f"{cities[a]}-{cities[b]}")
    topo = NetworkTopology(all_nodes, latency)

    clients_all = sorted(n for n in all_nodes if n.kind == NodeKind.CLIENT)
    sfus_all = sorted(n for n in all_nodes if n.kind == NodeKind.SFU)
    source = clients_all[0]
    receivers = tuple(c for c in clients_all if c != source)
    demands = {c: 3 for c in receivers}
    bandwidths = {s: 24 for s in sfus_all}
    initial = min(sfus_all, key=lambda s: (topo.latency(source, s), s))
    config = SessionConfig(
        source=source,
        clients=receivers,
        demands=demands,
        sfus=tuple(sfus_all),
        bandwidths=bandwidths,
        max_layers=3,
        alpha=alpha,
        initial_sfu=initial,
    )
    return topo, config, cities


# ---------------------------------------------------------------------------
# Multi-source session building
# ---------------------------------------------------------------------------

def configs_for_sources(
    topo: NetworkTopology,
    base: SessionConfig,
    sources: list[NodeId],
) -> dict[NodeId, SessionConfig]:
    """Per-source sessions over one node population. Each SFU's upload budget
    is split evenly across the concurrent sources."""
    if not sources:
        sources = [base.source]
    n = len(sources)
    all_clients = sorted(set(base.clients) | {base.source})
    out: dict[NodeId, SessionConfig] = {}
    for src in sources:
        if src not in all_clients:
            raise ValueError(f"source {src} is not a client node")
        receivers = tuple(c for c in all_clients if c != src)
        demands = {c: base.demands.get(c, base.max_layers) for c in receivers}
        bandwidths = {s: base.bandwidths[s] // n for s in base.sfus}
        initial = min(base.sfus, key=lambda s: (topo.latency(src, s), s))
        out[src] = SessionConfig(
            source=src,
            clients=receivers,
            demands=demands,
            sfus=base.sfus,
            bandwidths=bandwidths,
            max_layers=base.max_layers,
            alpha=base.alpha,
            initial_sfu=initial,
        )
    return out


def build_scenario(spec: ScenarioSpec) -> Scenario:
    planted = None
    cities = None
    if spec.family.startswith("structured-"):
        size = spec.family.split("-", 1)[1]
        topo, config, planted = gen_structured(size, spec.seed, spec.alpha)
    elif spec.family == "random":
        topo, config = gen_random(spec.n_sfus, spec.n_clients, spec.seed, spec.alpha)
    elif spec.family == "real-world":
        topo, config, cities = load_real_world(alpha=spec.alpha)
    else:
        raise ValueError(f"unknown scenario family {spec.family!r}")

    sources = [_resolve_node(tok, cities) for tok in spec.sources]
    if not sources:
        sources = [config.source]
    configs = configs_for_sources(topo, config, sources)
    return Scenario(spec.family, topo, configs, planted, cities)


def _resolve_node(token: str, cities: Optional[dict[NodeId, str]]) -> NodeId:
    token = token.strip()
    if cities:
        for node, name in cities.items():
            if name.lower() == token.lower():
                return node
    return NodeId.parse(token)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def save_scenario(
    path: str,
    topo: NetworkTopology,
    config: SessionConfig,
    cities: Optional[dict[NodeId, str]] = None,
) -> None:
    nodes = []
    for n in sorted(topo.nodes):
        entry: dict = {"id": str(n), "kind": "client" if n.kind == NodeKind.CLIENT else "sfu"}
        if cities and n in cities:
            entry["city"] = cities[n]
        if topo.positions and n in topo.positions:
            entry["x"], entry["y"] = topo.positions[n]
        if n in config.bandwidths:
            entry["bandwidth"] = config.bandwidths[n]
        if n in config.demands:
            entry["demand"] = config.demands[n]
        nodes.append(entry)
    lats = []
    ns = sorted(topo.nodes)
    for i, a in enumerate(ns):
        for b in ns[i + 1 :]:
            lats.append({"a": str(a), "b": str(b), "ms": topo.latency(a, b)})
    doc = {
        "nodes": nodes,
        "latencies": lats,
        "source": str(config.source),
        "alpha": config.alpha,
        "Q": config.max_layers,
        "initial_sfu": str(config.initial_sfu),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_scenario(path: str) -> tuple[NetworkTopology, SessionConfig, dict[NodeId, str]]:
    with open(path) as fh:
        doc = json.load(fh)
    positions = {}
    cities = {}
    demands = {}
    bandwidths = {}
    nodes = []
    for entry in doc["nodes"]:
        n = NodeId.parse(entry["id"])
        nodes.append(n)
        if "x" in entry:
            positions[n] = (entry["x"], entry["y"])
        if "city" in entry:
            cities[n] = entry["city"]
        if "bandwidth" in entry:
            bandwidths[n] = entry["bandwidth"]
        if "demand" in entry:
            demands[n] = entry["demand"]
    latency = {}
    for row in doc["latencies"]:
        latency[(NodeId.parse(row["a"]), NodeId.parse(row["b"]))] = float(row["ms"])
    topo = NetworkTopology(nodes, latency, positions or None)
    source = NodeId.parse(doc["source"])
    receivers = tuple(sorted(demands))
    config = SessionConfig(
        source=source,
        clients=receivers,
        demands=demands,
        sfus=tuple(sorted(bandwidths)),
        bandwidths=bandwidths,
        max_layers=int(doc["Q"]),
        alpha=float(doc["alpha"]),
        initial_sfu=NodeId.parse(doc["initial_sfu"]),
    )
    return topo, config, cities
