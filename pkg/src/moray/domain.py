"""Shared vocabulary types and pure functions for trees, latencies, layers and rewards."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional


class NodeKind(IntEnum):
    CLIENT = 0
    SFU = 1


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int

    def __str__(self) -> str:
        return ("c" if self.kind == NodeKind.CLIENT else "s") + str(self.index)

    @staticmethod
    def parse(text: str) -> "NodeId":
        text = text.strip()
        if len(text) < 2 or text[0] not in ("c", "s"):
            raise ValueError(f"bad node id {text!r}, expected e.g. 'c0' or 's2'")
        kind = NodeKind.CLIENT if text[0] == "c" else NodeKind.SFU
        return NodeId(kind, int(text[1:]))


def client(index: int) -> NodeId:
    return NodeId(NodeKind.CLIENT, index)


def sfu(index: int) -> NodeId:
    return NodeId(NodeKind.SFU, index)


class NotInTree(KeyError):
    pass


class InvalidDemand(ValueError):
    pass


class MissingLatency(KeyError):
    pass


class NetworkTopology:
    """Full pairwise latency matrix over the session's nodes.

    The matrix is the single source of truth; 2D positions are optional
    provenance kept when latencies were derived from Euclidean distances.
    """

    def __init__(
        self,
        nodes: list[NodeId],
        latency: dict[tuple[NodeId, NodeId], float],
        positions: Optional[dict[NodeId, tuple[float, float]]] = None,
    ):
        self.nodes = list(nodes)
        self._index = {n: i for i, n in enumerate(self.nodes)}
        if len(self._index) != len(self.nodes):
            raise ValueError("duplicate node ids in topology")
        self.positions = dict(positions) if positions else None
        self._lat: dict[tuple[NodeId, NodeId], float] = {}
        for (a, b), ms in latency.items():
            if ms < 0:
                raise ValueError(f"negative latency for {a}-{b}")
            self._lat[(a, b)] = float(ms)
            self._lat[(b, a)] = float(ms)
        for n in self.nodes:
            self._lat[(n, n)] = 0.0
        for a in self.nodes:
            for b in self.nodes:
                if (a, b) not in self._lat:
                    raise MissingLatency(f"no latency for pair {a}-{b}")

    @staticmethod
    def from_positions(
        positions: dict[NodeId, tuple[float, float]], scale: float = 1.0
    ) -> "NetworkTopology":
        if scale <= 0:
            raise ValueError("scale must be positive")
        nodes = sorted(positions)
        lat = {}
        for i, a in enumerate(nodes):
            for b in nodes[i + 1 :]:
                lat[(a, b)] = scale * math.dist(positions[a], positions[b])
        return NetworkTopology(nodes, lat, positions=positions)

    def latency(self, a: NodeId, b: NodeId) -> float:
        try:
            return self._lat[(a, b)]
        except KeyError:
            raise MissingLatency(f"no latency for pair {a}-{b}") from None

    def contains(self, node: NodeId) -> bool:
        return node in self._index


@dataclass(frozen=True)
class SessionConfig:
    """One source's streaming session: receivers with layer demands, SFU pool, knobs."""

    source: NodeId
    clients: tuple[NodeId, ...]            # receiving clients, source excluded
    demands: dict[NodeId, int]             # client -> q*(c), in 1..max_layers
    sfus: tuple[NodeId, ...]
    bandwidths: dict[NodeId, int]          # sfu -> upload budget in layer-units
    max_layers: int                        # Q, layers emitted by the source
    alpha: float
    initial_sfu: NodeId

    def __post_init__(self):
        if self.max_layers <= 0:
            raise ValueError("max_layers must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.initial_sfu not in self.sfus:
            raise ValueError("initial_sfu not in sfu set")
        for c in self.clients:
            q = self.demands.get(c, 0)
            if not (0 < q <= self.max_layers):
                raise ValueError(f"demand for {c} must be in 1..{self.max_layers}")
        for s in self.sfus:
            if self.bandwidths.get(s, -1) < 0:
                raise ValueError(f"bandwidth for {s} must be >= 0")


@dataclass(frozen=True)
class Edge:
    parent: NodeId
    child: NodeId
    layers: int


@dataclass(frozen=True)
class MulticastTree:
    """Rooted distribution tree for one source, with per-edge layer counts
    and the responsibility sets declared by the forwarding nodes."""

    source: NodeId
    edges: tuple[Edge, ...]
    responsibility: dict[NodeId, frozenset[NodeId]] = field(default_factory=dict)

    def parent_of(self, node: NodeId) -> Optional[Edge]:
        found = None
        for e in self.edges:
            if e.child == node:
                if found is not None:
                    raise ValueError(f"{node} has multiple parents")
                found = e
        return found

    def children(self, node: NodeId) -> list[Edge]:
        return [e for e in self.edges if e.parent == node]

    def signature(self) -> tuple:
        """Canonical hashable form used for convergence detection and equality."""
        edges = tuple(sorted((e.parent, e.child, e.layers) for e in self.edges))
        resp = tuple(
            sorted((s, tuple(sorted(cs))) for s, cs in self.responsibility.items() if cs)
        )
        return (self.source, edges, resp)


@dataclass(frozen=True)
class ClientFeedback:
    client: NodeId
    layers_received: int
    echoed_timestamp: float
    origin_sfu: NodeId
    round_no: int


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: Optional[NodeId] = None
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}({self.subject}) {self.detail}".rstrip()


def path_to_root(tree: MulticastTree, node: NodeId) -> list[Edge]:
    """Edges from the root down to `node`. Raises NotInTree for unknown nodes."""
    by_child = {}
    for e in tree.edges:
        by_child.setdefault(e.child, e)
    if node != tree.source and node not in by_child:
        raise NotInTree(f"{node} not in tree")
    path = []
    cur = node
    seen = set()
    while cur != tree.source:
        if cur in seen:
            raise NotInTree(f"cycle reaching {node}")
        seen.add(cur)
        e = by_child.get(cur)
        if e is None:
            raise NotInTree(f"{node} not connected to source")
        path.append(e)
        cur = e.parent
    path.reverse()
    return path


def path_latency(tree: MulticastTree, topo: NetworkTopology, client: NodeId) -> float:
    """One-way latency of the unique root->client path, summing link latencies."""
    return sum(topo.latency(e.parent, e.child) for e in path_to_root(tree, client))


def delivered_layers(tree: MulticastTree, client: NodeId) -> int:
    """Layer count on the client's incoming edge (the minimum along its path,
    by the tree's monotonicity invariant)."""
    path = path_to_root(tree, client)
    if not path:
        raise NotInTree(f"{client} is the source")
    return path[-1].layers


def client_reward(delay: float, layers: int, demand: int, alpha: float) -> float:
    """Per-client utility: negative delay plus the quality-preference term."""
    if demand <= 0:
        raise InvalidDemand("demand must be positive")
    return -delay + alpha * layers / demand


def validate_tree(
    tree: MulticastTree, config: SessionConfig, topo: NetworkTopology
) -> list[Violation]:
    """Check every structural invariant; returns one violation per breakage."""
    out: list[Violation] = []
    sfus = set(config.sfus)
    clients = set(config.clients)

    parents: dict[NodeId, list[Edge]] = {}
    for e in tree.edges:
        parents.setdefault(e.child, []).append(e)
        if e.child == tree.source:
            out.append(Violation("EdgeIntoSource", e.child))
        if e.parent in clients or (
            e.parent.kind == NodeKind.CLIENT and e.parent != tree.source
        ):
            out.append(Violation("ClientNotLeaf", e.parent, "client has outgoing edge"))
        if e.layers <= 0:
            out.append(Violation("NonPositiveLayers", e.child))
        if not (topo.contains(e.parent) and topo.contains(e.child)):
            out.append(Violation("UnknownNode", e.child))

    for node, es in parents.items():
        if len(es) > 1:
            out.append(Violation("MultipleParents", node))
    if out:
        return out

    # reachability from the source; anything with a parent must trace to root
    inflow: dict[NodeId, int] = {tree.source: config.max_layers}
    frontier = [tree.source]
    reached = {tree.source}
    while frontier:
        nxt = []
        for p in frontier:
            for e in tree.edges:
                if e.parent != p:
                    continue
                if e.child in reached:
                    out.append(Violation("NotATree", e.child, "revisited node"))
                    return out
                reached.add(e.child)
                if e.layers > inflow[p]:
                    out.append(
                        Violation(
                            "LayerMonotonicity",
                            e.child,
                            f"edge carries {e.layers} > parent inflow {inflow[p]}",
                        )
                    )
                inflow[e.child] = e.layers
                nxt.append(e.child)
        frontier = nxt
    for node in parents:
        if node not in reached:
            out.append(Violation("NotATree", node, "detached from source"))

    # source sends to exactly one SFU
    roots = [e for e in tree.edges if e.parent == tree.source]
    if len(roots) != 1 or roots[0].child not in sfus:
        out.append(Violation("SourceGateway", tree.source, "source must feed exactly one SFU"))

    for c in clients:
        if c not in reached:
            out.append(Violation("MissingClient", c))
        else:
            q = inflow[c]
            if q > config.demands[c]:
                out.append(Violation("OverDelivery", c, f"{q} > demand {config.demands[c]}"))

    for s in sfus:
        sent = sum(e.layers for e in tree.edges if e.parent == s)
        if sent > config.bandwidths[s]:
            out.append(
                Violation("BandwidthExceeded", s, f"{sent} > budget {config.bandwidths[s]}")
            )

    ancestors: dict[NodeId, set[NodeId]] = {}
    for node in reached:
        try:
            ancestors[node] = {e.parent for e in path_to_root(tree, node)}
        except NotInTree:
            ancestors[node] = set()
    for s, cs in tree.responsibility.items():
        for c in cs:
            if c not in reached or s not in ancestors.get(c, set()):
                out.append(Violation("ResponsibilityNotAncestor", s, f"for client {c}"))
    return out


def aggregate_reward(
    tree: MulticastTree, config: SessionConfig, topo: NetworkTopology
) -> float:
    """Session objective: sum over receivers of -path latency + alpha*q/q*."""
    total = 0.0
    for c in config.clients:
        total += client_reward(
            path_latency(tree, topo, c),
            delivered_layers(tree, c),
            config.demands[c],
            config.alpha,
        )
    return total
