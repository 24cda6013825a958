"""Comparison schemes: nearest-server star and the global-optimum integer program.

The integer program models edge-use indicators, per-edge layer counts,
responsibility routing indicators, per-client delivered layers and path
latencies. Acyclicity is enforced lazily: solve without tree constraints,
detect cycles in the incumbent, add the violated constraint, repeat.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .domain import (
    Edge,
    MulticastTree,
    NetworkTopology,
    NodeId,
    NodeKind,
    SessionConfig,
    aggregate_reward,
)


class NoServer(ValueError):
    pass


class NoSolution(RuntimeError):
    pass


class RefusedTooLarge(ValueError):
    pass


def _fair_split(budget: int, caps: list[int]) -> list[int]:
    """At least one layer per edge, then round-robin up to per-edge caps."""
    n = len(caps)
    if budget < n:
        raise NoSolution(f"budget {budget} below edge count {n}")
    base = budget // n
    out = [max(1, min(base, cap)) for cap in caps]
    remaining = budget - sum(out)
    progress = True
    while remaining > 0 and progress:
        progress = False
        for i in range(n):
            if remaining <= 0:
                break
            if out[i] < caps[i]:
                out[i] += 1
                remaining -= 1
                progress = True
    return out


def nearest_server_star(
    config: SessionConfig, topo: NetworkTopology, hub: Optional[NodeId] = None
) -> MulticastTree:
    """Single-hub tree: the SFU nearest the source serves every client."""
    if not config.sfus:
        raise NoServer("no SFU available")
    if hub is None:
        hub = min(config.sfus, key=lambda s: (topo.latency(config.source, s), s))
    clients = sorted(config.clients)
    caps = [min(config.demands[c], config.max_layers) for c in clients]
    alloc = _fair_split(config.bandwidths[hub], caps)
    edges = [Edge(config.source, hub, config.max_layers)]
    edges += [Edge(hub, c, q) for c, q in zip(clients, alloc)]
    return MulticastTree(
        config.source, tuple(edges), {hub: frozenset(clients)}
    )


# ---------------------------------------------------------------------------
# Global-optimum integer program
# ---------------------------------------------------------------------------

@dataclass
class GlobalIpInstance:
    config: SessionConfig
    topo: NetworkTopology

    def build(self):
        cfg = self.config
        c0 = cfg.source
        sfus = sorted(cfg.sfus)
        receivers_c = sorted(cfg.clients)
        senders = sorted(sfus + [c0])
        targets = sorted(sfus + receivers_c)
        arcs = [(i, j) for i in senders for j in targets if i != j]
        arc_idx = {a: k for k, a in enumerate(arcs)}
        A = len(arcs)
        C = len(receivers_c)
        z_idx = {}
        k = 2 * A
        for a in arcs:
            for c in receivers_c:
                z_idx[(a, c)] = k
                k += 1
        q_idx = {c: k + i for i, c in enumerate(receivers_c)}
        k += C
        d_idx = {c: k + i for i, c in enumerate(receivers_c)}
        k += C
        return sfus, receivers_c, senders, targets, arcs, arc_idx, z_idx, q_idx, d_idx, k


def _find_cycles(parent: dict[NodeId, NodeId]) -> list[frozenset[NodeId]]:
    """Cycles in a graph where every node has at most one incoming edge."""
    cycles = []
    color: dict[NodeId, int] = {}
    for start in parent:
        if color.get(start):
            continue
        path = []
        cur = start
        while cur is not None and color.get(cur) is None:
            color[cur] = 1
            path.append(cur)
            cur = parent.get(cur)
        if cur is not None and color.get(cur) == 1:
            cyc = path[path.index(cur):]
            cycles.append(frozenset(cyc))
        for n in path:
            color[n] = 2
    return cycles


def solve_global_optimum(
    config: SessionConfig,
    topo: NetworkTopology,
    time_cutoff: float = 300.0,
    mip_rel_gap: float = 0.0,
) -> tuple[MulticastTree, float, bool]:
    """Maximize total client reward over all feasible multicast trees.

    Returns (tree, objective, optimal_flag); the flag is False when the time
    budget ran out and the best incumbent is returned instead.
    """
    inst = GlobalIpInstance(config, topo)
    sfus, receivers, senders, targets, arcs, arc_idx, z_idx, q_idx, d_idx, nvar = (
        inst.build()
    )
    cfg = config
    c0 = cfg.source
    Q = cfg.max_layers
    x_off = len(arcs)

    obj = np.zeros(nvar)
    for c in receivers:
        obj[d_idx[c]] = 1.0                      # minimize latency
        obj[q_idx[c]] = -cfg.alpha / cfg.demands[c]

    lb = np.zeros(nvar)
    ub = np.ones(nvar)
    integrality = np.zeros(nvar)
    for a in arcs:
        k = arc_idx[a]
        integrality[k] = 1                       # y binary
        integrality[x_off + k] = 1               # x integer
        ub[x_off + k] = Q
    for key, k in z_idx.items():
        integrality[k] = 1
    for c in receivers:
        ub[q_idx[c]] = cfg.demands[c]
        ub[d_idx[c]] = np.inf

    rows, cols, vals, lo, hi = [], [], [], [], []
    r = 0

    def add(coeffs: list[tuple[int, float]], lo_v: float, hi_v: float):
        nonlocal r
        for col, v in coeffs:
            rows.append(r)
            cols.append(col)
            vals.append(v)
        lo.append(lo_v)
        hi.append(hi_v)
        r += 1

    # inflow covers each outgoing edge's layer count (per-edge monotonicity)
    for j in sfus:
        in_arcs = [arc_idx[(i, j)] for i in senders if i != j]
        for t in targets:
            if t == j:
                continue
            coeffs = [(x_off + k, 1.0) for k in in_arcs]
            coeffs.append((x_off + arc_idx[(j, t)], -1.0))
            add(coeffs, 0.0, np.inf)

    # x-y linking
    for a in arcs:
        k = arc_idx[a]
        add([(x_off + k, 1.0), (k, -float(Q))], -np.inf, 0.0)
        add([(x_off + k, 1.0), (k, -1.0)], 0.0, np.inf)

    # sender bandwidth
    for i in sfus:
        coeffs = [
            (x_off + arc_idx[(i, t)], 1.0) for t in targets if t != i
        ]
        add(coeffs, -np.inf, float(cfg.bandwidths[i]))

    # single parent
    for j in targets:
        coeffs = [(arc_idx[(i, j)], 1.0) for i in senders if i != j]
        add(coeffs, -np.inf, 1.0)

    # exactly one serving SFU per client
    for c in receivers:
        coeffs = [(z_idx[((i, c), c)], 1.0) for i in sfus]
        add(coeffs, 1.0, 1.0)

    # responsibility conservation through SFUs
    for j in sfus:
        for c in receivers:
            coeffs = [(z_idx[((i, j), c)], 1.0) for i in senders if i != j]
            coeffs += [(z_idx[((j, t), c)], -1.0) for t in targets if t != j]
            add(coeffs, 0.0, 0.0)

    # used edges must carry responsibility for someone
    for a in arcs:
        coeffs = [(z_idx[(a, c)], 1.0) for c in receivers]
        coeffs.append((arc_idx[a], -1.0))
        add(coeffs, 0.0, np.inf)

    # each node delegates a client to at most one downstream node
    for i in senders:
        for c in receivers:
            coeffs = [(z_idx[((i, t), c)], 1.0) for t in targets if t != i]
            add(coeffs, -np.inf, 1.0)

    # the source hands every client to one gateway SFU
    n_rec = len(receivers)
    for i in sfus:
        for c in receivers:
            coeffs = [(z_idx[((c0, i), cc)], 1.0) for cc in receivers]
            coeffs.append((z_idx[((c0, i), c)], -float(n_rec)))
            add(coeffs, 0.0, 0.0)
    for c in receivers:
        coeffs = [(z_idx[((c0, i), c)], 1.0) for i in sfus]
        add(coeffs, 1.0, 1.0)

    # delegation implies a connection
    for key, k in z_idx.items():
        a, _ = key
        add([(k, 1.0), (arc_idx[a], -1.0)], -np.inf, 0.0)

    # delivered layers and path latency definitions
    for c in receivers:
        coeffs = [(x_off + arc_idx[(i, c)], 1.0) for i in sfus]
        coeffs.append((q_idx[c], -1.0))
        add(coeffs, 0.0, 0.0)
    for c in receivers:
        coeffs = [
            (z_idx[(a, c)], topo.latency(*a)) for a in arcs
        ]
        coeffs.append((d_idx[c], -1.0))
        add(coeffs, 0.0, 0.0)

    base_rows, base_cols, base_vals = rows, cols, vals
    base_lo, base_hi = lo, hi
    base_r = r

    pool: list[frozenset[NodeId]] = []
    seen_pool: set[frozenset[NodeId]] = set()
    deadline = time.monotonic() + time_cutoff
    best: Optional[tuple[MulticastTree, float]] = None
    optimal = False

    while True:
        rows2, cols2, vals2 = list(base_rows), list(base_cols), list(base_vals)
        lo2, hi2 = list(base_lo), list(base_hi)
        rr = base_r
        for T in pool:
            members = sorted(T)
            for i in members:
                for j in members:
                    if i != j and (i, j) in arc_idx:
                        rows2.append(rr)
                        cols2.append(arc_idx[(i, j)])
                        vals2.append(1.0)
            lo2.append(-np.inf)
            hi2.append(float(len(T) - 1))
            rr += 1
        mat = sparse.csc_matrix(
            (vals2, (rows2, cols2)), shape=(rr, nvar)
        )
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        options = {
            "time_limit": float(remaining),
            "presolve": True,
            "mip_rel_gap": float(mip_rel_gap),
        }
        res = milp(
            obj,
            constraints=LinearConstraint(mat, np.array(lo2), np.array(hi2)),
            integrality=integrality,
            bounds=Bounds(lb, ub),
            options=options,
        )
        if res.x is None:
            break
        solved_exact = res.status == 0
        yv = res.x[: len(arcs)]
        parent: dict[NodeId, NodeId] = {}
        for a, k in arc_idx.items():
            if yv[k] > 0.5:
                parent[a[1]] = a[0]
        cycles = _find_cycles(parent)
        if cycles:
            added = False
            for cyc in cycles:
                if cyc not in seen_pool:
                    seen_pool.add(cyc)
                    pool.append(cyc)
                    added = True
            if not added:
                break
            continue
        tree = _extract_tree(cfg, res.x, arcs, arc_idx, x_off, receivers, q_idx)
        value = aggregate_reward(tree, cfg, topo)
        if best is None or value > best[1]:
            best = (tree, value)
        if solved_exact:
            optimal = True
        break

    if best is None:
        raise NoSolution("no incumbent found within the time budget")
    return best[0], best[1], optimal


def _extract_tree(
    cfg: SessionConfig,
    x_sol: np.ndarray,
    arcs,
    arc_idx,
    x_off: int,
    receivers,
    q_idx,
) -> MulticastTree:
    parent: dict[NodeId, tuple[NodeId, int]] = {}
    for a, k in arc_idx.items():
        if x_sol[k] > 0.5:
            parent[a[1]] = (a[0], int(round(x_sol[x_off + k])))
    # keep only branches that reach clients; prune idle relays
    needed: set[NodeId] = set()
    for c in receivers:
        cur = c
        while cur in parent and cur not in needed:
            needed.add(cur)
            cur = parent[cur][0]
    children: dict[NodeId, list[NodeId]] = {}
    for child in needed:
        children.setdefault(parent[child][0], []).append(child)

    # canonical minimal layer counts, bottom-up
    layers: dict[NodeId, int] = {}

    def need_of(node: NodeId) -> int:
        if node.kind == NodeKind.CLIENT:
            return layers[node]
        kids = children.get(node, [])
        return max((layers[k] for k in kids), default=1)

    order: list[NodeId] = []
    stack = [cfg.source]
    while stack:
        n = stack.pop()
        order.append(n)
        stack.extend(children.get(n, []))
    for node in reversed(order):
        if node == cfg.source:
            continue
        if node.kind == NodeKind.CLIENT:
            layers[node] = parent[node][1]
        elif parent[node][0] == cfg.source:
            layers[node] = cfg.max_layers      # the source always emits the full stack
        else:
            layers[node] = max(1, need_of(node))

    edges = tuple(
        Edge(parent[n][0], n, layers[n]) for n in sorted(needed)
    )
    # responsibility mirrors subtree membership
    resp: dict[NodeId, frozenset[NodeId]] = {}
    tree_children: dict[NodeId, list[NodeId]] = {}
    for e in edges:
        tree_children.setdefault(e.parent, []).append(e.child)

    def collect(node: NodeId) -> frozenset[NodeId]:
        acc = set()
        for ch in tree_children.get(node, []):
            if ch.kind == NodeKind.CLIENT:
                acc.add(ch)
            else:
                acc |= collect(ch)
        if node.kind == NodeKind.SFU and acc:
            resp[node] = frozenset(acc)
        return frozenset(acc)

    collect(cfg.source)
    return MulticastTree(cfg.source, edges, resp)


# ---------------------------------------------------------------------------
# Brute-force oracle over tiny instances
# ---------------------------------------------------------------------------

def brute_force_global(
    config: SessionConfig, topo: NetworkTopology, max_nodes: int = 8
) -> tuple[MulticastTree, float]:
    """Exact optimum by enumerating parent functions that form valid trees,
    with exhaustive layer allocation per tree."""
    sfus = sorted(config.sfus)
    receivers = sorted(config.clients)
    if len(sfus) + len(receivers) + 1 > max_nodes:
        raise RefusedTooLarge("instance beyond enumeration budget")
    c0 = config.source
    Q = config.max_layers

    sfu_parent_choices = [[None, c0] + [s for s in sfus if s != j] for j in sfus]
    client_parent_choices = [list(sfus) for _ in receivers]

    best: Optional[tuple[float, tuple, MulticastTree]] = None

    import itertools

    for sfu_parents in itertools.product(*sfu_parent_choices):
        gateway = [s for s, p in zip(sfus, sfu_parents) if p == c0]
        if len(gateway) > 1:
            continue
        parent: dict[NodeId, Optional[NodeId]] = dict(zip(sfus, sfu_parents))
        for client_parents in itertools.product(*client_parent_choices):
            full = dict(parent)
            full.update(zip(receivers, client_parents))
            # every client's chain must reach the source acyclically
            used: set[NodeId] = set()
            ok = True
            for c in receivers:
                chain = []
                cur: Optional[NodeId] = c
                while cur is not None and cur != c0:
                    if cur in chain:
                        ok = False
                        break
                    chain.append(cur)
                    cur = full.get(cur)
                if not ok or cur != c0:
                    ok = False
                    break
                used.update(chain)
            if not ok:
                continue
            # attached SFUs must be used; unused must be detached
            if any(p is not None and s not in used for s, p in zip(sfus, sfu_parents)):
                continue
            used_sfus = [s for s in sfus if s in used]
            if not used_sfus:
                continue
            if sum(1 for s in used_sfus if full[s] == c0) != 1:
                continue

            children: dict[NodeId, list[NodeId]] = {}
            for n in used:
                children.setdefault(full[n], []).append(n)
            lat = {c: _chain_latency(full, topo, c, c0) for c in receivers}
            base_val = -sum(lat.values())

            order = []
            stack = [c0]
            while stack:
                n = stack.pop()
                order.append(n)
                stack.extend(sorted(children.get(n, [])))

            gw = children[c0][0]
            best_alloc = _best_allocation(config, children, order)
            if best_alloc is None:
                continue
            quality, alloc = best_alloc
            value = base_val + quality
            edges = tuple(
                Edge(full[n], n, alloc[n]) for n in sorted(used)
            )
            resp: dict[NodeId, frozenset[NodeId]] = {}

            def collect(node: NodeId) -> frozenset[NodeId]:
                acc = set()
                for ch in children.get(node, []):
                    if ch.kind == NodeKind.CLIENT:
                        acc.add(ch)
                    else:
                        acc |= collect(ch)
                if node.kind == NodeKind.SFU and acc:
                    resp[node] = frozenset(acc)
                return frozenset(acc)

            collect(c0)
            tree = MulticastTree(c0, edges, resp)
            key = tree.signature()
            if best is None or value > best[0] + 1e-12 * max(1, abs(best[0])):
                best = (value, key, tree)
            elif abs(value - best[0]) <= 1e-12 * max(1, abs(best[0])) and key < best[1]:
                best = (value, key, tree)
    if best is None:
        raise NoSolution("no feasible tree")
    return best[2], best[0]


def _chain_latency(parent, topo: NetworkTopology, node: NodeId, c0: NodeId) -> float:
    total = 0.0
    cur = node
    while cur != c0:
        p = parent[cur]
        total += topo.latency(p, cur)
        cur = p
    return total


def _best_allocation(config, children, order):
    """Exhaustive per-tree layer allocation maximizing the quality term."""
    import itertools

    Q = config.max_layers
    alpha = config.alpha
    best_quality = -math.inf
    best_alloc = None
    sfu_nodes = [n for n in order if n.kind == NodeKind.SFU or n == config.source]

    def rec(idx: int, inflow: dict[NodeId, int], alloc: dict[NodeId, int], quality: float):
        nonlocal best_quality, best_alloc
        if idx == len(sfu_nodes):
            if quality > best_quality:
                best_quality = quality
                best_alloc = dict(alloc)
            return
        node = sfu_nodes[idx]
        kids = sorted(children.get(node, []))
        if not kids:
            rec(idx + 1, inflow, alloc, quality)
            return
        cap_in = inflow.get(node, Q)
        budget = (
            config.bandwidths[node]
            if node.kind == NodeKind.SFU
            else Q
        )
        ranges = []
        for k in kids:
            if k.kind == NodeKind.CLIENT:
                ranges.append(range(1, min(config.demands[k], cap_in) + 1))
            else:
                ranges.append(range(1, cap_in + 1))
        for combo in itertools.product(*ranges):
            if sum(combo) > budget:
                continue
            q2 = quality
            for k, lay in zip(kids, combo):
                alloc[k] = lay
                if k.kind == NodeKind.CLIENT:
                    q2 += alpha * lay / config.demands[k]
                else:
                    inflow[k] = lay
            rec(idx + 1, inflow, alloc, q2)
        for k in kids:
            alloc.pop(k, None)
            inflow.pop(k, None)

    rec(0, {}, {}, 0.0)
    if best_alloc is None:
        return None
    return best_quality, best_alloc


# ---------------------------------------------------------------------------
# Instance dump/load (replay format)
# ---------------------------------------------------------------------------

def dump_instance(config: SessionConfig, topo: NetworkTopology) -> str:
    out = io.StringIO()
    nodes = sorted(topo.nodes)
    print(f"maxlayers {config.max_layers}", file=out)
    print(f"alpha {config.alpha!r}", file=out)
    print(f"source {config.source}", file=out)
    print(f"initial {config.initial_sfu}", file=out)
    for n in nodes:
        pos = ""
        if topo.positions and n in topo.positions:
            x, y = topo.positions[n]
            pos = f" {x!r} {y!r}"
        print(f"node {n}{pos}", file=out)
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            print(f"latency {a} {b} {topo.latency(a, b)!r}", file=out)
    for c in sorted(config.clients):
        print(f"demand {c} {config.demands[c]}", file=out)
    for s in sorted(config.sfus):
        print(f"bandwidth {s} {config.bandwidths[s]}", file=out)
    return out.getvalue()


def load_instance(text: str) -> tuple[SessionConfig, NetworkTopology]:
    nodes: list[NodeId] = []
    positions: dict[NodeId, tuple[float, float]] = {}
    latency: dict[tuple[NodeId, NodeId], float] = {}
    demands: dict[NodeId, int] = {}
    bandwidths: dict[NodeId, int] = {}
    max_layers = alpha = source = initial = None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "maxlayers":
            max_layers = int(parts[1])
        elif tag == "alpha":
            alpha = float(parts[1])
        elif tag == "source":
            source = NodeId.parse(parts[1])
        elif tag == "initial":
            initial = NodeId.parse(parts[1])
        elif tag == "node":
            n = NodeId.parse(parts[1])
            nodes.append(n)
            if len(parts) == 4:
                positions[n] = (float(parts[2]), float(parts[3]))
        elif tag == "latency":
            latency[(NodeId.parse(parts[1]), NodeId.parse(parts[2]))] = float(parts[3])
        elif tag == "demand":
            demands[NodeId.parse(parts[1])] = int(parts[2])
        elif tag == "bandwidth":
            bandwidths[NodeId.parse(parts[1])] = int(parts[2])
        else:
            raise ValueError(f"unknown line tag {tag!r}")
    topo = NetworkTopology(nodes, latency, positions or None)
    clients = tuple(sorted(demands))
    sfus = tuple(sorted(bandwidths))
    config = SessionConfig(
        source=source,
        clients=clients,
        demands=demands,
        sfus=sfus,
        bandwidths=bandwidths,
        max_layers=max_layers,
        alpha=alpha,
        initial_sfu=initial,
    )
    return config, topo
