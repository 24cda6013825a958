"""Exact optimizer for a forwarding node's per-round action, with a brute-force oracle.

An action jointly picks, for every responsible client, the downstream node that
will carry its stream (another SFU or a direct connection), plus integer layer
counts per downstream edge. The objective is the model-estimated total client
reward; constraints are edge/assignment consistency, per-edge layer caps from
the inflow, demand caps on direct edges, and the upload budget.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Optional

from .domain import NodeId

REL_TOL = 1e-9


class Infeasible(ValueError):
    pass


class RefusedTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    """assignment: client -> serving downstream node (a relay SFU, or the acting
    node itself for a direct connection). layers: downstream node -> positive
    layer count (keyed by relay for relayed clients, by client for direct ones)."""

    assignment: dict[NodeId, NodeId]
    layers: dict[NodeId, int]

    def key(self) -> tuple:
        assign = tuple(v for _, v in sorted(self.assignment.items()))
        lay = tuple(sorted(self.layers.items()))
        return (assign, lay)

    def downstream(self) -> list[NodeId]:
        return sorted(self.layers)

    def clients_via(self, node: NodeId) -> list[NodeId]:
        return sorted(c for c, v in self.assignment.items() if v == node)


@dataclass(frozen=True)
class ActionInstance:
    """Snapshot of one agent's decision problem for a single round.

    Latency weights already include any exploration bonus (folded in
    subtractively by the caller); quality ratios are in [0, 1].
    """

    self_node: NodeId
    relays: tuple[NodeId, ...]            # candidate downstream SFUs, self excluded
    clients: tuple[NodeId, ...]
    demands: dict[NodeId, int]
    inflow: int                           # layers received from the parent
    bandwidth: int                        # upload budget in layer-units
    alpha: float
    d_relay: dict[tuple[NodeId, NodeId], float] = field(default_factory=dict)
    phi_relay: dict[tuple[NodeId, NodeId], float] = field(default_factory=dict)
    d_self: dict[NodeId, float] = field(default_factory=dict)
    # connect-time capacity advertisements: a relay can take on at most this
    # many clients (its own upload budget bounds its outgoing edges)
    relay_client_cap: Optional[dict[NodeId, int]] = None

    def edge_cap(self) -> int:
        return self.inflow


@dataclass
class SolveResult:
    action: Action
    objective: float
    optimal: bool


def _client_term(inst: ActionInstance, c: NodeId, via: NodeId, layers: int) -> float:
    q_star = inst.demands[c]
    if via == inst.self_node:
        quality = min(layers, q_star) / q_star
        return -inst.d_self[c] + inst.alpha * quality
    quality = min(layers * inst.phi_relay[(via, c)], q_star) / q_star
    return -inst.d_relay[(via, c)] + inst.alpha * quality


def score_action(inst: ActionInstance, action: Action) -> float:
    """Re-score an action term by term, independent of how it was found."""
    total = 0.0
    for c in sorted(inst.clients):
        via = action.assignment[c]
        layers = action.layers[c] if via == inst.self_node else action.layers[via]
        total += _client_term(inst, c, via, layers)
    return total


def check_action(inst: ActionInstance, action: Action) -> list[str]:
    """Consistency check: every client covered, layers positive iff used,
    per-edge cap and budget respected."""
    problems = []
    used = set()
    for c in inst.clients:
        via = action.assignment.get(c)
        if via is None:
            problems.append(f"client {c} unassigned")
            continue
        if via == inst.self_node:
            if action.layers.get(c, 0) <= 0:
                problems.append(f"direct client {c} without layers")
            used.add(c)
        else:
            if via not in inst.relays:
                problems.append(f"client {c} assigned to unknown relay {via}")
            if action.layers.get(via, 0) <= 0:
                problems.append(f"relay {via} used without layers")
            used.add(via)
    for node, q in action.layers.items():
        if q <= 0:
            problems.append(f"non-positive layers on {node}")
        if q > inst.edge_cap():
            problems.append(f"edge to {node} carries {q} > inflow {inst.inflow}")
        if node not in used:
            problems.append(f"layers granted to unused node {node}")
        if node in inst.clients and q > inst.demands[node]:
            problems.append(f"direct edge to {node} exceeds demand")
    total = sum(action.layers.values())
    if total > inst.bandwidth:
        problems.append(f"budget exceeded: {total} > {inst.bandwidth}")
    if inst.relay_client_cap is not None:
        counts: dict[NodeId, int] = {}
        for c, via in action.assignment.items():
            if via != inst.self_node:
                counts[via] = counts.get(via, 0) + 1
        for via, n in counts.items():
            cap = inst.relay_client_cap.get(via)
            if cap is not None and n > cap:
                problems.append(f"relay {via} assigned {n} clients > capacity {cap}")
    return problems


def _require_feasible(inst: ActionInstance) -> None:
    if not inst.clients:
        return
    if inst.bandwidth < 1 or inst.inflow < 1:
        raise Infeasible("no capacity to forward any layer")
    if not inst.relays and inst.bandwidth < len(inst.clients):
        raise Infeasible(
            f"no relay candidates and budget {inst.bandwidth} < {len(inst.clients)} clients"
        )


def _canonicalize(
    inst: ActionInstance, assignment: dict[NodeId, NodeId], layers: dict[NodeId, int]
) -> Action:
    """Minimize layer counts without changing any client's term value."""
    out_layers: dict[NodeId, int] = {}
    by_relay: dict[NodeId, list[NodeId]] = {}
    for c, via in assignment.items():
        if via != inst.self_node:
            by_relay.setdefault(via, []).append(c)
    for u, cs in by_relay.items():
        y = layers[u]
        if inst.alpha == 0:
            out_layers[u] = 1
            continue
        targets = [
            min(y * inst.phi_relay[(u, c)], inst.demands[c]) for c in cs
        ]
        best = y
        for cand in range(1, y):
            if all(
                min(cand * inst.phi_relay[(u, c)], inst.demands[c]) == t
                for c, t in zip(cs, targets)
            ):
                best = cand
                break
        out_layers[u] = best
    for c, via in assignment.items():
        if via == inst.self_node:
            q = layers[c]
            out_layers[c] = 1 if inst.alpha == 0 else q
    return Action(dict(assignment), out_layers)


# ---------------------------------------------------------------------------
# Brute-force oracle: full enumeration of consistent (assignment, layers) pairs
# ---------------------------------------------------------------------------

def brute_force_best_action(
    inst: ActionInstance, max_enumeration: int = 5_000_000
) -> tuple[Action, float]:
    _require_feasible(inst)
    clients = sorted(inst.clients)
    if not clients:
        return Action({}, {}), 0.0
    cands = sorted(inst.relays) + [inst.self_node]
    cap = inst.edge_cap()

    est = (len(cands) ** len(clients)) * (cap ** min(len(clients) + len(inst.relays), 8))
    if est > max_enumeration:
        raise RefusedTooLarge(f"estimated {est} actions exceeds enumeration budget")

    best_val = -math.inf
    best_action: Optional[Action] = None
    for assign_tuple in itertools.product(cands, repeat=len(clients)):
        assignment = dict(zip(clients, assign_tuple))
        if inst.relay_client_cap is not None:
            over = False
            for u in set(assign_tuple):
                if u != inst.self_node:
                    cap = inst.relay_client_cap.get(u)
                    if cap is not None and sum(1 for v in assign_tuple if v == u) > cap:
                        over = True
                        break
            if over:
                continue
        used_relays = sorted({v for v in assign_tuple if v != inst.self_node})
        directs = [c for c, v in zip(clients, assign_tuple) if v == inst.self_node]
        relay_ranges = [range(1, cap + 1)] * len(used_relays)
        direct_ranges = [range(1, min(inst.demands[c], cap) + 1) for c in directs]
        for relay_layers in itertools.product(*relay_ranges):
            spent = sum(relay_layers)
            if spent > inst.bandwidth:
                continue
            for direct_layers in itertools.product(*direct_ranges):
                if spent + sum(direct_layers) > inst.bandwidth:
                    continue
                layers = dict(zip(used_relays, relay_layers))
                layers.update(zip(directs, direct_layers))
                action = Action(assignment, layers)
                val = score_action(inst, action)
                if best_action is None or val > best_val + _tol(best_val):
                    best_val, best_action = val, action
                elif abs(val - best_val) <= _tol(best_val) and action.key() < best_action.key():
                    best_action = action
    if best_action is None:
        raise Infeasible("no consistent action within budget")
    return best_action, best_val


def _tol(ref: float) -> float:
    return REL_TOL * max(1.0, abs(ref))


# ---------------------------------------------------------------------------
# Branch-and-bound solver: search over relay layer vectors, clients assigned
# per vector by an exact budgeted upgrade pass
# ---------------------------------------------------------------------------

def solve_best_action(
    inst: ActionInstance,
    time_budget: float = 5.0,
    node_limit: int = 2_000_000,
    warm_starts: Optional[list[Action]] = None,
) -> SolveResult:
    _require_feasible(inst)
    clients = sorted(inst.clients)
    if not clients:
        return SolveResult(Action({}, {}), 0.0, True)

    relays = sorted(inst.relays)
    R, C = len(relays), len(clients)
    cap = inst.edge_cap()
    B = inst.bandwidth
    alpha = inst.alpha

    q_star = [inst.demands[c] for c in clients]
    slope = [alpha / q for q in q_star]
    d_self = [inst.d_self[c] for c in clients]
    dir_cap = [min(q_star[i], cap) for i in range(C)]

    # T[u][y][i]: client i's term when served via relay u funded at y layers
    T = [
        [
            [
                -inst.d_relay[(relays[u], clients[i])]
                + alpha
                * min(y * inst.phi_relay[(relays[u], clients[i])], q_star[i])
                / q_star[i]
                for i in range(C)
            ]
            for y in range(cap + 1)
        ]
        for u in range(R)
    ]
    NEG = -math.inf
    for u in range(R):
        T[u][0] = [NEG] * C

    # optimistic per-client value over relays with index >= k, funded at cap
    suffix_best = [[NEG] * C for _ in range(R + 1)]
    for k in range(R - 1, -1, -1):
        row = suffix_best[k]
        nxt = suffix_best[k + 1]
        top = T[k][cap]
        for i in range(C):
            row[i] = top[i] if top[i] > nxt[i] else nxt[i]

    def direct_val(i: int, delta: int) -> float:
        return -d_self[i] + slope[i] * delta

    deadline = time.monotonic() + time_budget
    state = {"nodes": 0, "timed_out": False}

    best_val = -math.inf
    best_action: Optional[Action] = None
    best_key: Optional[tuple] = None

    # a known-feasible incumbent (e.g. the currently deployed wiring) prunes
    # most of the search up front
    for cand in warm_starts or ():
        if set(cand.assignment) != set(clients) or check_action(inst, cand):
            continue
        val = score_action(inst, cand)
        key = cand.key()
        if best_action is None or val > best_val + _tol(best_val):
            best_val, best_action, best_key = val, cand, key
        elif abs(val - best_val) <= _tol(best_val) and key < best_key:
            best_action, best_key = cand, key

    y_vec = [0] * R

    caps = None
    if inst.relay_client_cap is not None:
        caps = [inst.relay_client_cap.get(u, C) for u in relays]

    def leaf_assignment() -> tuple[list[float], list[int]]:
        """Per-client stay values and serving relay indexes for the funded
        relay vector, honoring per-relay client-count caps when present."""
        stay = [NEG] * C
        owner = [-1] * C
        for i in range(C):
            bu, bt = -1, NEG
            for u in range(R):
                y = y_vec[u]
                if y > 0 and T[u][y][i] > bt:
                    bu, bt = u, T[u][y][i]
            owner[i], stay[i] = bu, bt
        if caps is not None:
            counts = [0] * R
            for i in range(C):
                if owner[i] >= 0:
                    counts[owner[i]] += 1
            changed = True
            while changed:
                changed = False
                for u in range(R):
                    while counts[u] > caps[u]:
                        changed = True
                        # evict the client losing least by moving elsewhere
                        best_i, best_loss, best_alt = -1, math.inf, -1
                        for i in range(C):
                            if owner[i] != u:
                                continue
                            av, au = NEG, -1
                            for v in range(R):
                                if v != u and y_vec[v] > 0 and counts[v] < caps[v]:
                                    if T[v][y_vec[v]][i] > av:
                                        av, au = T[v][y_vec[v]][i], v
                            loss = stay[i] - av if av > NEG else math.inf
                            if loss < best_loss or (loss == best_loss and i > best_i):
                                best_i, best_loss, best_alt = i, loss, au
                        counts[u] -= 1
                        if best_alt >= 0:
                            owner[best_i] = best_alt
                            stay[best_i] = T[best_alt][y_vec[best_alt]][best_i]
                            counts[best_alt] += 1
                        else:
                            owner[best_i] = -1
                            stay[best_i] = NEG   # must go direct
        return stay, owner

    def leaf_value(spent: int, stay: list[float]) -> Optional[tuple[float, list[int]]]:
        """Exact best direct-upgrade plan for a fully decided relay funding.

        Returns (total value, per-client direct layers with 0 = stay) or None
        if some client cannot be covered."""
        rem = B - spent
        base = 0.0
        mandatory = [i for i in range(C) if stay[i] == NEG]
        if len(mandatory) > rem:
            return None
        # budget DP: state = units granted to direct connections
        dp = [0.0] + [NEG] * rem
        choice: list[list[int]] = []
        for i in range(C):
            row = [NEG] * (rem + 1)
            pick = [0] * (rem + 1)
            s = stay[i]
            off = s if s != NEG else None
            base_i = -d_self[i]
            slope_i = slope[i]
            cap_i = dir_cap[i]
            for b in range(rem + 1):
                db = dp[b]
                if db == NEG:
                    continue
                if off is not None and db + off > row[b]:
                    row[b] = db + off
                    pick[b] = 0
                top = cap_i if cap_i < rem - b else rem - b
                for delta in range(1, top + 1):
                    v = db + base_i + slope_i * delta
                    nb = b + delta
                    if v > row[nb]:
                        row[nb] = v
                        pick[nb] = delta
            dp = row
            choice.append(pick)
        bb, bv = 0, NEG
        for b in range(rem + 1):
            if dp[b] > bv:
                bv, bb = dp[b], b
        if bv == NEG:
            return None
        deltas = [0] * C
        b = bb
        for i in range(C - 1, -1, -1):
            d = choice[i][b]
            deltas[i] = d
            b -= d
            # re-derive is unnecessary: pick table already consistent
        return bv + base, deltas

    def bound(idx: int, spent: int, best_decided: list[float]) -> float:
        rem = B - spent
        if rem < 0:
            return NEG
        suffix = suffix_best[idx]
        total = 0.0
        items = []  # (efficiency, max_units, unit_rate) for fractional fill
        mandatory_units = 0
        for i in range(C):
            s = best_decided[i]
            if suffix[i] > s:
                s = suffix[i]
            if s == NEG:
                mandatory_units += 1
                total += direct_val(i, 1)
                extra = dir_cap[i] - 1
                if extra > 0:
                    items.append((slope[i], extra))
            else:
                total += s
                g1 = direct_val(i, 1) - s
                gc = direct_val(i, dir_cap[i]) - s
                eff = max(g1, gc / dir_cap[i])
                if eff > 0:
                    items.append((eff, dir_cap[i]))
        rem -= mandatory_units
        if rem < 0:
            return NEG
        items.sort(key=lambda t: -t[0])
        for eff, units in items:
            if rem <= 0:
                break
            take = units if units < rem else rem
            total += eff * take
            rem -= take
        return total

    def dfs(idx: int, spent: int, best_decided: list[float]) -> None:
        nonlocal best_val, best_action, best_key
        state["nodes"] += 1
        if state["nodes"] % 256 == 0 and time.monotonic() > deadline:
            state["timed_out"] = True
        if state["timed_out"] or state["nodes"] > node_limit:
            state["timed_out"] = True
            return
        if best_action is not None and bound(idx, spent, best_decided) <= best_val + _tol(best_val):
            return
        if idx == R:
            if caps is None:
                stay, owner = best_decided, None
            else:
                stay, owner = leaf_assignment()
            res = leaf_value(spent, stay)
            if res is None:
                return
            val, deltas = res
            if best_action is not None and val <= best_val + _tol(best_val):
                if val < best_val - _tol(best_val):
                    return
            assignment: dict[NodeId, NodeId] = {}
            layers: dict[NodeId, int] = {}
            for u in range(R):
                if y_vec[u] > 0:
                    layers[relays[u]] = y_vec[u]
            for i, c in enumerate(clients):
                if deltas[i] > 0:
                    assignment[c] = inst.self_node
                    layers[c] = deltas[i]
                elif owner is not None:
                    assignment[c] = relays[owner[i]]
                else:
                    bu, bt = -1, NEG
                    for u in range(R):
                        y = y_vec[u]
                        if y > 0 and T[u][y][i] > bt:
                            bu, bt = u, T[u][y][i]
                    assignment[c] = relays[bu]
            for u in range(R):
                ru = relays[u]
                if y_vec[u] > 0 and ru in layers and not any(
                    v == ru for v in assignment.values()
                ):
                    del layers[ru]
            action = _canonicalize(inst, assignment, layers)
            val = score_action(inst, action)
            key = action.key()
            if best_action is None or val > best_val + _tol(best_val):
                best_val, best_action, best_key = val, action, key
            elif abs(val - best_val) <= _tol(best_val) and key < best_key:
                best_action, best_key = action, key
            return
        base = best_decided
        for y in range(min(cap, B - spent), -1, -1):
            y_vec[idx] = y
            if y == 0:
                dfs(idx + 1, spent, base)
            else:
                row = T[idx][y]
                nd = [row[i] if row[i] > base[i] else base[i] for i in range(C)]
                dfs(idx + 1, spent + y, nd)
            if state["timed_out"]:
                return
        y_vec[idx] = 0

    dfs(0, 0, [NEG] * C)

    if best_action is None:
        if state["timed_out"]:
            raise Infeasible("timed out before any feasible action was found")
        raise Infeasible("no consistent action exists")
    return SolveResult(best_action, best_val, not state["timed_out"])
