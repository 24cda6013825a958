"""Per-node decision logic: bandit model upkeep, epsilon-greedy action choice,
delay probing, feedback/deadline handling, and tree mutation primitives."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .domain import (
    ClientFeedback,
    Edge,
    MulticastTree,
    NodeId,
    NodeKind,
    SessionConfig,
)
from .events import (
    FeedbackPacket,
    GetDelayPacket,
    StreamPacket,
    TriggerActionPacket,
)
from .solver import (
    Action,
    ActionInstance,
    Infeasible,
    check_action,
    score_action,
    solve_best_action,
)


class NoCandidates(ValueError):
    pass


@dataclass
class AgentParams:
    """Learning and exploration knobs shared by all agents of a run.

    Link delays are deterministic in this simulator, so the default latency
    learning keeps the best delay observed per edge (worse observations
    reflect a transient downstream arrangement, not the edge), adopts
    improvements immediately, and fades all exploration pressure on a fixed
    schedule so converged trees stay put.
    """

    eta: Optional[float] = None          # worsening-measurement step; None -> 0 (keep best)
    eta_prime: Optional[float] = None    # quality-ratio step; None -> 0.9
    eta_optimistic: float = 1.0          # step when a measurement improves on the estimate
    epsilon: float = 0.25
    epsilon_decay_rounds: int = 200      # 0 disables decay
    bonus_coefficient: float = 0.3
    stability_base: int = 2              # 0 -> act every round
    penalty_factor: float = 4.0
    penalty_default: float = 1e4
    solver_time_budget: float = 2.0
    optimistic_phi: float = 1.0          # initial quality-ratio estimate

    def resolve_eta(self, n_sfus: int) -> float:
        if self.eta is not None:
            return self.eta
        return 0.0

    def resolve_eta_prime(self, n_sfus: int) -> float:
        if self.eta_prime is not None:
            return self.eta_prime
        return 0.9

    def epsilon_at(self, round_no: int) -> float:
        return self.epsilon * self.decay_factor(round_no)

    def decay_factor(self, round_no: int) -> float:
        if self.epsilon_decay_rounds <= 0:
            return 1.0
        return max(0.0, 1.0 - round_no / self.epsilon_decay_rounds)


class AgentModel:
    """Bipartite model over (known SFUs x responsible clients).

    Edge (via, client) carries a latency estimate and, for relayed routes, a
    delivered-layers-per-layer-sent ratio estimate in [0, 1]. Direct routes
    (via == self) have the ratio pinned to 1.
    """

    def __init__(
        self,
        self_node: NodeId,
        known_sfus: tuple[NodeId, ...],
        eta: float,
        eta_prime: float,
        bonus_coefficient: float = 1.0,
        optimistic_phi: float = 0.0,
        eta_optimistic: Optional[float] = None,
    ):
        self.self_node = self_node
        self.known_sfus = tuple(sorted(known_sfus))
        self.eta = eta
        self.eta_prime = eta_prime
        # links have fixed latencies, so a better-than-estimated measurement is
        # real signal about the route's attainable delay: adopt it quickly
        self.eta_optimistic = eta if eta_optimistic is None else eta_optimistic
        self.bonus_coefficient = bonus_coefficient
        self.optimistic_phi = optimistic_phi
        self.d_hat: dict[tuple[NodeId, NodeId], float] = {}
        self.phi_hat: dict[tuple[NodeId, NodeId], float] = {}
        self.play_count: dict[tuple[NodeId, NodeId], int] = {}
        self.last_delay: dict[tuple[NodeId, NodeId], float] = {}
        self.last_ratio: dict[tuple[NodeId, NodeId], float] = {}
        self.measured_direct: set[tuple[NodeId, NodeId]] = set()
        self.total_plays = 0
        self.max_observed_delay = 0.0

    def ensure_edge(self, via: NodeId, c: NodeId) -> None:
        key = (via, c)
        if key not in self.d_hat:
            # relay edges start at the direct-route estimate when one exists:
            # still optimistic (a relay detour can only be longer) without the
            # zero-init mirage that makes every unexplored relay look free
            warm = self.d_hat.get((self.self_node, c), 0.0) if via != self.self_node else 0.0
            self.d_hat[key] = warm
            self.phi_hat[key] = 1.0 if via == self.self_node else self.optimistic_phi
            self.play_count[key] = 0

    def latency_estimate(self, via: NodeId, c: NodeId) -> float:
        self.ensure_edge(via, c)
        key = (via, c)
        # a relay's geometric cost for a client is only pinned down once it has
        # been observed serving that client as its immediate child (probe hop
        # count 1); until then score the relay level with the direct route --
        # a detour can never beat the straight line, and observations through
        # immature deeper arrangements are upper bounds, not the edge's worth
        if (
            via != self.self_node
            and key not in self.measured_direct
            and (self.self_node, c) in self.d_hat
        ):
            return self.d_hat[(self.self_node, c)]
        return self.d_hat[key]

    def quality_estimate(self, via: NodeId, c: NodeId) -> float:
        if via == self.self_node:
            return 1.0
        self.ensure_edge(via, c)
        return self.phi_hat[(via, c)]

    def update(
        self,
        feedback: ClientFeedback,
        routed_via: NodeId,
        layers_sent: int,
        measured_delay: float,
        demand: Optional[int] = None,
        hops: Optional[int] = None,
    ) -> "AgentModel":
        c = feedback.client
        self.ensure_edge(routed_via, c)
        key = (routed_via, c)
        if hops is not None and routed_via != self.self_node and hops <= 1:
            self.measured_direct.add(key)
        cur = self.d_hat[key]
        tol = 1e-9 * max(1.0, abs(measured_delay))
        if self.play_count[key] == 0:
            # first real observation replaces the optimistic prior
            self.d_hat[key] = measured_delay
        elif measured_delay < cur and (
            abs(measured_delay - cur) <= tol
            or abs(measured_delay - self.last_delay.get(key, math.nan)) <= tol
        ):
            # links are deterministic: a repeated improvement is the route's
            # true delay, so lock onto it instead of creeping toward it
            self.d_hat[key] = measured_delay
        else:
            rate = self.eta_optimistic if measured_delay < cur else self.eta
            self.d_hat[key] = cur + rate * (measured_delay - cur)
        self.last_delay[key] = measured_delay
        if routed_via == self.self_node:
            self.phi_hat[key] = 1.0
        else:
            ratio = feedback.layers_received / layers_sent if layers_sent > 0 else 0.0
            ratio = min(1.0, max(0.0, ratio))
            cur = self.phi_hat[key]
            capped = demand is not None and feedback.layers_received >= demand
            indirect = hops is not None and hops > 1
            if capped or indirect:
                # demand-capped or relayed-onward deliveries only lower-bound
                # the neighbor's own forwarding capability
                if ratio > cur:
                    self.phi_hat[key] = ratio
            elif (
                abs(ratio - cur) <= 1e-9
                or abs(ratio - self.last_ratio.get(key, math.nan)) <= 1e-9
            ):
                self.phi_hat[key] = ratio
            else:
                rate = self.eta_optimistic if ratio > cur else self.eta_prime
                self.phi_hat[key] = cur + rate * (ratio - cur)
            self.last_ratio[key] = ratio
        self.play_count[key] += 1
        self.total_plays += 1
        if measured_delay > self.max_observed_delay:
            self.max_observed_delay = measured_delay
        return self

    def apply_deadline(
        self,
        pending_edges: list[tuple[NodeId, NodeId]],
        penalty_factor: float,
        penalty_default: float,
    ) -> "AgentModel":
        if not pending_edges:
            return self
        penalty = (
            penalty_factor * self.max_observed_delay
            if self.max_observed_delay > 0
            else penalty_default
        )
        for via, c in pending_edges:
            self.ensure_edge(via, c)
            key = (via, c)
            self.d_hat[key] += self.eta * (penalty - self.d_hat[key])
            if via != self.self_node:
                self.phi_hat[key] += self.eta_prime * (0.0 - self.phi_hat[key])
            self.play_count[key] += 1
            self.total_plays += 1
        return self


def exploration_bonus(model: AgentModel, edge: tuple[NodeId, NodeId]) -> float:
    """Optimism bonus that shrinks as an edge accumulates plays."""
    model.ensure_edge(*edge)
    n = model.play_count[edge]
    return model.bonus_coefficient * math.sqrt(
        math.log(model.total_plays + 1) / (n + 1)
    )


def estimated_action_reward(
    model: AgentModel, action: Action, alpha: float, demands: dict[NodeId, int]
) -> float:
    """Model-estimated total reward of an action, bonus excluded."""
    total = 0.0
    for c in sorted(action.assignment):
        via = action.assignment[c]
        q_star = demands[c]
        if via == model.self_node:
            layers = action.layers[c]
            total += -model.latency_estimate(via, c) + alpha * min(layers, q_star) / q_star
        else:
            layers = action.layers[via]
            est = layers * model.quality_estimate(via, c)
            total += -model.latency_estimate(via, c) + alpha * min(est, q_star) / q_star
    return total


def random_action(
    model: AgentModel,
    rng: random.Random,
    candidates: list[NodeId],
    clients: list[NodeId],
    demands: dict[NodeId, int],
    bandwidth: int,
    inflow: int,
    relay_client_cap: Optional[dict[NodeId, int]] = None,
) -> Action:
    """Uniform client assignment over the candidate SFUs, followed by the
    deterministic fair-split layer rule; merges downstream nodes if the edge
    count exceeds the upload budget and spills clients past a relay's
    advertised capacity onto the next candidates."""
    if not candidates:
        raise NoCandidates("no candidate SFUs")
    cands = sorted(candidates)
    clients = sorted(clients)
    assignment = {c: cands[rng.randrange(len(cands))] for c in clients}

    if relay_client_cap is not None:
        counts: dict[NodeId, int] = {}
        for c in clients:
            v = assignment[c]
            if v != model.self_node:
                counts[v] = counts.get(v, 0) + 1
        for c in clients:
            v = assignment[c]
            if v == model.self_node:
                continue
            cap = relay_client_cap.get(v, len(clients))
            if counts[v] > cap:
                counts[v] -= 1
                spare = [
                    s
                    for s in cands
                    if s == model.self_node
                    or counts.get(s, 0) < relay_client_cap.get(s, len(clients))
                ]
                if spare:
                    tgt = spare[rng.randrange(len(spare))]
                    assignment[c] = tgt
                    if tgt != model.self_node:
                        counts[tgt] = counts.get(tgt, 0) + 1
                else:
                    counts[v] += 1    # nowhere to spill; leave as drawn

    def grouping():
        groups: dict[NodeId, list[NodeId]] = {}
        for c, v in assignment.items():
            groups.setdefault(v, []).append(c)
        return groups

    def edge_count(groups) -> int:
        n = 0
        for via, cs in groups.items():
            n += len(cs) if via == model.self_node else 1
        return n

    groups = grouping()
    relay_cands = [s for s in cands if s != model.self_node]
    while edge_count(groups) > bandwidth:
        used_relays = [v for v in groups if v != model.self_node]
        if not used_relays:
            if not relay_cands:
                raise Infeasible("budget below client count and no relay available")
            tgt = relay_cands[rng.randrange(len(relay_cands))]
            for c in clients:
                assignment[c] = tgt
            groups = grouping()
            continue
        # fold the smallest group (direct clients count as singleton groups)
        entries = []
        for via, cs in groups.items():
            if via == model.self_node:
                entries.extend((1, c, c) for c in cs)
            else:
                entries.append((len(cs), via, via))
        entries.sort(key=lambda t: (t[0], t[2]))
        victim = entries[0]
        target = max(
            (v for v in used_relays if v != victim[1]),
            key=lambda v: (len(groups[v]), -v.index),
            default=None,
        )
        if target is None:
            target = relay_cands[rng.randrange(len(relay_cands))]
            if target == victim[1]:
                for c in clients:
                    assignment[c] = target
                groups = grouping()
                continue
        if victim[1] == victim[2] and victim[1].kind == NodeKind.CLIENT:
            assignment[victim[1]] = target
        else:
            for c in groups[victim[1]]:
                assignment[c] = target
        groups = grouping()

    # fair layer split over downstream edges, capped per edge
    downstream = []
    for via, cs in sorted(groups.items()):
        if via == model.self_node:
            downstream.extend((c, min(inflow, demands[c])) for c in sorted(cs))
        else:
            downstream.append((via, min(inflow, max(demands[c] for c in cs))))
    downstream.sort()
    n_edges = len(downstream)
    base = bandwidth // n_edges
    layers = {node: max(1, min(base, cap)) for node, cap in downstream}
    remaining = bandwidth - sum(layers.values())
    progress = True
    while remaining > 0 and progress:
        progress = False
        for node, cap in downstream:
            if remaining <= 0:
                break
            if layers[node] < cap:
                layers[node] += 1
                remaining -= 1
                progress = True
    return Action(assignment, layers)


@dataclass
class StabilityState:
    rounds_since_last_action: int = 10**9
    base_interval: int = 0
    subtree_depth: int = 0


def should_act(state: StabilityState) -> bool:
    interval = max(1, state.base_interval * state.subtree_depth)
    return state.rounds_since_last_action >= interval


# ---------------------------------------------------------------------------
# Materialized per-source tree
# ---------------------------------------------------------------------------

class TreeRegistry:
    """Authoritative wiring of one source's multicast tree, mutated only while
    the owning agents process their trigger events."""

    def __init__(self, source: NodeId, config: SessionConfig):
        self.source = source
        self.config = config
        self.parent: dict[NodeId, NodeId] = {}
        self.layers: dict[NodeId, int] = {}
        self.resp: dict[NodeId, set[NodeId]] = {s: set() for s in config.sfus}
        self._children: dict[NodeId, set[NodeId]] = {}

    def parent_of(self, node: NodeId) -> Optional[NodeId]:
        return self.parent.get(node)

    def children(self, node: NodeId) -> list[NodeId]:
        return sorted(self._children.get(node, ()))

    def attach(self, parent: NodeId, child: NodeId, layers: int) -> None:
        if child in self.parent:
            raise ValueError(f"{child} already attached")
        self.parent[child] = parent
        self.layers[child] = layers
        self._children.setdefault(parent, set()).add(child)

    def set_layers(self, child: NodeId, layers: int) -> None:
        self.layers[child] = layers

    def detach(self, child: NodeId) -> None:
        p = self.parent.pop(child, None)
        if p is not None:
            self._children[p].discard(child)
        self.layers.pop(child, None)

    def dissolve(self, node: NodeId) -> None:
        """Detach `node` and its entire subtree; dissolved SFUs drop their
        responsibility sets and become attachable again."""
        stack = [node]
        order = []
        while stack:
            n = stack.pop()
            order.append(n)
            stack.extend(self._children.get(n, ()))
        for n in order:
            self.detach(n)
            if n.kind == NodeKind.SFU:
                self.resp[n] = set()

    def branch_under(self, ancestor: NodeId, node: NodeId) -> Optional[NodeId]:
        """The child of `ancestor` on node's upward chain, or None."""
        cur = node
        seen = 0
        while cur in self.parent:
            p = self.parent[cur]
            if p == ancestor:
                return cur
            cur = p
            seen += 1
            if seen > len(self.parent) + 1:
                raise RuntimeError("parent chain cycle")
        return None

    def detach_client_chain(self, c: NodeId, stop: NodeId) -> None:
        """Remove the client's edge and strip it from responsibility sets of
        its former ancestors strictly below `stop`."""
        cur = self.parent.get(c)
        self.detach(c)
        while cur is not None and cur != stop:
            if cur.kind == NodeKind.SFU:
                self.resp[cur].discard(c)
            cur = self.parent.get(cur)

    def set_resp(self, s: NodeId, clients: set[NodeId]) -> None:
        self.resp[s] = set(clients)

    def available_for(self, requester: NodeId, target: NodeId) -> bool:
        p = self.parent.get(target)
        return p is None or p == requester

    def snapshot(self) -> MulticastTree:
        edges = tuple(
            Edge(self.parent[c], c, self.layers[c]) for c in sorted(self.parent)
        )
        resp = {s: frozenset(cs) for s, cs in self.resp.items() if cs}
        return MulticastTree(self.source, edges, resp)


def handle_connect(registry: TreeRegistry, target: NodeId) -> bool:
    """Accept iff the target is not already receiving this source's stream."""
    return registry.parent_of(target) is None


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

@dataclass
class _PendingEntry:
    via: NodeId
    layers_sent: int


class BaseAgent:
    def __init__(
        self,
        node: NodeId,
        source: NodeId,
        config: SessionConfig,
        params: AgentParams,
        rng: random.Random,
        frozen: bool = False,
    ):
        self.node = node
        self.source = source
        self.config = config
        self.params = params
        self.rng = rng
        self.frozen = frozen
        n = len(config.sfus)
        self.model = AgentModel(
            node,
            config.sfus,
            params.resolve_eta(n),
            params.resolve_eta_prime(n),
            params.bonus_coefficient,
            params.optimistic_phi,
            eta_optimistic=params.eta_optimistic,
        )
        self.responsible: set[NodeId] = set()
        self.inflow = 0
        self.pending: dict[int, dict[NodeId, _PendingEntry]] = {}
        self.stability = StabilityState(base_interval=params.stability_base)
        self._depth_round = -1
        self._depth_obs = 0
        self.last_depth = 0
        self._dirty = True  # responsibilities/inflow changed since last decision

    # -- feedback plumbing --------------------------------------------------

    last_executed_round = -1

    def on_feedback(self, fb: FeedbackPacket, now: float) -> None:
        if fb.hops > self._depth_obs or fb.round_no > self._depth_round:
            if fb.round_no > self._depth_round:
                self._depth_round = fb.round_no
                self._depth_obs = fb.hops
            else:
                self._depth_obs = max(self._depth_obs, fb.hops)
            self.last_depth = self._depth_obs
        if self.frozen:
            return
        entries = self.pending.get(fb.round_no)
        if not entries:
            return
        entry = entries.pop(fb.client, None)
        if entry is None:
            return
        measured = now - fb.echoed_timestamp
        feedback = ClientFeedback(
            fb.client, fb.layers_received, fb.echoed_timestamp, fb.origin_sfu, fb.round_no
        )
        self.model.update(
            feedback,
            entry.via,
            entry.layers_sent,
            measured,
            demand=self.config.demands.get(fb.client),
            hops=fb.hops,
        )

    def on_deadline(self, round_no: int, attached: bool = True) -> None:
        entries = self.pending.pop(round_no, None)
        if not entries or self.frozen:
            return
        # missing echoes from superseded rounds or after this node left the
        # tree are restructuring fallout, not evidence about the edges
        if round_no < self.last_executed_round or not attached:
            return
        edges = [(e.via, c) for c, e in sorted(entries.items())]
        self.model.apply_deadline(
            edges, self.params.penalty_factor, self.params.penalty_default
        )

    def _drop_pending_clients(self, removed: set[NodeId]) -> None:
        for entries in self.pending.values():
            for c in removed:
                entries.pop(c, None)

    # -- action execution ----------------------------------------------------

    def structure_action(self, registry: TreeRegistry) -> Action:
        """The action that reproduces the current downstream wiring."""
        assignment: dict[NodeId, NodeId] = {}
        layers: dict[NodeId, int] = {}
        for child in registry.children(self.node):
            if child.kind == NodeKind.CLIENT:
                assignment[child] = self.node
                layers[child] = registry.layers[child]
            else:
                layers[child] = registry.layers[child]
                for c in registry.resp.get(child, ()):
                    assignment[c] = child
        return Action(assignment, layers)

    def execute(self, action: Action, round_no: int, ctx) -> None:
        reg: TreeRegistry = ctx.registry(self.source)
        me = self.node
        groups: dict[NodeId, list[NodeId]] = {}
        for c, via in action.assignment.items():
            groups.setdefault(via, []).append(c)
        new_children: set[NodeId] = set()
        for via, cs in groups.items():
            if via == me:
                new_children.update(cs)
            else:
                new_children.add(via)
        old_children = set(reg.children(me))

        for d in sorted(old_children - new_children):
            reg.dissolve(d)

        # detach clients whose serving branch changed; their new branch
        # attaches them as this round's wave reaches it
        for c in sorted(action.assignment):
            tgt = action.assignment[c]
            branch = reg.branch_under(me, c)
            if branch is None:
                continue
            want = c if tgt == me else tgt
            if branch != want:
                reg.detach_client_chain(c, stop=me)

        for d in sorted(new_children):
            lay = action.layers[d] if d in action.layers else action.layers[d]
            if reg.parent_of(d) == me:
                reg.set_layers(d, lay)
            else:
                if not ctx.connect(me, d, self.source):
                    raise RuntimeError(f"connect rejected for {d}; candidate mask stale")
                reg.attach(me, d, lay)
            if d.kind == NodeKind.SFU:
                reg.set_resp(d, set(groups.get(d, ())))

        # streams + trigger cascade + delay probes, in deterministic order
        now = ctx.now()
        self.last_executed_round = round_no
        self.pending.setdefault(round_no, {})
        for d in sorted(new_children):
            lay = action.layers[d]
            if d.kind == NodeKind.SFU:
                recipients = tuple(sorted(groups.get(d, ())))
                demands = {c: self.config.demands[c] for c in recipients}
                ctx.send(me, d, StreamPacket(self.source, lay, recipients, demands, round_no))
                ctx.send(me, d, TriggerActionPacket(self.source, round_no))
                ctx.send(me, d, GetDelayPacket(self.source, me, now, round_no, 0))
            else:
                ctx.send(
                    me,
                    d,
                    StreamPacket(
                        self.source, lay, (d,), {d: self.config.demands[d]}, round_no
                    ),
                )
                ctx.send(me, d, GetDelayPacket(self.source, me, now, round_no, 0))
        if not self.frozen:
            for c in sorted(action.assignment):
                via = action.assignment[c]
                sent = action.layers[c] if via == me else action.layers[via]
                self.pending[round_no][c] = _PendingEntry(via, sent)
            ctx.schedule_deadline(me, self.source, round_no)

    # -- get_delay relay ------------------------------------------------------

    def on_get_delay(self, pkt: GetDelayPacket, ctx) -> None:
        reg: TreeRegistry = ctx.registry(self.source)
        fwd = GetDelayPacket(
            pkt.source, pkt.origin, pkt.origin_timestamp, pkt.round_no, pkt.hops + 1
        )
        for child in reg.children(self.node):
            ctx.send(self.node, child, fwd)


class SfuAgent(BaseAgent):
    def on_stream(self, pkt: StreamPacket) -> None:
        new_resp = set(pkt.recipients)
        removed = self.responsible - new_resp
        if removed:
            self._drop_pending_clients(removed)
        if new_resp != self.responsible or pkt.layers != self.inflow:
            self._dirty = True
        self.responsible = new_resp
        self.inflow = pkt.layers

    def on_trigger(self, round_no: int, ctx) -> None:
        if not self.responsible:
            return
        reg: TreeRegistry = ctx.registry(self.source)
        current = self.structure_action(reg)
        sfu_children = [d for d in reg.children(self.node) if d.kind == NodeKind.SFU]
        self.stability.subtree_depth = self.last_depth if sfu_children else 0
        self.stability.rounds_since_last_action += 1
        if self.frozen:
            self.execute(current, round_no, ctx)
            return
        # the current wiring can be kept only if it serves exactly the
        # responsibilities this round's metadata assigned, within the inflow
        coherent = set(current.assignment) == self.responsible and all(
            lay <= self.inflow for lay in current.layers.values()
        )
        if coherent and not (should_act(self.stability) or self._dirty):
            self.execute(current, round_no, ctx)
            return
        action = self._decide(round_no, ctx)
        self.stability.rounds_since_last_action = 0
        self._dirty = False
        self.execute(action, round_no, ctx)

    def _candidates(self, ctx) -> list[NodeId]:
        reg: TreeRegistry = ctx.registry(self.source)
        cands = [
            s
            for s in self.model.known_sfus
            if s != self.node and reg.available_for(self.node, s)
        ]
        return cands

    def _decide(self, round_no: int, ctx) -> Action:
        relays = self._candidates(ctx)
        clients = sorted(self.responsible)
        demands = {c: self.config.demands[c] for c in clients}
        caps = {u: self.config.bandwidths[u] for u in relays}
        eps = self.params.epsilon_at(round_no)
        r = self.rng.random()
        if r > 1.0 - eps:
            return random_action(
                self.model,
                self.rng,
                relays + [self.node],
                clients,
                demands,
                self.config.bandwidths[self.node],
                self.inflow,
                relay_client_cap=caps,
            )
        inst = self._instance(relays, clients, demands, round_no)
        reg = ctx.registry(self.source)
        cur = self.structure_action(reg)
        result = solve_best_action(
            inst, time_budget=self.params.solver_time_budget, warm_starts=[cur]
        )
        # keep the current wiring on value dust: re-assigning for a sub-1e-6
        # estimated gain would churn the tree forever on exact ties
        if set(cur.assignment) == set(clients) and not check_action(inst, cur):
            if score_action(inst, cur) >= result.objective - 1e-6:
                return cur
        return result.action

    def _instance(
        self,
        relays: list[NodeId],
        clients: list[NodeId],
        demands: dict[NodeId, int],
        round_no: int = 0,
    ) -> ActionInstance:
        d_relay = {}
        phi_relay = {}
        d_self = {}
        # the optimism bonus fades with the exploration schedule; once models
        # have locked onto exact link delays, decisions go pure greedy
        scale = self.params.decay_factor(round_no)
        for c in clients:
            d_self[c] = self.model.latency_estimate(self.node, c) - scale * exploration_bonus(
                self.model, (self.node, c)
            )
            for u in relays:
                d_relay[(u, c)] = self.model.latency_estimate(u, c) - scale * exploration_bonus(
                    self.model, (u, c)
                )
                phi_relay[(u, c)] = self.model.quality_estimate(u, c)
        return ActionInstance(
            self_node=self.node,
            relays=tuple(relays),
            clients=tuple(clients),
            demands=demands,
            inflow=self.inflow,
            bandwidth=self.config.bandwidths[self.node],
            alpha=self.config.alpha,
            d_relay=d_relay,
            phi_relay=phi_relay,
            d_self=d_self,
            relay_client_cap={u: self.config.bandwidths[u] for u in relays},
        )


class SourceAgent(BaseAgent):
    """The stream source: always feeds exactly one gateway SFU the full layer
    stack; its decision is which gateway to use."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.responsible = set(self.config.clients)
        self.inflow = self.config.max_layers
        self.gateway_last_try: dict[NodeId, int] = {}

    def on_trigger(self, round_no: int, ctx) -> None:
        reg: TreeRegistry = ctx.registry(self.source)
        self.stability.subtree_depth = self.last_depth
        self.stability.rounds_since_last_action += 1
        if self.frozen:
            self.execute(self.structure_action(reg), round_no, ctx)
            return
        gateway = self._choose_gateway(round_no, ctx)
        current = reg.children(self.node)
        if current and current[0] == gateway:
            self.execute(self.structure_action(reg), round_no, ctx)
            return
        self.gateway_last_try[gateway] = round_no
        action = Action(
            {c: gateway for c in self.config.clients},
            {gateway: self.config.max_layers},
        )
        self.stability.rounds_since_last_action = 0
        self.execute(action, round_no, ctx)

    def _choose_gateway(self, round_no: int, ctx) -> NodeId:
        reg: TreeRegistry = ctx.registry(self.source)
        current = reg.children(self.node)
        cands = sorted(
            s for s in self.model.known_sfus if reg.available_for(self.node, s)
        )
        if not cands:
            raise NoCandidates("no gateway candidate")
        # the gateway rotation concludes halfway through the exploration
        # horizon so the committed gateway still has live exploration budget
        # to organize its own subtree afterwards
        horizon = self.params.epsilon_decay_rounds // 2
        if self.params.epsilon > 0 and 0 < round_no < horizon:
            # exploration phase: rotate gateway tenure round-robin so each
            # candidate's subtree gets repeated stints to organize itself and
            # is re-measured once matured; the final rotation compares like
            # with like before the greedy commitment below takes over
            n = len(self.model.known_sfus)
            stint = max(2, horizon // (2 * max(1, n)))
            want = self.model.known_sfus[(round_no // stint) % n]
            if reg.available_for(self.node, want):
                return want
            return min(cands, key=lambda g: (self.gateway_last_try.get(g, -1), g))
        best, best_val = None, -math.inf
        incumbent = current[0] if current else None
        q = self.config.max_layers
        scale = self.params.decay_factor(round_no)
        for g in cands:
            val = 0.0
            for c in sorted(self.config.clients):
                q_star = self.config.demands[c]
                d = self.model.latency_estimate(g, c) - scale * exploration_bonus(
                    self.model, (g, c)
                )
                phi = self.model.quality_estimate(g, c)
                val += -d + self.config.alpha * min(q * phi, q_star) / q_star
            if g == incumbent:
                val += 1e-6           # dust-scale hysteresis
            if val > best_val:
                best, best_val = g, val
        return best
