"""Experiment orchestration: the simulation world, per-round metrics, exports."""
from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .agent import (
    AgentParams,
    BaseAgent,
    SfuAgent,
    SourceAgent,
    TreeRegistry,
    handle_connect,
)
from .baselines import nearest_server_star, solve_global_optimum
from .domain import (
    MulticastTree,
    NetworkTopology,
    NodeId,
    NodeKind,
    SessionConfig,
    client_reward,
    delivered_layers,
    path_latency,
    validate_tree,
)
from .events import (
    ConnectReplyPacket,
    ConnectRequestPacket,
    FeedbackPacket,
    GetDelayPacket,
    PacketArrival,
    Simulator,
    StreamPacket,
    TimerExpiry,
    TriggerActionPacket,
)
from .solver import Action

PROTOCOLS = ("moray", "star", "optimal")


class InvariantViolation(AssertionError):
    pass


@dataclass
class RoundRow:
    round_no: int
    avg_latency_ms: float
    avg_layers: float
    aggregate_reward: float


@dataclass
class ClientRow:
    client_id: str
    latency_ms: float
    layers: int
    demand: int


@dataclass
class RunMetrics:
    source: str
    gateway: str
    per_round: list[RoundRow]
    per_client: list[ClientRow]
    convergence_round: int
    final_tree: Optional[MulticastTree] = None

    def mean_latency(self, last: int = 50) -> float:
        rows = self.per_round[-last:]
        return sum(r.avg_latency_ms for r in rows) / len(rows)

    def mean_reward(self, last: int = 50) -> float:
        rows = self.per_round[-last:]
        return sum(r.aggregate_reward for r in rows) / len(rows)


@dataclass
class RunConfig:
    protocol: str = "moray"
    rounds: int = 300
    seed: int = 0
    trigger_ms: float = 5000.0
    agent_params: AgentParams = field(default_factory=AgentParams)
    validate_every_round: bool = True
    convergence_window: int = 50
    optimal_cutoff: float = 300.0
    optimal_gap: float = 0.0
    trace: Optional[list[str]] = None


class World:
    """Wires agents, clients, registries and the event engine for one run."""

    def __init__(
        self,
        topo: NetworkTopology,
        configs: dict[NodeId, SessionConfig],
        run: RunConfig,
        fixed_trees: Optional[dict[NodeId, MulticastTree]] = None,
    ):
        self.topo = topo
        self.configs = configs
        self.run_config = run
        self.engine = Simulator(trace=run.trace)
        self.engine.handler = self._handle
        self.registries: dict[NodeId, TreeRegistry] = {}
        self.agents: dict[tuple[NodeId, NodeId], BaseAgent] = {}
        self.source_agents: dict[NodeId, SourceAgent] = {}
        self.client_layers: dict[tuple[NodeId, NodeId], int] = {}
        self.round_no = -1
        frozen = run.protocol != "moray"

        for src, cfg in configs.items():
            reg = TreeRegistry(src, cfg)
            self.registries[src] = reg
            for s in cfg.sfus:
                rng = random.Random(f"{run.seed}:{src}:{s}")
                self.agents[(s, src)] = SfuAgent(
                    s, src, cfg, run.agent_params, rng, frozen=frozen
                )
            rng = random.Random(f"{run.seed}:{src}:source")
            self.source_agents[src] = SourceAgent(
                src, src, cfg, run.agent_params, rng, frozen=frozen
            )
            for c in cfg.clients:
                self.client_layers[(c, src)] = 0

            if fixed_trees and src in fixed_trees:
                self._install_tree(reg, fixed_trees[src], cfg)
            else:
                self._install_initial(reg, cfg)

    @staticmethod
    def _install_initial(reg: TreeRegistry, cfg: SessionConfig) -> None:
        hub = cfg.initial_sfu
        reg.attach(cfg.source, hub, cfg.max_layers)
        clients = sorted(cfg.clients)
        caps = [min(cfg.demands[c], cfg.max_layers) for c in clients]
        budget = cfg.bandwidths[hub]
        n = len(clients)
        if budget < n:
            raise InvariantViolation(
                f"initial SFU {hub} budget {budget} below client count {n}"
            )
        base = budget // n
        alloc = [max(1, min(base, cap)) for cap in caps]
        remaining = budget - sum(alloc)
        progress = True
        while remaining > 0 and progress:
            progress = False
            for i in range(n):
                if remaining <= 0:
                    break
                if alloc[i] < caps[i]:
                    alloc[i] += 1
                    remaining -= 1
                    progress = True
        for c, q in zip(clients, alloc):
            reg.attach(hub, c, q)
        reg.set_resp(hub, set(clients))

    @staticmethod
    def _install_tree(reg: TreeRegistry, tree: MulticastTree, cfg: SessionConfig) -> None:
        for e in sorted(tree.edges, key=lambda e: (e.parent, e.child)):
            reg.attach(e.parent, e.child, e.layers)
        for s, cs in tree.responsibility.items():
            reg.set_resp(s, set(cs))

    # -- world services used by agents ---------------------------------------

    def registry(self, source: NodeId) -> TreeRegistry:
        return self.registries[source]

    def now(self) -> float:
        return self.engine.now

    def send(self, frm: NodeId, to: NodeId, packet) -> None:
        # Tree control traffic (stream metadata, trigger cascade, connects)
        # commits within the round; measurement traffic rides real link
        # latencies so probes observe true path delays.
        if isinstance(packet, (GetDelayPacket, FeedbackPacket)):
            delay = self.topo.latency(frm, to)
        else:
            delay = 0.0
        self.engine.schedule_in(delay, PacketArrival(frm, to, packet))

    def connect(self, requester: NodeId, target: NodeId, source: NodeId) -> bool:
        reg = self.registries[source]
        accepted = handle_connect(reg, target)
        if self.engine.trace is not None:
            t = self.engine.now
            self.engine.trace.append(
                f"{t:.6f} connect_request {requester} {target}"
            )
            self.engine.trace.append(
                f"{t:.6f} connect_reply:{'accept' if accepted else 'reject'} {target} {requester}"
            )
        return accepted

    def schedule_deadline(self, node: NodeId, source: NodeId, round_no: int) -> None:
        delay = 2 * self.run_config.trigger_ms
        self.engine.schedule_in(
            delay, TimerExpiry(node, f"deadline:{source}:{round_no}")
        )

    # -- event dispatch -------------------------------------------------------

    def _handle(self, now: float, payload) -> None:
        if isinstance(payload, TimerExpiry):
            tag = payload.tag
            if tag.startswith("deadline:"):
                _, src_s, rnd = tag.split(":")
                src = NodeId.parse(src_s)
                agent = self._agent_for(payload.owner, src)
                if agent is not None:
                    attached = (
                        payload.owner == src
                        or self.registries[src].parent_of(payload.owner) is not None
                    )
                    agent.on_deadline(int(rnd), attached=attached)
            elif tag.startswith("trigger:"):
                rnd = int(tag.split(":")[1])
                src = payload.owner
                self.source_agents[src].on_trigger(rnd, self)
            return
        pkt = payload.packet
        dst = payload.dst
        src = pkt.source
        if dst.kind == NodeKind.CLIENT and dst != src:
            self._client_handle(dst, pkt, now)
            return
        agent = self._agent_for(dst, src)
        if agent is None:
            return
        if isinstance(pkt, StreamPacket):
            agent.on_stream(pkt)
        elif isinstance(pkt, TriggerActionPacket):
            agent.on_trigger(pkt.round_no, self)
        elif isinstance(pkt, GetDelayPacket):
            agent.on_get_delay(pkt, self)
        elif isinstance(pkt, FeedbackPacket):
            agent.on_feedback(pkt, now)
        elif isinstance(pkt, (ConnectRequestPacket, ConnectReplyPacket)):
            pass

    def _agent_for(self, node: NodeId, source: NodeId) -> Optional[BaseAgent]:
        if node.kind == NodeKind.SFU:
            return self.agents.get((node, source))
        return self.source_agents.get(node)

    def _client_handle(self, node: NodeId, pkt, now: float) -> None:
        if isinstance(pkt, StreamPacket):
            self.client_layers[(node, pkt.source)] = pkt.layers
        elif isinstance(pkt, GetDelayPacket):
            fb = FeedbackPacket(
                pkt.source,
                node,
                self.client_layers.get((node, pkt.source), 0),
                pkt.origin_timestamp,
                pkt.origin,
                pkt.round_no,
                pkt.hops,
            )
            self.send(node, pkt.origin, fb)

    # -- run loop --------------------------------------------------------------

    def run(self) -> dict[NodeId, RunMetrics]:
        cfgr = self.run_config
        period = cfgr.trigger_ms
        rounds = cfgr.rounds
        per_round: dict[NodeId, list[RoundRow]] = {s: [] for s in self.configs}
        signatures: dict[NodeId, list] = {s: [] for s in self.configs}

        for src in sorted(self.configs):
            self.engine.schedule(0.0, TimerExpiry(src, "trigger:0"))
        for k in range(rounds):
            self.round_no = k
            sample_at = (k + 1) * period - 1.0
            self.engine.run_until(sample_at)
            if k + 1 < rounds:
                for src in sorted(self.configs):
                    self.engine.schedule(
                        (k + 1) * period, TimerExpiry(src, f"trigger:{k + 1}")
                    )
            for src in sorted(self.configs):
                cfg = self.configs[src]
                tree = self.registries[src].snapshot()
                if cfgr.validate_every_round:
                    problems = validate_tree(tree, cfg, self.topo)
                    if problems:
                        raise InvariantViolation(
                            f"round {k} source {src}: " + "; ".join(map(str, problems))
                        )
                    self._check_model_bounds(src)
                lat, lay, rew = _tree_metrics(tree, cfg, self.topo)
                per_round[src].append(RoundRow(k, lat, lay, rew))
                signatures[src].append(tree.signature())

        out: dict[NodeId, RunMetrics] = {}
        for src in sorted(self.configs):
            cfg = self.configs[src]
            tree = self.registries[src].snapshot()
            rows = [
                ClientRow(
                    str(c),
                    path_latency(tree, self.topo, c),
                    delivered_layers(tree, c),
                    cfg.demands[c],
                )
                for c in sorted(cfg.clients)
            ]
            gw = self.registries[src].children(src)
            out[src] = RunMetrics(
                source=str(src),
                gateway=str(gw[0]) if gw else "",
                per_round=per_round[src],
                per_client=rows,
                convergence_round=_convergence_round(
                    signatures[src], cfgr.convergence_window
                ),
                final_tree=tree,
            )
        return out

    def _check_model_bounds(self, src: NodeId) -> None:
        for (s, src2), agent in self.agents.items():
            if src2 != src:
                continue
            for (via, c), phi in agent.model.phi_hat.items():
                if not (-1e-12 <= phi <= 1.0 + 1e-12):
                    raise InvariantViolation(
                        f"quality estimate out of range at {s}: {via}->{c} = {phi}"
                    )


def _tree_metrics(
    tree: MulticastTree, cfg: SessionConfig, topo: NetworkTopology
) -> tuple[float, float, float]:
    lats, lays, rew = [], [], 0.0
    for c in sorted(cfg.clients):
        lat = path_latency(tree, topo, c)
        q = delivered_layers(tree, c)
        lats.append(lat)
        lays.append(q)
        rew += client_reward(lat, q, cfg.demands[c], cfg.alpha)
    n = len(lats)
    return sum(lats) / n, sum(lays) / n, rew


def _convergence_round(signatures: list, window: int) -> int:
    n = len(signatures)
    streak_start = 0
    for i in range(1, n):
        if signatures[i] != signatures[i - 1]:
            streak_start = i
    if n - streak_start >= window:
        return streak_start
    return -1


# ---------------------------------------------------------------------------
# Experiment entry point
# ---------------------------------------------------------------------------

def run_experiment(
    topo: NetworkTopology,
    configs: dict[NodeId, SessionConfig],
    run: RunConfig,
) -> dict[NodeId, RunMetrics]:
    """Run one seeded experiment; for star/optimal the tree is computed once
    and held fixed while metrics flow through the same event machinery."""
    if run.protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {run.protocol!r}")
    fixed: Optional[dict[NodeId, MulticastTree]] = None
    if run.protocol == "star":
        sources = sorted(configs)
        host = sources[0]
        host_cfg = configs[host]
        hub = min(
            host_cfg.sfus, key=lambda s: (topo.latency(host, s), s)
        )
        fixed = {
            src: nearest_server_star(cfg, topo, hub=hub)
            for src, cfg in configs.items()
        }
    elif run.protocol == "optimal":
        fixed = {}
        for src, cfg in configs.items():
            tree, _, _ = solve_global_optimum(
                cfg, topo, time_cutoff=run.optimal_cutoff, mip_rel_gap=run.optimal_gap
            )
            fixed[src] = tree
    world = World(topo, configs, run, fixed_trees=fixed)
    return world.run()


# ---------------------------------------------------------------------------
# Metric export
# ---------------------------------------------------------------------------

PER_ROUND_COLUMNS = ["round", "avg_latency_ms", "avg_layers", "aggregate_reward"]
PER_CLIENT_COLUMNS = ["client_id", "latency_ms", "layers", "demand"]


def export_metrics(metrics: RunMetrics, path: str, format: str = "csv") -> None:
    """Write per-round and per-client tables. CSV mode writes
    `<path>.per_round.csv` and `<path>.per_client.csv`; JSON mode writes a
    single `<path>` file that loads back without loss."""
    if format == "csv":
        with open(path + ".per_round.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PER_ROUND_COLUMNS)
            for r in metrics.per_round:
                w.writerow([r.round_no, repr(r.avg_latency_ms), repr(r.avg_layers), repr(r.aggregate_reward)])
        with open(path + ".per_client.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PER_CLIENT_COLUMNS)
            for c in metrics.per_client:
                w.writerow([c.client_id, repr(c.latency_ms), c.layers, c.demand])
    elif format == "json":
        with open(path, "w") as fh:
            fh.write(metrics_to_json(metrics))
    else:
        raise ValueError(f"unknown format {format!r}")


def metrics_to_json(metrics: RunMetrics) -> str:
    doc = {
        "source": metrics.source,
        "gateway": metrics.gateway,
        "convergence_round": metrics.convergence_round,
        "per_round": [
            [r.round_no, r.avg_latency_ms, r.avg_layers, r.aggregate_reward]
            for r in metrics.per_round
        ],
        "per_client": [
            [c.client_id, c.latency_ms, c.layers, c.demand] for c in metrics.per_client
        ],
        "tree_edges": [
            [str(e.parent), str(e.child), e.layers]
            for e in sorted(metrics.final_tree.edges, key=lambda e: (e.parent, e.child))
        ]
        if metrics.final_tree
        else [],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def load_metrics_json(path: str) -> RunMetrics:
    with open(path) as fh:
        doc = json.load(fh)
    return RunMetrics(
        source=doc["source"],
        gateway=doc["gateway"],
        per_round=[RoundRow(*row) for row in doc["per_round"]],
        per_client=[ClientRow(*row) for row in doc["per_client"]],
        convergence_round=doc["convergence_round"],
        final_tree=None,
    )
