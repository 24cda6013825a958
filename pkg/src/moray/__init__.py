"""Event-driven simulation of decentralized multicast-tree construction for
p2p video conferencing, with an exact per-node action solver and baselines."""

from .domain import (
    ClientFeedback,
    Edge,
    MulticastTree,
    NetworkTopology,
    NodeId,
    NodeKind,
    SessionConfig,
    client,
    client_reward,
    delivered_layers,
    path_latency,
    sfu,
    validate_tree,
)
from .solver import Action, ActionInstance, brute_force_best_action, solve_best_action
from .agent import AgentModel, AgentParams, estimated_action_reward, random_action
from .baselines import (
    brute_force_global,
    dump_instance,
    load_instance,
    nearest_server_star,
    solve_global_optimum,
)
from .harness import RunConfig, RunMetrics, export_metrics, run_experiment
from .scenarios import (
    ScenarioSpec,
    build_scenario,
    gen_random,
    gen_structured,
    load_real_world,
)

__all__ = [
    "Action",
    "ActionInstance",
    "AgentModel",
    "AgentParams",
    "ClientFeedback",
    "Edge",
    "MulticastTree",
    "NetworkTopology",
    "NodeId",
    "NodeKind",
    "RunConfig",
    "RunMetrics",
    "ScenarioSpec",
    "SessionConfig",
    "brute_force_best_action",
    "brute_force_global",
    "build_scenario",
    "client",
    "client_reward",
    "delivered_layers",
    "dump_instance",
    "estimated_action_reward",
    "export_metrics",
    "gen_random",
    "gen_structured",
    "load_instance",
    "load_real_world",
    "nearest_server_star",
    "path_latency",
    "random_action",
    "run_experiment",
    "sfu",
    "solve_best_action",
    "solve_global_optimum",
    "validate_tree",
]

__version__ = "0.1.0"
