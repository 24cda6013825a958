"""Render simulator exports as figures: empirical CDFs of per-client latency
and delivered layers, per-round convergence curves, and topology diagrams.

Inputs are the harness export files; their column layout is validated
strictly and mismatches abort with a column diff.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

PER_CLIENT_COLUMNS = ["client_id", "latency_ms", "layers", "demand"]
PER_ROUND_COLUMNS = ["round", "avg_latency_ms", "avg_layers", "aggregate_reward"]

KINDS = ("latency-cdf", "bandwidth-cdf", "convergence", "topology")

_STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


class SchemaMismatch(ValueError):
    def __init__(self, path: str, expected: list[str], got: list[str]):
        missing = [c for c in expected if c not in got]
        extra = [c for c in got if c not in expected]
        super().__init__(
            f"{path}: column mismatch (missing: {missing or '-'}, unexpected: {extra or '-'})"
        )


@dataclass
class PlotJob:
    kind: str
    inputs: list[str]
    output: str
    labels: list[str] = field(default_factory=list)
    scenario: Optional[str] = None       # topology diagrams need node positions

    def label(self, i: int) -> str:
        if i < len(self.labels):
            return self.labels[i]
        return f"series {i + 1}"


def _read_csv(path: str, expected: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        got = reader.fieldnames or []
        if list(got) != expected:
            raise SchemaMismatch(path, expected, list(got))
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _ecdf(values: list[float]):
    xs = sorted(values)
    n = len(xs)
    ys = [(i + 1) / n for i in range(n)]
    return xs, ys


def _cdf_figure(job: PlotJob, column: str, xlabel: str):
    fig, ax = plt.subplots()
    for i, path in enumerate(job.inputs):
        rows = _read_csv(path, PER_CLIENT_COLUMNS)
        xs, ys = _ecdf([float(r[column]) for r in rows])
        ax.step([xs[0]] + xs, [0.0] + ys, where="post",
                color=_COLORS[i % len(_COLORS)], label=job.label(i))
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of clients")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    return fig


def _convergence_figure(job: PlotJob):
    fig, ax = plt.subplots()
    for i, path in enumerate(job.inputs):
        rows = _read_csv(path, PER_ROUND_COLUMNS)
        xs = [int(r["round"]) for r in rows]
        ys = [float(r["avg_latency_ms"]) for r in rows]
        ax.plot(xs, ys, color=_COLORS[i % len(_COLORS)], label=job.label(i))
    ax.set_xlabel("round")
    ax.set_ylabel("average receive latency (ms)")
    ax.legend(loc="upper right")
    return fig


def _topology_figure(job: PlotJob):
    if not job.scenario:
        raise ValueError("topology diagrams need --scenario with node positions")
    with open(job.scenario) as fh:
        scenario = json.load(fh)
    positions = {}
    kinds = {}
    for node in scenario["nodes"]:
        if "x" not in node:
            raise ValueError(f"node {node['id']} has no position")
        positions[node["id"]] = (node["x"], node["y"])
        kinds[node["id"]] = node["kind"]
    with open(job.inputs[0]) as fh:
        doc = json.load(fh)
    edges = doc.get("tree_edges", [])
    if not edges:
        raise ValueError(f"{job.inputs[0]}: no tree edges to draw")
    max_layers = max(e[2] for e in edges)

    fig, ax = plt.subplots()
    for parent, child, layers in sorted(edges):
        x0, y0 = positions[parent]
        x1, y1 = positions[child]
        shade = 0.15 + 0.85 * layers / max_layers   # darker = more layers
        ax.plot([x0, x1], [y0, y1], color=(0.1, 0.25, 0.6, shade), linewidth=1.8)
    for node_id, (x, y) in sorted(positions.items()):
        if kinds[node_id] == "sfu":
            ax.scatter([x], [y], marker="s", s=60, color="#d62728", zorder=3)
        else:
            ax.scatter([x], [y], marker="o", s=30, color="#2ca02c", zorder=3)
        ax.annotate(node_id, (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return fig


def render(job: PlotJob) -> str:
    """Render the job to its output path; returns the path written."""
    if job.kind not in KINDS:
        raise ValueError(f"unknown plot kind {job.kind!r}")
    if not job.inputs:
        raise ValueError("no input files")
    with plt.rc_context(_STYLE):
        if job.kind == "latency-cdf":
            fig = _cdf_figure(job, "latency_ms", "receive latency (ms)")
        elif job.kind == "bandwidth-cdf":
            fig = _cdf_figure(job, "layers", "delivered layers")
        elif job.kind == "convergence":
            fig = _convergence_figure(job)
        else:
            fig = _topology_figure(job)
        try:
            fig.savefig(job.output, metadata={"Software": None})
        finally:
            plt.close(fig)
    return job.output
