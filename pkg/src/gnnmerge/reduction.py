"""Target-node sampling and 1-hop condensation for statistics collection.

A target node's transform inputs at layer ``l`` depend only on its immediate
neighbors once the base model's ``H^{l-1}`` is fixed. So base activations are
computed once on the full graph, and the per-layer aggregation that produces
the captured rows runs on a graph containing only the targets, their
neighbors, and the edges into the targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import GnnModel, MessageOps, forward, layer_captures, layer_forward, layer_outputs
from .errors import ParameterError
from .graph import Graph


@dataclass(frozen=True)
class TargetSet:
    nodes: np.ndarray
    ratio: float
    seed: int

    def __len__(self) -> int:
        return int(self.nodes.shape[0])


def sample_targets(graph: Graph, ratio: float, seed: int, population=None) -> TargetSet:
    """Uniform sample of ``max(1, floor(ratio * n))`` nodes, sorted.

    ``population`` restricts sampling to a node subset (default: all nodes).
    """
    if not (0.0 < ratio <= 1.0):
        raise ParameterError(f"sample ratio must be in (0, 1], got {ratio}")
    if population is None:
        population = np.arange(graph.num_nodes, dtype=np.int64)
    else:
        population = np.unique(np.asarray(population, dtype=np.int64))
        if population.size and (population[0] < 0 or population[-1] >= graph.num_nodes):
            raise ParameterError("target population index out of range")
    n = population.shape[0]
    if ratio == 1.0 or n == 0:
        return TargetSet(population, ratio, seed)
    k = min(n, max(1, int(math.floor(ratio * n))))
    picks = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return TargetSet(population[np.sort(picks)], ratio, seed)


@dataclass(frozen=True, eq=False)
class MergeDomain:
    """A merging graph, optionally restricted to the nodes a model serves.

    Only rows of ``nodes`` contribute alignment statistics; aggregation still
    runs over the whole graph. ``nodes=None`` means every node.
    """

    graph: Graph
    nodes: np.ndarray | None = None

    def __post_init__(self):
        if self.nodes is not None:
            nodes = np.unique(np.asarray(self.nodes, dtype=np.int64))
            if nodes.size and (nodes[0] < 0 or nodes[-1] >= self.graph.num_nodes):
                raise ParameterError("merge domain node index out of range")
            object.__setattr__(self, "nodes", nodes)


@dataclass(frozen=True)
class CondensedView:
    """Local graph over ``node_ids`` holding only edges whose head is a target.

    ``target_rows[j]`` is the local index of ``targets.nodes[j]``. ``ops``
    carries the full-graph self-loop degrees so GCN normalization is exact.
    """

    graph: Graph
    node_ids: np.ndarray
    target_rows: np.ndarray
    ops: MessageOps

    @property
    def num_edges(self) -> int:
        return self.graph.num_edges


def condense_one_hop(graph: Graph, targets: TargetSet) -> CondensedView:
    t = targets.nodes
    starts, stops = graph.offsets[t], graph.offsets[t + 1]
    counts = stops - starts
    if counts.sum():
        gather = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
        nbrs = graph.targets[gather]
    else:
        nbrs = np.empty(0, dtype=np.int64)
    node_ids = np.union1d(t, nbrs).astype(np.int64)
    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[node_ids] = np.arange(node_ids.shape[0])
    row_counts = np.zeros(node_ids.shape[0], dtype=np.int64)
    row_counts[local[t]] = counts
    offsets = np.zeros(node_ids.shape[0] + 1, dtype=np.int64)
    np.cumsum(row_counts, out=offsets[1:])
    sub = Graph(int(node_ids.shape[0]), offsets, local[nbrs], graph.features[node_ids], None)
    ops = MessageOps(sub, degrees=graph.degrees_with_self_loop()[node_ids])
    return CondensedView(sub, node_ids, local[t], ops)


def _restrict(pairs, edge_dst, rows: np.ndarray, num_nodes: int):
    mask = np.zeros(num_nodes, dtype=bool)
    mask[rows] = True
    out = []
    for k, (z, g) in enumerate(pairs):
        if edge_dst is not None and k == len(pairs) - 1:
            keep = mask[edge_dst]
        else:
            keep = rows
        out.append((z[keep], g[keep]))
    return out


def target_captures(model: GnnModel, graph: Graph, targets: TargetSet | None = None, condense: bool = False):
    """Captured ``(z, g)`` rows per layer and transform, restricted to targets.

    Node-level transforms keep target rows; GAT attention transforms keep the
    edge rows whose target node is in the set. With ``condense`` the
    aggregation for each layer runs on the 1-hop condensed view.
    """
    n = graph.num_nodes
    if targets is not None and len(targets) == n and not condense:
        targets = None
    if targets is None and not condense:
        _, trace = forward(model, graph, capture=True)
        return [list(zip(trace.z[ell], trace.g[ell])) for ell in range(len(model.layers))]
    if not condense:
        _, trace = forward(model, graph, capture=True)
        return [
            _restrict(list(zip(trace.z[ell], trace.g[ell])), trace.edge_dst[ell], targets.nodes, n)
            for ell in range(len(model.layers))
        ]
    if targets is None:
        targets = TargetSet(np.arange(n, dtype=np.int64), 1.0, 0)
    hs = layer_outputs(model, graph)
    view = condense_one_hop(graph, targets)
    out = []
    for ell, spec in enumerate(model.layers):
        _, cache = layer_forward(spec, hs[ell][view.node_ids], view.ops)
        edge_dst = cache["edges"][0] if spec.arch == "GAT" else None
        out.append(_restrict(layer_captures(spec, cache), edge_dst, view.target_rows, view.graph.num_nodes))
    return out
