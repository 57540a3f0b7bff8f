"""Merging independently trained GNNs by aligning their node embeddings.

Three solvers share one skeleton: every base model must have the same
architecture, layer dimensions and transform count per layer.

* ``analytical_merge`` solves, for every layer ``l`` and transform ``k``, the
  least-squares problem ``min_W sum_i ||Z_i W - G_i||_F^2`` in closed form from
  the normal equations ``(sum Z_i^T Z_i) W = sum Z_i^T G_i``.
* ``iterative_merge`` minimizes the same per-transform objective by gradient
  descent, starting from the weight average.
* ``joint_merge`` trains the merged model end to end so its own per-layer
  embeddings match every base model's (the un-relaxed objective).

Per-task heads are never merged; they are carried over keyed by task-id.
Merging only ever sees label-stripped graphs.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import GnnModel, forward_with_caches, layer_backward, layer_forward, layer_outputs
from .errors import IncompatibilityError, OptimizationError, ParameterError, ShapeError, SingularityError
from .graph import Graph
from .linalg import cross_accumulate, gram_accumulate, solve_spd_with_ridge
from .reduction import MergeDomain, sample_targets, target_captures
from .trainer import Adam

log = logging.getLogger(__name__)

DIVERGENCE_PATIENCE = 10


def thread_count() -> int:
    env = os.environ.get("GNNMERGE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class MergeConfig:
    ridge: float | None = None  # None: 1e-6 * mean diagonal of s_zz, per transform
    iterative_lr: float | None = 0.01  # None: 1 / Lipschitz constant, per transform
    iterative_steps: int = 500
    iterative_tol: float = 0.0
    joint_lr: float = 0.05
    sample_ratio: float = 1.0
    condense: bool | None = None  # None: on when sample_ratio < 1
    seed: int = 0

    def __post_init__(self):
        if self.ridge is not None and self.ridge < 0:
            raise ParameterError("ridge must be nonnegative")
        if not (0.0 < self.sample_ratio <= 1.0):
            raise ParameterError("sample_ratio must be in (0, 1]")
        if self.iterative_steps < 0:
            raise ParameterError("iterative_steps must be nonnegative")

    @property
    def use_condense(self) -> bool:
        return self.sample_ratio < 1.0 if self.condense is None else self.condense


@dataclass
class TransformStats:
    s_zz: np.ndarray
    s_zg: np.ndarray
    g_sq: float = 0.0
    row_count: int = 0

    def objective(self, w: np.ndarray) -> float:
        """``sum_i ||Z_i W - G_i||_F^2`` evaluated from the sufficient statistics."""
        return float(np.sum(w * (self.s_zz @ w)) - 2.0 * np.sum(w * self.s_zg) + self.g_sq)


@dataclass
class MergeStatistics:
    per_transform: dict[tuple[int, int], TransformStats] = field(default_factory=dict)

    def __getitem__(self, key) -> TransformStats:
        return self.per_transform[key]

    def keys(self):
        return sorted(self.per_transform)


# -- helpers --------------------------------------------------------------------


def check_compatible(models: list[GnnModel]) -> None:
    if not models:
        raise ParameterError("need at least one model to merge")
    ref = models[0].skeleton()
    for i, m in enumerate(models[1:], start=1):
        sk = m.skeleton()
        if len(sk) != len(ref):
            raise IncompatibilityError(f"model {i} has {len(sk)} layers, model 0 has {len(ref)}")
        for ell, (a, b) in enumerate(zip(ref, sk)):
            if a != b:
                raise IncompatibilityError(f"model {i} differs from model 0 at layer {ell}: {b} vs {a}")


def _merging_domains(models, graphs) -> list[MergeDomain]:
    """Normalize the merging input to one label-free ``MergeDomain`` per model."""
    if isinstance(graphs, (Graph, MergeDomain)):
        graphs = [graphs]
    graphs = list(graphs)
    if len(graphs) == 1:
        graphs = graphs * len(models)
    if len(graphs) != len(models):
        raise ParameterError(f"{len(models)} models need 1 or {len(models)} merging graphs, got {len(graphs)}")
    out = []
    cache: dict[int, Graph] = {}
    for item in graphs:
        dom = item if isinstance(item, MergeDomain) else MergeDomain(item)
        g = dom.graph
        if id(g) not in cache:
            cache[id(g)] = g.without_labels()
        out.append(MergeDomain(cache[id(g)], dom.nodes))
    if models[0].layers:
        d = models[0].layers[0].in_dim
        for i, dom in enumerate(out):
            if dom.graph.feature_dim != d:
                raise ShapeError(f"merging graph {i} has feature_dim {dom.graph.feature_dim}, models expect {d}")
    return out


def _merging_graphs(models, graphs) -> list[Graph]:
    return [dom.graph for dom in _merging_domains(models, graphs)]


def _merge_heads(models: list[GnnModel]) -> tuple[dict, dict]:
    heads, kinds = {}, {}
    for m in models:
        for t in sorted(m.heads):
            if t in heads:
                if heads[t].shape != m.heads[t].shape or not np.array_equal(heads[t], m.heads[t]):
                    raise IncompatibilityError(f"two base models carry different heads for task {t!r}")
                continue
            heads[t] = m.heads[t].copy()
            kinds[t] = m.head_kinds[t]
    return heads, kinds


def assemble(models: list[GnnModel], transforms: dict[tuple[int, int], np.ndarray], method: str) -> GnnModel:
    """Merged model: base skeleton with the given transforms and all base heads."""
    ref = models[0]
    layers = []
    for ell, layer in enumerate(ref.layers):
        layers.append(layer.with_transforms([transforms[(ell, k)] for k in range(len(layer.transforms))]))
    heads, kinds = _merge_heads(models)
    meta = {
        "arch": ref.arch,
        "hidden_dim": ref.metadata.get("hidden_dim", str(ref.embedding_dim)),
        "merge_method": method,
        "num_models": str(len(models)),
    }
    return GnnModel(layers, heads, kinds, meta)


def _mean_transforms(models: list[GnnModel]) -> dict[tuple[int, int], np.ndarray]:
    # x0 + mean(x_i - x0) reproduces identical inputs bit-exactly
    out = {}
    n = len(models)
    for ell, layer in enumerate(models[0].layers):
        for k, base in enumerate(layer.transforms):
            delta = np.zeros_like(base)
            for m in models[1:]:
                delta += m.layers[ell].transforms[k] - base
            out[(ell, k)] = base + delta / n
    return out


# -- statistics -------------------------------------------------------------------


def _model_captures(model: GnnModel, domain: MergeDomain, config: MergeConfig):
    targets = None
    if config.sample_ratio < 1.0 or domain.nodes is not None:
        targets = sample_targets(domain.graph, config.sample_ratio, config.seed, population=domain.nodes)
    return target_captures(model, domain.graph, targets, condense=config.use_condense)


def collect_statistics(models: list[GnnModel], merging_graphs, config: MergeConfig | None = None) -> MergeStatistics:
    """Accumulate ``sum Z^T Z`` and ``sum Z^T G`` per (layer, transform).

    Captures run one base model per worker thread; the reduction is done in
    model-list order so results do not depend on the thread count.
    """
    config = config or MergeConfig()
    check_compatible(models)
    domains = _merging_domains(models, merging_graphs)
    jobs = list(zip(models, domains))
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            captured = list(pool.map(lambda mg: _model_captures(mg[0], mg[1], config), jobs))
    else:
        captured = [_model_captures(m, g, config) for m, g in jobs]
    stats = MergeStatistics()
    for ell, layer in enumerate(models[0].layers):
        for k, w in enumerate(layer.transforms):
            d_in, d_out = w.shape
            s_zz, s_zg = np.zeros((d_in, d_in)), np.zeros((d_in, d_out))
            g_sq, rows = 0.0, 0
            for per_model in captured:
                z, g = per_model[ell][k]
                s_zz = gram_accumulate(s_zz, z)
                s_zg = cross_accumulate(s_zg, z, g)
                g_sq += float(np.sum(g * g))
                rows += z.shape[0]
            stats.per_transform[(ell, k)] = TransformStats(s_zz, s_zg, g_sq, rows)
    return stats


# -- solvers --------------------------------------------------------------------------


def default_ridge(s_zz: np.ndarray) -> float:
    return 1e-6 * float(np.mean(np.diag(s_zz))) if s_zz.size else 0.0


def solve_statistics(stats: MergeStatistics, config: MergeConfig | None = None) -> dict[tuple[int, int], tuple[np.ndarray, float]]:
    """Closed-form weights and the ridge actually used, per (layer, transform)."""
    config = config or MergeConfig()

    def solve(key):
        st = stats[key]
        ridge = default_ridge(st.s_zz) if config.ridge is None else config.ridge
        try:
            return solve_spd_with_ridge(st.s_zz, st.s_zg, ridge)
        except SingularityError as exc:
            raise SingularityError(f"layer {key[0]}, transform {key[1]}: {exc}", ridge=exc.ridge) from None

    keys = stats.keys()
    workers = min(thread_count(), max(1, len(keys)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(solve, keys))
    else:
        results = [solve(k) for k in keys]
    return dict(zip(keys, results))


def analytical_merge(models: list[GnnModel], merging_graphs, config: MergeConfig | None = None) -> GnnModel:
    """Closed-form merge: one ridge-regularized least-squares solve per transform."""
    config = config or MergeConfig()
    stats = collect_statistics(models, merging_graphs, config)
    solved = solve_statistics(stats, config)
    return assemble(models, {k: w for k, (w, _) in solved.items()}, "analytical")


def descend(st: TransformStats, w0: np.ndarray, lr: float | None, steps: int, tol: float = 0.0) -> np.ndarray:
    """Gradient descent on one transform's least-squares objective.

    The gradient ``2 (s_zz W - s_zg)`` is divided by the row count. ``lr=None``
    uses the step ``1/L`` with ``L = 2 lambda_max(s_zz) / rows``.
    """
    rows = max(st.row_count, 1)
    if lr is None:
        lam = float(np.linalg.eigvalsh(st.s_zz)[-1]) if st.s_zz.size else 0.0
        lr = rows / (2.0 * lam) if lam > 0 else 0.0
    w = w0.copy()
    if lr == 0.0 or steps == 0:
        return w
    s_zz, s_zg = st.s_zz, st.s_zg
    scale = 2.0 / rows
    b_flat = s_zg.ravel()
    tol_abs = tol * float(np.linalg.norm(s_zg)) / rows
    prev = np.inf
    rising = 0
    for _ in range(steps):
        sw = s_zz @ w
        # objective at the current iterate, reusing s_zz @ w
        cur = float(np.dot(w.ravel(), sw.ravel() - 2.0 * b_flat)) + st.g_sq
        # rounding noise near the optimum does not count as a rise
        rising = rising + 1 if cur > prev + 1e-12 * abs(prev) else 0
        if rising >= DIVERGENCE_PATIENCE or not np.isfinite(cur):
            raise OptimizationError(
                f"objective rose for {DIVERGENCE_PATIENCE} consecutive steps at lr={lr:g}; try a smaller learning rate"
            )
        prev = cur
        grad = sw - s_zg
        grad *= scale
        if tol and float(np.linalg.norm(grad)) <= tol_abs:
            break
        grad *= lr
        w -= grad
    return w


def iterative_merge(models: list[GnnModel], merging_graphs, config: MergeConfig | None = None) -> GnnModel:
    """Gradient-descent merge on the per-transform objective, started at the weight average."""
    config = config or MergeConfig()
    stats = collect_statistics(models, merging_graphs, config)
    init = _mean_transforms(models)
    keys = stats.keys()

    def run(key):
        try:
            return descend(stats[key], init[key], config.iterative_lr, config.iterative_steps, config.iterative_tol)
        except OptimizationError as exc:
            raise OptimizationError(f"layer {key[0]}, transform {key[1]}: {exc}") from None

    workers = min(thread_count(), max(1, len(keys)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, keys))
    else:
        results = [run(k) for k in keys]
    return assemble(models, dict(zip(keys, results)), "iterative")


def weight_average(models: list[GnnModel]) -> GnnModel:
    check_compatible(models)
    return assemble(models, _mean_transforms(models), "wavg")


# -- joint (end-to-end) alignment -----------------------------------------------------


def joint_objective(merged: GnnModel, models: list[GnnModel], merging_graphs) -> float:
    """``sum_i sum_l ||H_M^l - H_i^l||_F^2`` with the merged model fed its own embeddings."""
    graphs = _merging_graphs(models, merging_graphs)
    total = 0.0
    for m, g in zip(models, graphs):
        mine, base = layer_outputs(merged, g), layer_outputs(m, g)
        for a, b in zip(mine[1:], base[1:]):
            total += float(np.sum((a - b) ** 2))
    return total


def relaxed_objective(merged: GnnModel, models: list[GnnModel], merging_graphs) -> float:
    """``sum_i sum_l ||layer_M^l(H_i^{l-1}) - H_i^l||_F^2``: each merged layer sees base inputs."""
    graphs = _merging_graphs(models, merging_graphs)
    total = 0.0
    for m, g in zip(models, graphs):
        base = layer_outputs(m, g)
        for ell, spec in enumerate(merged.layers):
            out, _ = layer_forward(spec, base[ell], g)
            total += float(np.sum((out - base[ell + 1]) ** 2))
    return total


def transform_objective(stats: MergeStatistics, model: GnnModel) -> float:
    """Sum over (layer, transform) of the per-transform least-squares objective."""
    return sum(stats[(ell, k)].objective(w) for ell, layer in enumerate(model.layers) for k, w in enumerate(layer.transforms))


def joint_merge(models: list[GnnModel], merging_graphs, config: MergeConfig | None = None) -> tuple[GnnModel, list[float]]:
    """End-to-end embedding alignment with Adam from the weight average.

    Minimizes the joint objective divided by node count per merging graph.
    Returns the merged model and the per-step objective trace.
    """
    config = config or MergeConfig()
    check_compatible(models)
    graphs = _merging_graphs(models, merging_graphs)
    merged = weight_average(models)
    merged.metadata["merge_method"] = "joint"
    targets = [layer_outputs(m, g) for m, g in zip(models, graphs)]
    params = [p for layer in merged.layers for p in layer.transforms]
    opt = Adam(config.joint_lr)
    history: list[float] = []
    rising = 0
    for _ in range(config.iterative_steps):
        grads = [np.zeros_like(p) for p in params]
        loss = 0.0
        for g, base in zip(graphs, targets):
            hs, caches = forward_with_caches(merged, g)
            scale = 1.0 / max(g.num_nodes, 1)
            dh = np.zeros_like(hs[-1])
            per_layer: list[list[np.ndarray]] = [None] * len(merged.layers)
            for ell in range(len(merged.layers), 0, -1):
                diff = hs[ell] - base[ell]
                loss += scale * float(np.sum(diff * diff))
                dh = dh + 2.0 * scale * diff
                dh, per_layer[ell - 1] = layer_backward(merged.layers[ell - 1], caches[ell - 1], dh, g)
            flat = [x for lg in per_layer for x in lg]
            for acc, x in zip(grads, flat):
                acc += x
        if history:
            rising = rising + 1 if loss > history[-1] else 0
        history.append(loss)
        # Adam jitters near an optimum; only a run of rises that also loses
        # the progress made since the start counts as divergence
        if not np.isfinite(loss) or (rising >= DIVERGENCE_PATIENCE and loss > 1.01 * history[0]):
            raise OptimizationError(
                f"joint objective rose for {DIVERGENCE_PATIENCE} consecutive steps above its starting value; "
                "try a smaller learning rate"
            )
        opt.step(params, grads)
    return merged, history


# -- diagnostics ----------------------------------------------------------------------


def alignment_report(merged: GnnModel, base: GnnModel, graph: Graph) -> list[float]:
    """Per layer, mean over nodes of ``||h_M - h_base||_2`` (each model runs its own forward)."""
    check_compatible([base, merged])
    graph = graph.without_labels()
    mine, theirs = layer_outputs(merged, graph), layer_outputs(base, graph)
    return [float(np.mean(np.linalg.norm(a - b, axis=1))) if a.shape[0] else 0.0 for a, b in zip(mine[1:], theirs[1:])]


def write_alignment_csv(values: list[float], path) -> None:
    lines = ["layer,mean_l2"] + [f"{ell + 1},{v:.9g}" for ell, v in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


MERGE_METHODS = {
    "analytical": analytical_merge,
    "iterative": iterative_merge,
    "joint": lambda models, graphs, config=None: joint_merge(models, graphs, config)[0],
    "wavg": lambda models, graphs=None, config=None: weight_average(models),
}
