"""Task metrics, merged-model evaluation, timing benchmarks and CSV export."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .engine import GnnModel, decode_links, forward, head_forward
from .errors import ConfigurationError, ParameterError
from .graph import Graph
from .merge import MergeConfig, analytical_merge, iterative_merge
from .trainer import LINK, NODE, TaskSpec, TrainConfig, train


def accuracy(logits, labels, mask) -> float:
    """Fraction of masked nodes whose argmax logit (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ParameterError("accuracy needs a nonempty mask")
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == labels[idx]))


def roc_auc(scores, binary_labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("roc_auc needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class TaskResult:
    task_id: str
    metric: str
    value: float
    split: str


@dataclass
class EvalReport:
    rows: list[TaskResult] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def value(self, task_id: str) -> float:
        for r in self.rows:
            if r.task_id == task_id:
                return r.value
        raise KeyError(task_id)

    def to_text(self) -> str:
        lines = [f"{'task':<12}{'metric':<10}{'split':<8}{'value':>10}"]
        lines += [f"{r.task_id:<12}{r.metric:<10}{r.split:<8}{r.value:>10.4f}" for r in self.rows]
        for ell, v in enumerate(self.alignment, start=1):
            lines.append(f"alignment layer {ell}: mean_l2 = {v:.6g}")
        for k in sorted(self.timings):
            lines.append(f"{k}: {self.timings[k]:.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["task_id,metric,split,value"]
        lines += [f"{r.task_id},{r.metric},{r.split},{r.value:.9g}" for r in self.rows]
        return "\n".join(lines) + "\n"


def evaluate_task(model: GnnModel, task: TaskSpec, graph: Graph, split: str = "test", embeddings=None) -> TaskResult:
    if task.task_id not in model.heads:
        raise ConfigurationError(f"model has no head for task {task.task_id!r}")
    emb = forward(model, graph)[0] if embeddings is None else embeddings
    out = head_forward(emb, model.heads[task.task_id])
    if task.kind == NODE:
        if graph.labels is None:
            raise ConfigurationError(f"task {task.task_id!r} needs a labeled graph")
        return TaskResult(task.task_id, "accuracy", accuracy(out, graph.labels, getattr(task.split, split)), split)
    pos, neg = task.split.partition(split)
    scores = decode_links(out, np.concatenate([pos, neg]).reshape(-1, 2))
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return TaskResult(task.task_id, "roc_auc", roc_auc(scores, labels), split)


def evaluate_merged(merged: GnnModel, tasks: list[tuple[TaskSpec, Graph]], split: str = "test") -> EvalReport:
    """One forward per distinct graph, then each task's head and metric."""
    for task, _ in tasks:
        if task.task_id not in merged.heads:
            raise ConfigurationError(f"merged model has no head for task {task.task_id!r}")
    cache: dict[int, np.ndarray] = {}
    report = EvalReport()
    for task, graph in tasks:
        key = id(graph)
        if key not in cache:
            cache[key] = forward(merged, graph)[0]
        report.rows.append(evaluate_task(merged, task, graph, split, cache[key]))
    return report


def bench_merge(
    models: list[GnnModel],
    merging_graphs,
    scratch_graph: Graph,
    scratch_config: TrainConfig,
    merge_config: MergeConfig | None = None,
    include_iterative: bool = True,
) -> EvalReport:
    """Wall-clock comparison of training from scratch against merging.

    Timed regions cover only the computation: graphs and models are already
    in memory when the clock starts.
    """
    merge_config = merge_config or MergeConfig()
    report = EvalReport()
    t0 = time.perf_counter()
    train(scratch_graph, scratch_config)
    report.timings["scratch_train_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    analytical_merge(models, merging_graphs, merge_config)
    report.timings["analytical_merge_s"] = time.perf_counter() - t0
    report.timings["speedup_analytical"] = report.timings["scratch_train_s"] / report.timings["analytical_merge_s"]
    if include_iterative:
        t0 = time.perf_counter()
        iterative_merge(models, merging_graphs, merge_config)
        report.timings["iterative_merge_s"] = time.perf_counter() - t0
        report.timings["speedup_iterative"] = report.timings["scratch_train_s"] / report.timings["iterative_merge_s"]
    return report


def export_embeddings(model: GnnModel, graph: Graph, path) -> None:
    """Final-layer embeddings as CSV (``node_id,dim_0,...``), 9 significant digits."""
    emb = forward(model, graph)[0]
    header = "node_id," + ",".join(f"dim_{j}" for j in range(emb.shape[1]))
    lines = [header]
    for v, row in enumerate(emb):
        lines.append(f"{v}," + ",".join(f"{x:.9g}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n")
