"""Full-batch training of base models with hand-written reverse accumulation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .engine import (
    GnnModel,
    forward_with_caches,
    head_forward,
    init_model,
    layer_backward,
    layer_forward,
)
from .errors import ConfigurationError, NumericError, ParameterError
from .graph import EdgeSplit, Graph, NodeSplit

log = logging.getLogger(__name__)

NODE, LINK = "node", "link"


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    split: NodeSplit | EdgeSplit
    num_classes: int = 0

    def __post_init__(self):
        if self.kind == NODE and not isinstance(self.split, NodeSplit):
            raise ConfigurationError("node classification needs a NodeSplit")
        if self.kind == LINK and not isinstance(self.split, EdgeSplit):
            raise ConfigurationError("link prediction needs an EdgeSplit")
        if self.kind not in (NODE, LINK):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")

    @property
    def output_dim(self) -> int | None:
        return self.num_classes if self.kind == NODE else None

    def to_json(self, graph_file: str | None = None) -> str:
        if self.kind == NODE:
            split = {k: getattr(self.split, k).tolist() for k in ("train", "val", "test")}
        else:
            split = {
                f"{p}_{s}": getattr(self.split, f"{p}_{s}").tolist()
                for p in ("train", "val", "test")
                for s in ("pos", "neg")
            }
        doc = {"task_id": self.task_id, "kind": self.kind, "num_classes": self.num_classes, "split": split}
        if graph_file is not None:
            doc["graph"] = graph_file
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> TaskSpec:
        s = doc["split"]
        if doc["kind"] == NODE:
            split = NodeSplit(*(np.asarray(s[k], dtype=np.int64) for k in ("train", "val", "test")))
        else:
            split = EdgeSplit(
                *(
                    np.asarray(s[f"{p}_{q}"], dtype=np.int64).reshape(-1, 2)
                    for p in ("train", "val", "test")
                    for q in ("pos", "neg")
                )
            )
        return cls(doc["task_id"], doc["kind"], split, int(doc.get("num_classes", 0)))


def save_task(task: TaskSpec, path, graph_file: str | None = None) -> None:
    Path(path).write_text(task.to_json(graph_file) + "\n")


def load_task(path) -> tuple[TaskSpec, str | None]:
    """Returns the task and the graph path it references (resolved), if any."""
    path = Path(path)
    doc = json.loads(path.read_text())
    graph = doc.get("graph")
    return TaskSpec.from_dict(doc), (str(path.parent / graph) if graph else None)


@dataclass
class TrainConfig:
    task: TaskSpec
    arch: str = "GCN"
    num_layers: int = 2
    hidden_dim: int = 128
    learning_rate: float = 0.05
    epochs: int = 200
    seed: int = 0
    gin_depth: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")


def model_parameters(model: GnnModel) -> list[tuple[str, np.ndarray]]:
    """Every trainable array with a stable name; arrays are the model's own."""
    out = []
    for ell, layer in enumerate(model.layers):
        for k, m in enumerate(layer.weights):
            out.append((f"layer{ell}.W{k}", m))
        if layer.gat_attention is not None:
            out.append((f"layer{ell}.attention", layer.gat_attention))
    for t in sorted(model.heads):
        out.append((f"head.{t}", model.heads[t]))
    return out


# -- losses -------------------------------------------------------------------


def _node_loss(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray):
    lp = log_softmax(logits[idx], axis=1)
    y = labels[idx]
    loss = -float(np.mean(lp[np.arange(idx.size), y]))
    dl = softmax(logits[idx], axis=1)
    dl[np.arange(idx.size), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[idx] = dl / idx.size
    return loss, dlogits


def _link_loss(emb: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    pairs = np.concatenate([pos, neg]).reshape(-1, 2)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    u, v = pairs[:, 0], pairs[:, 1]
    s = np.einsum("ij,ij->i", emb[u], emb[v])
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
    ds = (expit(s) - y) / y.size
    demb = np.zeros_like(emb)
    np.add.at(demb, u, ds[:, None] * emb[v])
    np.add.at(demb, v, ds[:, None] * emb[u])
    return loss, demb


def _check_task(model: GnnModel, graph: Graph, task: TaskSpec) -> None:
    if task.task_id not in model.heads:
        raise ConfigurationError(f"model has no head for task {task.task_id!r}")
    if model.head_kinds.get(task.task_id) != task.kind:
        raise ConfigurationError(f"head {task.task_id!r} is not a {task.kind} head")
    if model.layers and graph.feature_dim != model.layers[0].in_dim:
        raise ConfigurationError(
            f"graph feature_dim {graph.feature_dim} != model input dim {model.layers[0].in_dim}"
        )
    if task.kind == NODE:
        if graph.labels is None:
            raise ConfigurationError("node classification needs graph labels")
        try:
            task.split.validate(graph.num_nodes)
        except ParameterError as exc:
            raise ConfigurationError(f"task {task.task_id!r}: {exc}") from None
        y = graph.labels[task.split.train]
        if y.size and (y.min() < 0 or y.max() >= model.heads[task.task_id].shape[1]):
            raise ConfigurationError("train labels outside the head's class range")
    else:
        pairs = np.concatenate([task.split.train_pos, task.split.train_neg])
        if pairs.size and (pairs.min() < 0 or pairs.max() >= graph.num_nodes):
            raise ConfigurationError(f"task {task.task_id!r}: edge pair index out of range")


def loss_and_grad(model: GnnModel, graph: Graph, task: TaskSpec) -> tuple[float, list[np.ndarray]]:
    """Task loss and gradients aligned with ``model_parameters(model)``."""
    _check_task(model, graph, task)
    hs, caches = forward_with_caches(model, graph)
    emb = hs[-1]
    head = model.heads[task.task_id]
    out = head_forward(emb, head)
    if task.kind == NODE:
        loss, dout = _node_loss(out, graph.labels, task.split.train)
    else:
        loss, dout = _link_loss(out, task.split.train_pos, task.split.train_neg)
    if not np.isfinite(loss):
        for name, p in model_parameters(model):
            if not np.all(np.isfinite(p)):
                raise NumericError(f"non-finite loss; first offending tensor is {name}")
        for ell, h in enumerate(hs):
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite loss; first offending tensor is H^{ell}")
        raise NumericError("non-finite loss in head output")
    head_grad = emb.T @ dout
    dh = dout @ head.T
    layer_grads: list[list[np.ndarray]] = [None] * len(model.layers)
    for ell in range(len(model.layers) - 1, -1, -1):
        dh, layer_grads[ell] = layer_backward(model.layers[ell], caches[ell], dh, graph)
    grads = [g for lg in layer_grads for g in lg]
    for t in sorted(model.heads):
        grads.append(head_grad if t == task.task_id else np.zeros_like(model.heads[t]))
    return loss, grads


def task_loss(model: GnnModel, graph: Graph, task: TaskSpec) -> float:
    _check_task(model, graph, task)
    emb = forward_with_caches(model, graph)[0][-1]
    out = head_forward(emb, model.heads[task.task_id])
    if task.kind == NODE:
        return _node_loss(out, graph.labels, task.split.train)[0]
    return _link_loss(out, task.split.train_pos, task.split.train_neg)[0]


# -- optimizer ------------------------------------------------------------------


@dataclass
class Adam:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.step_count, 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(graph: Graph, config: TrainConfig) -> GnnModel:
    """Initialize a model for ``config.task`` and run full-batch Adam."""
    task = config.task
    if task.kind == NODE:
        if task.num_classes < 1:
            raise ConfigurationError("node classification needs num_classes >= 1")
        head = (NODE, task.num_classes)
    else:
        head = (LINK, config.hidden_dim)
    model = init_model(
        config.arch,
        graph.feature_dim,
        config.hidden_dim,
        config.num_layers,
        {task.task_id: head},
        config.seed,
        config.gin_depth,
    )
    params = [p for _, p in model_parameters(model)]
    opt = Adam(config.learning_rate, config.betas, config.eps)
    losses = []
    for epoch in range(config.epochs):
        loss, grads = loss_and_grad(model, graph, task)
        losses.append(loss)
        opt.step(params, grads)
        if config.log_every and (epoch % config.log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d loss %.6f", epoch, loss)
    final = task_loss(model, graph, task) if config.epochs else None
    model.metadata.update(
        {
            "epochs": str(config.epochs),
            "learning_rate": repr(config.learning_rate),
            "num_layers": str(config.num_layers),
            "initial_loss": repr(losses[0]) if losses else "nan",
            "final_loss": repr(final) if final is not None else "nan",
        }
    )
    return model


# -- finite differences ---------------------------------------------------------


def _kink_pattern(model: GnnModel, graph: Graph) -> bytes:
    """Sign pattern of every ReLU/LeakyReLU input; changes mark a crossed kink."""
    h = graph.features
    bits = []
    for spec in model.layers:
        h, cache = layer_forward(spec, h, graph)
        if spec.activation == "relu":
            bits.append(cache["pre"] > 0)
        for g in cache.get("inner_g", [])[:-1]:
            bits.append(g > 0)
        if "logits" in cache:
            bits.append(cache["logits"] > 0)
    return b"".join(np.packbits(b.ravel()).tobytes() for b in bits)


def grad_check(
    model: GnnModel,
    graph: Graph,
    task: TaskSpec,
    num_coords: int = 50,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly over all trainable scalars. A coordinate
    whose ``±step`` perturbation flips any activation kink is redrawn.
    """
    if num_coords < 1:
        raise ConfigurationError("num_coords must be >= 1")
    model = model.copy()
    named = model_parameters(model)
    params = [p for _, p in named]
    _, grads = loss_and_grad(model, graph, task)
    sizes = np.array([p.size for p in params])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    worst, checked, attempts = 0.0, 0, 0
    while checked < num_coords:
        attempts += 1
        if attempts > 50 * num_coords:
            raise NumericError("could not find enough kink-free coordinates")
        flat = int(rng.integers(bounds[-1]))
        t = int(np.searchsorted(bounds, flat, side="right"))
        idx = np.unravel_index(flat - (bounds[t - 1] if t else 0), params[t].shape)
        p = params[t]
        orig = p[idx]
        p[idx] = orig + step
        plus, kinks_plus = task_loss(model, graph, task), _kink_pattern(model, graph)
        p[idx] = orig - step
        minus, kinks_minus = task_loss(model, graph, task), _kink_pattern(model, graph)
        p[idx] = orig
        if kinks_plus != kinks_minus:
            continue
        numeric = (plus - minus) / (2.0 * step)
        analytic = grads[t][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    return worst
