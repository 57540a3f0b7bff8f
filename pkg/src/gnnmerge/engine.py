"""Message-passing layers (GCN, GraphSAGE, GIN, GAT), forward passes with
activation capture, per-layer backward rules and model serialization.

Every layer is bias-free. A layer exposes its learnable linear transforms in a
fixed order (``LayerSpec.transforms``):

* GCN:  ``[W]``
* SAGE: ``[W1, W2]`` (self half, neighbor-mean half)
* GIN:  ``[W_1, ..., W_N]`` (inner MLP)
* GAT:  ``[W, a]`` (node transform, attention vector)

For each transform the forward pass can capture the input rows ``z`` and the
output rows ``g = z @ W`` that the analytical merge consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import FormatError, ShapeError
from .graph import Graph

ARCHS = ("GCN", "SAGE", "GIN", "GAT")
ACTIVATIONS = ("relu", "identity")
LEAKY_SLOPE = 0.2

MODEL_MAGIC = b"GNMM"
MODEL_VERSION = 1


# -- propagation operators ----------------------------------------------------


class MessageOps:
    """Sparse aggregation operators derived from a graph's CSR structure.

    ``degrees`` overrides the self-loop degrees used by GCN normalization; the
    1-hop condensed views rely on it to keep full-graph degrees.
    """

    def __init__(self, graph: Graph, degrees: np.ndarray | None = None):
        n = graph.num_nodes
        self.num_nodes = n
        self.degrees = graph.degrees_with_self_loop() if degrees is None else np.asarray(degrees)
        counts = graph.out_degrees()
        ones = np.ones(graph.num_edges)
        self.adj = sp.csr_matrix((ones, graph.targets, graph.offsets), shape=(n, n))
        self._graph = graph
        self._counts = counts
        self._gcn = self._mean = self._gin = None
        self._gat = None

    @property
    def gcn(self) -> sp.csr_matrix:
        if self._gcn is None:
            inv_sqrt = 1.0 / np.sqrt(self.degrees.astype(np.float64))
            a_hat = self.adj + sp.identity(self.num_nodes, format="csr")
            self._gcn = sp.csr_matrix(sp.diags(inv_sqrt) @ a_hat @ sp.diags(inv_sqrt))
        return self._gcn

    @property
    def mean(self) -> sp.csr_matrix:
        if self._mean is None:
            inv = np.zeros(self.num_nodes)
            nz = self._counts > 0
            inv[nz] = 1.0 / self._counts[nz]
            self._mean = sp.csr_matrix(sp.diags(inv) @ self.adj)
        return self._mean

    @property
    def gin(self) -> sp.csr_matrix:
        if self._gin is None:
            self._gin = sp.csr_matrix(self.adj + sp.identity(self.num_nodes, format="csr"))
        return self._gin

    @property
    def gat_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dst, src, indptr) over attended pairs ``N_v ∪ {v}``, sorted by (dst, src)."""
        if self._gat is None:
            g, n = self._graph, self.num_nodes
            node = np.arange(n, dtype=np.int64)
            dst = np.concatenate([g.sources(), node])
            src = np.concatenate([g.targets, node])
            order = np.lexsort((src, dst))
            dst, src = dst[order], src[order]
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(self._counts + 1, out=indptr[1:])
            self._gat = (dst, src, indptr)
        return self._gat


def message_ops(graph) -> MessageOps:
    if isinstance(graph, MessageOps):
        return graph
    ops = graph._cache.get("ops")
    if ops is None:
        ops = graph._cache["ops"] = MessageOps(graph)
    return ops


# -- model containers ---------------------------------------------------------


@dataclass
class LayerSpec:
    arch: str
    in_dim: int
    out_dim: int
    weights: list[np.ndarray]
    gat_attention: np.ndarray | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ShapeError(f"unknown architecture {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if self.gat_attention is not None:
            self.gat_attention = np.asarray(self.gat_attention, dtype=np.float64)
        self.check()

    def check(self) -> None:
        i, o = self.in_dim, self.out_dim
        shapes = [w.shape for w in self.weights]
        if self.arch in ("GCN", "GAT"):
            ok = shapes == [(i, o)]
        elif self.arch == "SAGE":
            if o % 2:
                raise ShapeError(f"SAGE out_dim must be even, got {o}")
            ok = shapes == [(i, o // 2), (i, o // 2)]
        else:
            ok = len(shapes) >= 1 and all(len(s) == 2 for s in shapes)
            ok = ok and shapes[0][0] == i and shapes[-1][1] == o
            ok = ok and all(a[1] == b[0] for a, b in zip(shapes, shapes[1:]))
        if not ok:
            raise ShapeError(f"{self.arch} layer {i}->{o} has inconsistent weight shapes {shapes}")
        if (self.gat_attention is not None) != (self.arch == "GAT"):
            raise ShapeError("attention vector must be present exactly for GAT layers")
        if self.arch == "GAT" and self.gat_attention.shape != (2 * o, 1):
            raise ShapeError(f"GAT attention must be {(2 * o, 1)}, got {self.gat_attention.shape}")

    @property
    def transforms(self) -> list[np.ndarray]:
        return self.weights + ([self.gat_attention] if self.arch == "GAT" else [])

    def with_transforms(self, mats) -> LayerSpec:
        mats = [np.array(m, dtype=np.float64) for m in mats]
        if self.arch == "GAT":
            return LayerSpec(self.arch, self.in_dim, self.out_dim, mats[:1], mats[1], self.activation)
        return LayerSpec(self.arch, self.in_dim, self.out_dim, mats, None, self.activation)

    def signature(self) -> tuple:
        return (self.arch, self.in_dim, self.out_dim, self.activation, tuple(m.shape for m in self.transforms))


@dataclass
class GnnModel:
    layers: list[LayerSpec]
    heads: dict[str, np.ndarray] = field(default_factory=dict)
    head_kinds: dict[str, str] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for task_id, head in self.heads.items():
            if self.layers and head.shape[0] != self.embedding_dim:
                raise ShapeError(f"head {task_id!r} has {head.shape[0]} rows, embeddings have {self.embedding_dim}")
            self.head_kinds.setdefault(task_id, "node")

    @property
    def arch(self) -> str:
        return self.layers[0].arch if self.layers else self.metadata.get("arch", "NONE")

    @property
    def embedding_dim(self) -> int | None:
        return self.layers[-1].out_dim if self.layers else None

    def skeleton(self) -> list[tuple]:
        return [layer.signature() for layer in self.layers]

    def backbone_parameter_count(self) -> int:
        return sum(m.size for layer in self.layers for m in layer.transforms)

    def copy(self) -> GnnModel:
        return GnnModel(
            [layer.with_transforms(layer.transforms) for layer in self.layers],
            {k: v.copy() for k, v in self.heads.items()},
            dict(self.head_kinds),
            dict(self.metadata),
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_layer(rng, arch: str, in_dim: int, out_dim: int, activation: str, gin_depth: int = 2) -> LayerSpec:
    if arch == "SAGE":
        if out_dim % 2:
            raise ShapeError(f"SAGE out_dim must be even, got {out_dim}")
        weights = [glorot(rng, in_dim, out_dim // 2), glorot(rng, in_dim, out_dim // 2)]
    elif arch == "GIN":
        dims = [in_dim] + [out_dim] * gin_depth
        weights = [glorot(rng, a, b) for a, b in zip(dims, dims[1:])]
    else:
        weights = [glorot(rng, in_dim, out_dim)]
    attention = glorot(rng, 2 * out_dim, 1) if arch == "GAT" else None
    return LayerSpec(arch, in_dim, out_dim, weights, attention, activation)


def init_model(
    arch: str,
    in_dim: int,
    hidden_dim: int,
    num_layers: int,
    heads: dict[str, tuple[str, int]],
    seed: int,
    gin_depth: int = 2,
) -> GnnModel:
    """Seeded Glorot-uniform model; ReLU between layers, identity after the last.

    ``heads`` maps task-id to ``(kind, output_dim)`` with kind ``"node"`` or
    ``"link"``. Heads are initialized after the backbone in sorted task-id order.
    """
    if arch not in ARCHS:
        raise ShapeError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    layers = []
    dim = in_dim
    for ell in range(num_layers):
        act = "identity" if ell == num_layers - 1 else "relu"
        layers.append(init_layer(rng, arch, dim, hidden_dim, act, gin_depth))
        dim = hidden_dim
    head_mats, kinds = {}, {}
    for task_id in sorted(heads):
        kind, out = heads[task_id]
        head_mats[task_id] = glorot(rng, dim, out)
        kinds[task_id] = kind
    meta = {"arch": arch, "hidden_dim": str(hidden_dim), "seed": str(seed)}
    return GnnModel(layers, head_mats, kinds, meta)


# -- layer forward / backward -------------------------------------------------


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else x


def _act_grad(name: str, pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (pre > 0.0) if name == "relu" else grad


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, LEAKY_SLOPE * x)


def _check_input(spec: LayerSpec, h_prev: np.ndarray, ops: MessageOps) -> None:
    if h_prev.ndim != 2 or h_prev.shape != (ops.num_nodes, spec.in_dim):
        raise ShapeError(
            f"{spec.arch} layer expects input ({ops.num_nodes}, {spec.in_dim}), got {h_prev.shape}"
        )


def layer_forward(spec: LayerSpec, h_prev: np.ndarray, graph) -> tuple[np.ndarray, dict]:
    """Run one layer; returns the embeddings and a cache for capture/backward."""
    ops = message_ops(graph)
    _check_input(spec, h_prev, ops)
    cache: dict = {"h_prev": h_prev}
    if spec.arch == "GCN":
        z = ops.gcn @ h_prev
        pre = z @ spec.weights[0]
        cache["z"] = [z]
    elif spec.arch == "SAGE":
        k = ops.mean @ h_prev
        pre = np.concatenate([h_prev @ spec.weights[0], k @ spec.weights[1]], axis=1)
        cache["z"] = [h_prev, k]
    elif spec.arch == "GIN":
        x = ops.gin @ h_prev
        zs, gs = [], []
        for n, w in enumerate(spec.weights):
            if n:
                x = np.maximum(gs[-1], 0.0)
            zs.append(x)
            gs.append(x @ w)
        pre = gs[-1]
        cache["z"], cache["inner_g"] = zs, gs
    else:
        dst, src, indptr = ops.gat_edges
        w = spec.weights[0]
        d = spec.out_dim
        hw = h_prev @ w
        a = spec.gat_attention[:, 0]
        logits = (hw @ a[:d])[dst] + (hw @ a[d:])[src]
        e = _leaky(logits)
        seg_max = np.maximum.reduceat(e, indptr[:-1])
        ex = np.exp(e - seg_max[dst])
        alpha = ex / np.add.reduceat(ex, indptr[:-1])[dst]
        att = sp.csr_matrix((alpha, src, indptr), shape=(ops.num_nodes, ops.num_nodes))
        z_node = att @ h_prev
        pre = att @ hw
        cache.update(z=[z_node], hw=hw, logits=logits, alpha=alpha, att=att, edges=(dst, src, indptr))
    cache["pre"] = pre
    return _act(spec.activation, pre), cache


def layer_captures(spec: LayerSpec, cache: dict) -> list[tuple[np.ndarray, np.ndarray]]:
    """(z, g) pairs for every transform of the layer, in ``transforms`` order."""
    out = [(z, z @ w) for z, w in zip(cache["z"], spec.weights)]
    if spec.arch == "GAT":
        dst, src, _ = cache["edges"]
        hw = cache["hw"]
        z_edge = np.concatenate([hw[dst], hw[src]], axis=1)
        out.append((z_edge, z_edge @ spec.gat_attention))
    return out


def layer_backward(spec: LayerSpec, cache: dict, dh: np.ndarray, graph) -> tuple[np.ndarray, list[np.ndarray]]:
    """Reverse-accumulate through one layer.

    Returns ``(d h_prev, grads)`` with ``grads`` aligned to ``spec.transforms``.
    ReLU's subgradient at 0 is 0.
    """
    ops = message_ops(graph)
    dpre = _act_grad(spec.activation, cache["pre"], dh)
    h_prev = cache["h_prev"]
    if spec.arch == "GCN":
        w = spec.weights[0]
        grads = [cache["z"][0].T @ dpre]
        dh_prev = ops.gcn.T @ (dpre @ w.T)
    elif spec.arch == "SAGE":
        half = spec.out_dim // 2
        d1, d2 = dpre[:, :half], dpre[:, half:]
        w1, w2 = spec.weights
        grads = [h_prev.T @ d1, cache["z"][1].T @ d2]
        dh_prev = d1 @ w1.T + ops.mean.T @ (d2 @ w2.T)
    elif spec.arch == "GIN":
        zs, gs = cache["z"], cache["inner_g"]
        grads = [None] * len(spec.weights)
        dg = dpre
        for n in range(len(spec.weights) - 1, -1, -1):
            grads[n] = zs[n].T @ dg
            dz = dg @ spec.weights[n].T
            dg = dz * (gs[n - 1] > 0.0) if n else dz
        dh_prev = ops.gin.T @ dg
    else:
        dst, src, indptr = cache["edges"]
        hw, alpha, att, logits = cache["hw"], cache["alpha"], cache["att"], cache["logits"]
        d = spec.out_dim
        a = spec.gat_attention[:, 0]
        dhw = att.T @ dpre
        dalpha = np.einsum("ij,ij->i", dpre[dst], hw[src])
        weighted = np.add.reduceat(alpha * dalpha, indptr[:-1])
        de = alpha * (dalpha - weighted[dst])
        ds = de * np.where(logits > 0.0, 1.0, LEAKY_SLOPE)
        n = ops.num_nodes
        s_dst = np.bincount(dst, weights=ds, minlength=n)
        s_src = np.bincount(src, weights=ds, minlength=n)
        da = np.concatenate([hw.T @ s_dst, hw.T @ s_src]).reshape(-1, 1)
        dhw = dhw + np.outer(s_dst, a[:d]) + np.outer(s_src, a[d:])
        grads = [h_prev.T @ dhw, da]
        dh_prev = dhw @ spec.weights[0].T
    return np.asarray(dh_prev), grads


# -- public single-layer helpers ---------------------------------------------


def gcn_layer(h_prev, graph, spec: LayerSpec):
    h, cache = layer_forward(spec, np.asarray(h_prev, dtype=np.float64), graph)
    return h, cache["z"][0]


def sage_layer(h_prev, graph, spec: LayerSpec):
    h, cache = layer_forward(spec, np.asarray(h_prev, dtype=np.float64), graph)
    return h, cache["z"][0], cache["z"][1]


def gin_layer(h_prev, graph, spec: LayerSpec):
    h, cache = layer_forward(spec, np.asarray(h_prev, dtype=np.float64), graph)
    return h, list(cache["z"])


def gat_layer(h_prev, graph, spec: LayerSpec):
    h, cache = layer_forward(spec, np.asarray(h_prev, dtype=np.float64), graph)
    return h, cache["z"][0], layer_captures(spec, cache)[1][0]


def attention_matrix(spec: LayerSpec, h_prev, graph) -> sp.csr_matrix:
    """Row-stochastic GAT attention (row = target node)."""
    return layer_forward(spec, np.asarray(h_prev, dtype=np.float64), graph)[1]["att"]


# -- whole-model forward ------------------------------------------------------


@dataclass
class ActivationTrace:
    """Captured per-layer quantities of one forward pass.

    ``h[0]`` is the input features; ``h[l]`` is layer ``l``'s output.
    ``z[l-1][k]`` and ``g[l-1][k]`` are the input/output rows of transform ``k``
    of layer ``l``. ``edge_dst[l-1]`` gives the target node of every edge row
    for GAT attention transforms (``None`` for other layers).
    """

    h: list[np.ndarray]
    z: list[list[np.ndarray]]
    g: list[list[np.ndarray]]
    edge_dst: list[np.ndarray | None]


def _graph_input(model: GnnModel, graph: Graph) -> np.ndarray:
    x = graph.features
    if model.layers and x.shape[1] != model.layers[0].in_dim:
        raise ShapeError(
            f"layer 0 expects feature_dim {model.layers[0].in_dim}, graph has {x.shape[1]}"
        )
    return x


def forward(model: GnnModel, graph: Graph, capture: bool = False):
    """Chain all layers from ``h0 = X``.

    Returns ``(H_L, trace)`` where ``trace`` is an ``ActivationTrace`` when
    ``capture`` is set and ``None`` otherwise.
    """
    h = _graph_input(model, graph)
    hs, zs, gs, dsts = [h], [], [], []
    for ell, spec in enumerate(model.layers):
        try:
            h, cache = layer_forward(spec, h, graph)
        except ShapeError as exc:
            raise ShapeError(f"layer {ell}: {exc}") from None
        if capture:
            pairs = layer_captures(spec, cache)
            zs.append([z for z, _ in pairs])
            gs.append([g for _, g in pairs])
            dsts.append(cache["edges"][0] if spec.arch == "GAT" else None)
            hs.append(h)
    if not capture:
        return h, None
    return h, ActivationTrace(hs, zs, gs, dsts)


def layer_outputs(model: GnnModel, graph: Graph) -> list[np.ndarray]:
    """``[H^0, H^1, ..., H^L]`` without capturing transform rows."""
    h = _graph_input(model, graph)
    out = [h]
    for spec in model.layers:
        h, _ = layer_forward(spec, h, graph)
        out.append(h)
    return out


def forward_with_caches(model: GnnModel, graph: Graph) -> tuple[list[np.ndarray], list[dict]]:
    h = _graph_input(model, graph)
    hs, caches = [h], []
    for spec in model.layers:
        h, cache = layer_forward(spec, h, graph)
        hs.append(h)
        caches.append(cache)
    return hs, caches


def head_forward(embeddings, head) -> np.ndarray:
    embeddings, head = np.asarray(embeddings, dtype=np.float64), np.asarray(head, dtype=np.float64)
    if embeddings.ndim != 2 or head.ndim != 2 or embeddings.shape[1] != head.shape[0]:
        raise ShapeError(f"embeddings {embeddings.shape} do not match head {head.shape}")
    return embeddings @ head


def decode_links(embeddings, edge_pairs) -> np.ndarray:
    """``sigmoid(<emb_u, emb_v>)`` for each pair."""
    emb = np.asarray(embeddings, dtype=np.float64)
    pairs = np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= emb.shape[0]):
        raise IndexError(f"edge pair index out of range for {emb.shape[0]} nodes")
    return expit(np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]]))


# -- serialization ------------------------------------------------------------


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape)


def _parse_shape(text: str) -> tuple[int, int]:
    a, b = text.split("x")
    return int(a), int(b)


def model_to_bytes(model: GnnModel) -> bytes:
    lines = [f"arch={model.arch}", f"num_layers={len(model.layers)}"]
    for ell, layer in enumerate(model.layers):
        lines += [
            f"layer.{ell}.arch={layer.arch}",
            f"layer.{ell}.dims={layer.in_dim},{layer.out_dim}",
            f"layer.{ell}.activation={layer.activation}",
            f"layer.{ell}.K={len(layer.transforms)}",
            f"layer.{ell}.shapes=" + ";".join(_shape_str(m.shape) for m in layer.transforms),
        ]
    task_ids = sorted(model.heads)
    lines.append("heads=" + ",".join(task_ids))
    for t in task_ids:
        lines += [f"head.{t}.kind={model.head_kinds[t]}", f"head.{t}.shape={_shape_str(model.heads[t].shape)}"]
    structural = {line.split("=", 1)[0] for line in lines}
    for key in sorted(model.metadata):
        if key in structural or "\n" in key or "=" in key:
            continue
        lines.append(f"meta.{key}={model.metadata[key]}".replace("\n", " "))
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(blob)), blob]
    for layer in model.layers:
        parts += [m.astype("<f8").tobytes() for m in layer.transforms]
    parts += [model.heads[t].astype("<f8").tobytes() for t in task_ids]
    return b"".join(parts)


def model_from_bytes(data: bytes) -> GnnModel:
    if len(data) < 12:
        raise FormatError("truncated model header", offset=len(data))
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", offset=0)
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}", offset=4)
    if 12 + meta_len > len(data):
        raise FormatError("truncated metadata", offset=12)
    try:
        text = data[12 : 12 + meta_len].decode("utf-8")
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        pos = 12 + meta_len

        def take(shape) -> np.ndarray:
            nonlocal pos
            nbytes = 8 * shape[0] * shape[1]
            if pos + nbytes > len(data):
                raise FormatError("truncated weight payload", offset=pos)
            arr = np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1], offset=pos)
            pos += nbytes
            return arr.astype(np.float64).reshape(shape)

        layers = []
        for ell in range(int(kv["num_layers"])):
            arch = kv[f"layer.{ell}.arch"]
            in_dim, out_dim = (int(x) for x in kv[f"layer.{ell}.dims"].split(","))
            shapes = [_parse_shape(s) for s in kv[f"layer.{ell}.shapes"].split(";")]
            if len(shapes) != int(kv[f"layer.{ell}.K"]):
                raise FormatError(f"layer {ell}: K does not match shape list")
            mats = [take(s) for s in shapes]
            attention = mats.pop() if arch == "GAT" else None
            layers.append(LayerSpec(arch, in_dim, out_dim, mats, attention, kv[f"layer.{ell}.activation"]))
        heads, kinds = {}, {}
        for t in filter(None, kv["heads"].split(",")):
            heads[t] = take(_parse_shape(kv[f"head.{t}.shape"]))
            kinds[t] = kv[f"head.{t}.kind"]
        if pos != len(data):
            raise FormatError("trailing bytes after weights", offset=pos)
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        meta.setdefault("arch", kv["arch"])
        return GnnModel(layers, heads, kinds, meta)
    except FormatError:
        raise
    except (KeyError, ValueError, UnicodeDecodeError, ShapeError) as exc:
        raise FormatError(f"malformed model metadata: {exc}", offset=12) from None


def save_model(model: GnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> GnnModel:
    return model_from_bytes(Path(path).read_bytes())
