"""CSR graphs, the GNMG binary format, SBM generation and split protocols."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

MAGIC = b"GNMG"
VERSION = 1
_HEADER = struct.Struct("<4sIQQIB")


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed CSR adjacency plus node features and optional labels.

    Row ``v`` of the CSR lists ``N_v``, the nodes ``v`` draws messages from.
    Undirected graphs store both arcs. Self-loops are never stored.
    Labels use ``-1`` for unlabeled nodes.
    """

    num_nodes: int
    offsets: np.ndarray
    targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return int(self.targets.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v] : self.offsets[v + 1]]

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def degrees_with_self_loop(self) -> np.ndarray:
        return self.out_degrees() + 1

    def without_labels(self) -> Graph:
        return replace(self, labels=None, _cache={})

    def with_labels(self, labels) -> Graph:
        labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        return replace(self, labels=labels, _cache=self._cache)

    def with_features(self, features) -> Graph:
        return replace(self, features=np.asarray(features, dtype=np.float64), _cache=self._cache)

    def sources(self) -> np.ndarray:
        """Row index of every CSR entry."""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.out_degrees())

    def undirected_edges(self) -> np.ndarray:
        """Edges ``(u, v)`` with ``u < v``, lexicographically sorted, shape (m, 2)."""
        src = self.sources()
        keep = src < self.targets
        return np.stack([src[keep], self.targets[keep]], axis=1)

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.neighbors(u)
        i = np.searchsorted(nbrs, v)
        return bool(i < nbrs.shape[0] and nbrs[i] == v)

    def is_symmetric(self) -> bool:
        src = self.sources()
        fwd = src * self.num_nodes + self.targets
        bwd = self.targets * self.num_nodes + src
        return bool(np.array_equal(np.sort(fwd), np.sort(bwd)))

    def permuted(self, perm) -> Graph:
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        src = perm[self.sources()]
        dst = perm[self.targets]
        features = np.empty_like(self.features)
        features[perm] = self.features
        labels = None
        if self.labels is not None:
            labels = np.empty_like(self.labels)
            labels[perm] = self.labels
        return from_edges(self.num_nodes, np.stack([src, dst], axis=1), features, labels, symmetric=False)

    def validate(self) -> None:
        """Raise ``FormatError`` when any structural invariant is broken."""
        n = self.num_nodes
        off, tgt = self.offsets, self.targets
        if off.shape != (n + 1,):
            raise FormatError(f"offsets length {off.shape[0]} != num_nodes + 1 = {n + 1}")
        if off[0] != 0 or off[-1] != tgt.shape[0]:
            raise FormatError("offsets must start at 0 and end at the edge count")
        if np.any(np.diff(off) < 0):
            raise FormatError("offsets must be nondecreasing")
        if tgt.shape[0] and (tgt.min() < 0 or tgt.max() >= n):
            raise FormatError("edge target out of range")
        if tgt.shape[0] > 1:
            step = np.diff(tgt)
            row_start = np.zeros(tgt.shape[0], dtype=bool)
            row_start[off[:-1][off[:-1] < tgt.shape[0]]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise FormatError("neighbor lists must be strictly ascending")
        if tgt.shape[0] and np.any(self.sources() == tgt):
            raise FormatError("self-loops are not stored")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise FormatError(f"features shape {self.features.shape} does not match {n} nodes")
        if not np.all(np.isfinite(self.features)):
            raise FormatError("features contain non-finite values")
        if self.labels is not None and self.labels.shape != (n,):
            raise FormatError("labels length does not match num_nodes")


def from_edges(num_nodes: int, edges, features, labels=None, symmetric: bool = True) -> Graph:
    """Build a graph from an edge list, dropping self-loops and duplicates."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src, dst = edges[:, 0], edges[:, 1]
    if symmetric:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise ParameterError("edge endpoint out of range")
    key = np.unique(src * num_nodes + dst)
    src, dst = key // max(num_nodes, 1), key % max(num_nodes, 1)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
    features = np.asarray(features, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    g = Graph(num_nodes, offsets, dst.astype(np.int64), features, labels)
    g.validate()
    return g


def remove_edges(graph: Graph, edges) -> Graph:
    """Drop the given undirected edges (both arcs) from ``graph``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = graph.num_nodes
    drop = np.concatenate([edges[:, 0] * n + edges[:, 1], edges[:, 1] * n + edges[:, 0]])
    key = graph.sources() * n + graph.targets
    kept = key[~np.isin(key, drop)]
    return from_edges(n, np.stack([kept // n, kept % n], axis=1), graph.features, graph.labels, symmetric=False)


def degrees_with_self_loop(graph: Graph) -> np.ndarray:
    return graph.degrees_with_self_loop()


# -- binary format ---------------------------------------------------------


def graph_to_bytes(graph: Graph) -> bytes:
    has_labels = graph.labels is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, graph.num_nodes, graph.num_edges, graph.feature_dim, int(has_labels)),
        graph.offsets.astype("<u8").tobytes(),
        graph.targets.astype("<u4").tobytes(),
        graph.features.astype("<f4").tobytes(),
    ]
    if has_labels:
        parts.append(graph.labels.astype("<i4").tobytes())
    return b"".join(parts)


def graph_from_bytes(data: bytes) -> Graph:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, n, e, d, has_labels = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported graph format version {version}", offset=4)
    if has_labels not in (0, 1):
        raise FormatError("has_labels flag must be 0 or 1", offset=_HEADER.size - 1)
    pos = _HEADER.size

    def take(dtype: str, count: int, what: str) -> np.ndarray:
        nonlocal pos
        nbytes = np.dtype(dtype).itemsize * count
        if pos + nbytes > len(data):
            raise FormatError(f"truncated payload while reading {what}", offset=pos)
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    offsets = take("<u8", n + 1, "csr offsets").astype(np.int64)
    targets = take("<u4", e, "csr targets").astype(np.int64)
    features = take("<f4", n * d, "features").astype(np.float64).reshape(n, d)
    labels = take("<i4", n, "labels").astype(np.int64) if has_labels else None
    if pos != len(data):
        raise FormatError("trailing bytes after payload", offset=pos)
    g = Graph(int(n), offsets, targets, features, labels)
    try:
        g.validate()
    except FormatError as exc:
        raise FormatError(f"invariant violation: {exc}", offset=_HEADER.size) from None
    return g


def save_graph(graph: Graph, path) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def load_graph(path) -> Graph:
    return graph_from_bytes(Path(path).read_bytes())


# -- synthetic data ----------------------------------------------------------


def _block_pairs(rng, m_a: int, m_b: int, same: bool, p: float) -> np.ndarray:
    count = m_a * (m_a - 1) // 2 if same else m_a * m_b
    if count == 0 or p <= 0.0:
        return np.empty((0, 2), dtype=np.int64)
    k = count if p >= 1.0 else int(rng.binomial(count, p))
    picks = np.sort(rng.choice(count, size=k, replace=False)) if k < count else np.arange(count)
    if same:
        iu, ju = np.triu_indices(m_a, 1)
        return np.stack([iu[picks], ju[picks]], axis=1).astype(np.int64)
    return np.stack([picks // m_b, picks % m_b], axis=1).astype(np.int64)


def generate_sbm(
    num_blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    noise_sigma: float,
    seed: int,
    mean_scale: float = 1.0,
) -> Graph:
    """Undirected stochastic block model with block-id labels.

    Block ``b`` has mean feature vector ``mean_scale * q_b`` where the ``q_b``
    are orthonormal; each node adds i.i.d. Gaussian noise of scale
    ``noise_sigma``. Features are rounded to float32 so the graph survives a
    save/load round trip unchanged.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ParameterError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if num_blocks < 1 or nodes_per_block < 0:
        raise ParameterError("num_blocks must be >= 1 and nodes_per_block >= 0")
    if feature_dim < num_blocks:
        raise ParameterError(f"feature_dim {feature_dim} must be >= num_blocks {num_blocks}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    n = num_blocks * nodes_per_block
    chunks = []
    for a in range(num_blocks):
        for b in range(a, num_blocks):
            pairs = _block_pairs(rng, nodes_per_block, nodes_per_block, a == b, p_in if a == b else p_out)
            pairs[:, 0] += a * nodes_per_block
            pairs[:, 1] += b * nodes_per_block
            chunks.append(pairs)
    edges = np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, num_blocks)))
    labels = np.repeat(np.arange(num_blocks, dtype=np.int64), nodes_per_block)
    features = mean_scale * q.T[labels] + noise_sigma * rng.standard_normal((n, feature_dim))
    features = features.astype(np.float32).astype(np.float64)
    return from_edges(n, edges, features, labels)


# -- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class NodeSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, num_nodes: int) -> None:
        parts = [self.train, self.val, self.test]
        joined = np.concatenate(parts)
        if np.unique(joined).size != joined.size:
            raise ParameterError("node split partitions overlap")
        if joined.size and (joined.min() < 0 or joined.max() >= num_nodes):
            raise ParameterError("node split index out of range")


@dataclass(frozen=True)
class EdgeSplit:
    train_pos: np.ndarray
    train_neg: np.ndarray
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray

    def partition(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{name}_pos"), getattr(self, f"{name}_neg")


def _shuffle_split(rng, items: np.ndarray, fractions: tuple[float, float]) -> list[np.ndarray]:
    order = items[rng.permutation(items.shape[0])]
    n = order.shape[0]
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    return [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]


def node_split(graph: Graph, seed: int) -> NodeSplit:
    """60/20/20 split of the labeled nodes (sorted within each part)."""
    if graph.labels is None:
        raise ParameterError("node_split needs a labeled graph")
    labeled = np.flatnonzero(graph.labels >= 0)
    parts = _shuffle_split(np.random.default_rng(seed), labeled, (0.6, 0.2))
    return NodeSplit(*(np.sort(p) for p in parts))


def disjoint_label_split(graph: Graph, seed: int = 0) -> tuple[tuple[Graph, NodeSplit], tuple[Graph, NodeSplit]]:
    """Split classes into a lower half (task A) and upper half (task B).

    With ``C`` classes, task A takes classes ``< ceil(C/2)``. Each task's graph
    shares the full structure and features; labels outside the task are -1
    and inside are remapped to start at 0.
    """
    if graph.labels is None:
        raise ParameterError("disjoint_label_split needs a labeled graph")
    labels = graph.labels
    num_classes = int(labels.max()) + 1 if labels.size else 0
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, found {num_classes}")
    half = (num_classes + 1) // 2
    seq = np.random.SeedSequence(seed).spawn(2)
    in_a = (labels >= 0) & (labels < half)
    in_b = labels >= half
    tasks = []
    for mask, shift, ss in ((in_a, 0, seq[0]), (in_b, half, seq[1])):
        task_labels = np.where(mask, labels - shift, -1)
        g = graph.with_labels(task_labels)
        tasks.append((g, node_split(g, int(ss.generate_state(1)[0]))))
    return tasks[0], tasks[1]


def _sample_negatives(rng, graph: Graph, count: int) -> np.ndarray:
    n = graph.num_nodes
    total_pairs = n * (n - 1) // 2
    existing = graph.undirected_edges()
    pool = total_pairs - existing.shape[0]
    if pool < count:
        raise ParameterError(f"graph too dense: {pool} non-edges available, {count} negatives needed")
    edge_keys = set((existing[:, 0] * n + existing[:, 1]).tolist())
    if total_pairs <= 2_000_000:
        iu, ju = np.triu_indices(n, 1)
        keys = iu * n + ju
        candidates = keys[~np.isin(keys, np.fromiter(edge_keys, dtype=np.int64, count=len(edge_keys)))]
        picks = np.sort(rng.choice(candidates.shape[0], size=count, replace=False))
        chosen = candidates[picks]
        order = rng.permutation(count)
        chosen = chosen[order]
    else:
        seen: set[int] = set()
        out: list[int] = []
        while len(out) < count:
            u, v = rng.integers(0, n, size=2)
            if u == v:
                continue
            key = int(min(u, v)) * n + int(max(u, v))
            if key in edge_keys or key in seen:
                continue
            seen.add(key)
            out.append(key)
        chosen = np.asarray(out, dtype=np.int64)
    return np.stack([chosen // n, chosen % n], axis=1)


def link_split(graph: Graph, seed: int) -> EdgeSplit:
    """70/10/20 split of undirected edges with one sampled non-edge per positive.

    Partition sizes use ``floor`` for train and val; the remainder goes to test.
    """
    if not graph.is_symmetric():
        raise ParameterError("link_split needs an undirected graph")
    edges = graph.undirected_edges()
    if edges.shape[0] < 10:
        raise ParameterError(f"link_split needs at least 10 edges, got {edges.shape[0]}")
    rng = np.random.default_rng(seed)
    pos = _shuffle_split(rng, edges, (0.7, 0.1))
    neg = _sample_negatives(rng, graph, edges.shape[0])
    sizes = np.cumsum([p.shape[0] for p in pos])
    neg_parts = np.split(neg, sizes[:-1])
    return EdgeSplit(pos[0], neg_parts[0], pos[1], neg_parts[1], pos[2], neg_parts[2])
