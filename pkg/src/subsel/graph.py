"""Undirected graphs in CSR form, edge splits and negative sampling."""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    InsufficientDataError,
    NodeRangeError,
    ParseError,
    SamplingError,
    ShapeError,
)

log = logging.getLogger(__name__)

_NEG_RETRY_ROUNDS = 64


def _edge_keys(edges: np.ndarray, num_nodes: int) -> np.ndarray:
    return edges[:, 0].astype(np.int64) * num_nodes + edges[:, 1].astype(np.int64)


def canonicalize_edges(pairs, num_nodes: int | None = None):
    """Return sorted unique (min, max) pairs plus counts of dropped duplicates and self-loops."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    loops = arr[:, 0] == arr[:, 1]
    n_loops = int(loops.sum())
    arr = arr[~loops]
    arr = np.sort(arr, axis=1)
    n = num_nodes if num_nodes is not None else (int(arr.max()) + 1 if len(arr) else 0)
    keys = _edge_keys(arr, max(n, 1))
    uniq = np.unique(keys)
    n_dups = len(keys) - len(uniq)
    out = np.stack([uniq // max(n, 1), uniq % max(n, 1)], axis=1) if len(uniq) else np.zeros((0, 2), np.int64)
    return out.astype(np.int64), n_dups, n_loops


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph.

    ``edges`` holds each undirected edge once as a (min, max) pair, sorted
    lexicographically. ``indptr``/``indices`` encode the symmetric adjacency
    with strictly increasing column indices per row.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, num_nodes: int, pairs, features: np.ndarray | None = None) -> "Graph":
        edges, n_dups, n_loops = canonicalize_edges(pairs, num_nodes)
        if n_dups or n_loops:
            log.warning("dropped %d duplicate edges and %d self-loops", n_dups, n_loops)
        if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
            bad = edges[(edges < 0).any(1) | (edges >= num_nodes).any(1)][0]
            raise NodeRangeError(f"edge {bad[0]}-{bad[1]} outside [0, {num_nodes})")
        if features is None:
            features = np.zeros((num_nodes, 0))
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.shape[0] != num_nodes:
            raise ShapeError(f"feature matrix has {features.shape[0]} rows, graph has {num_nodes} nodes")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        for a in (edges, features, indptr, cols):
            a.setflags(write=False)
        return cls(num_nodes, edges, features, indptr, cols.astype(np.int64))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_keys(self) -> np.ndarray:
        """Sorted int64 keys ``u * n + v`` of the canonical edges."""
        return _edge_keys(self.edges, self.num_nodes)

    def has_edges(self, pairs) -> np.ndarray:
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = self.edge_keys()
        q = _edge_keys(pairs, self.num_nodes)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == q) if len(keys) else np.zeros(len(q), bool)

    def with_edges(self, pairs) -> "Graph":
        """Same nodes and features, different edge set."""
        return Graph.from_edges(self.num_nodes, pairs, self.features)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.num_nodes).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        return f"{self.num_edges}:{h.hexdigest()[:16]}"


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _iter_data_lines(path):
    with _open_text(path) as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                yield line_no, line, True
            else:
                yield line_no, line, False


def _declared_nodes(comment: str) -> int | None:
    body = comment.lstrip("#").strip().replace(":", "=")
    for token in body.split():
        key, _, val = token.partition("=")
        if key in ("nodes", "num_nodes") and val.isdigit():
            return int(val)
    return None


def load_graph(
    edge_path,
    feature_path=None,
    feature_dim_if_random: int | None = None,
    seed: int = 0,
    num_nodes: int | None = None,
) -> Graph:
    """Read a whitespace edge list (and optional feature matrix) into a :class:`Graph`.

    The node count comes from ``num_nodes``, a ``# nodes=N`` header comment,
    the feature row count, or the largest id seen, in that order. Without a
    feature file, features are seeded standard-normal of the given width.
    """
    edge_path = Path(edge_path)
    pairs = []
    declared = num_nodes
    for line_no, line, is_comment in _iter_data_lines(edge_path):
        if is_comment:
            if declared is None and line:
                declared = _declared_nodes(line)
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(edge_path, line_no, f"expected two node ids, got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(edge_path, line_no, f"node ids must be integers, got {line!r}") from None
        if u < 0 or v < 0:
            raise ParseError(edge_path, line_no, "node ids must be non-negative")
        if declared is not None and max(u, v) >= declared:
            raise NodeRangeError(f"{edge_path}:{line_no}: node id {max(u, v)} >= declared count {declared}")
        pairs.append((u, v))

    features = None
    if feature_path is not None:
        features = _load_features(Path(feature_path))
        if declared is not None and features.shape[0] != declared:
            raise ShapeError(f"{feature_path}: {features.shape[0]} feature rows for {declared} nodes")
        declared = features.shape[0]

    max_id = max((max(p) for p in pairs), default=-1)
    if declared is None:
        declared = max_id + 1
    elif max_id >= declared:
        raise NodeRangeError(f"{edge_path}: node id {max_id} >= node count {declared}")

    if features is None:
        dim = 0 if feature_dim_if_random is None else int(feature_dim_if_random)
        features = np.random.default_rng(seed).standard_normal((declared, dim))
    return Graph.from_edges(declared, pairs, features)


def _load_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    for line_no, line, is_comment in _iter_data_lines(path):
        if is_comment:
            continue
        try:
            row = [float(x) for x in line.split()]
        except ValueError:
            raise ParseError(path, line_no, "features must be decimal floats") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, line_no, f"expected {width} values, got {len(row)}")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    graph: Graph
    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray
    valid_neg: np.ndarray
    test_neg: np.ndarray
    message_graph: Graph
    seed: int
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def _bucket_sizes(m: int, fracs) -> tuple[int, int, int]:
    n_valid = int(round(fracs[1] * m))
    n_test = int(round(fracs[2] * m))
    return m - n_valid - n_test, n_valid, n_test


def _sample_non_edges(graph: Graph, count: int, rng: np.random.Generator, exclude: np.ndarray | None = None):
    n = graph.num_nodes
    if count == 0:
        return np.zeros((0, 2), np.int64)
    total_pairs = n * (n - 1) // 2
    taken = set() if exclude is None else set(_edge_keys(exclude, n).tolist())
    if total_pairs - graph.num_edges - len(taken) < count:
        raise SamplingError(f"graph has too few non-edges to draw {count} negatives")
    edge_keys = set(graph.edge_keys().tolist())
    out = []
    while len(out) < count:
        need = count - len(out)
        cand = rng.integers(0, n, size=(2 * need + 8, 2))
        for u, v in cand:
            if u == v:
                continue
            if u > v:
                u, v = v, u
            key = int(u) * n + int(v)
            if key in edge_keys or key in taken:
                continue
            taken.add(key)
            out.append((int(u), int(v)))
            if len(out) == count:
                break
    return np.asarray(out, dtype=np.int64)


def split_edges(graph: Graph, train_frac=0.85, valid_frac=0.05, test_frac=0.10, seed: int = 0) -> EdgeSplit:
    fracs = (float(train_frac), float(valid_frac), float(test_frac))
    if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fracs}")
    m = graph.num_edges
    if m < 10 and (fracs[1] > 0 or fracs[2] > 0):
        raise InsufficientDataError(f"need at least 10 edges to split, got {m}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    n_train, n_valid, n_test = _bucket_sizes(m, fracs)
    shuffled = graph.edges[perm]
    valid_pos = shuffled[:n_valid]
    test_pos = shuffled[n_valid:n_valid + n_test]
    train_pos = shuffled[n_valid + n_test:]
    valid_neg = _sample_non_edges(graph, n_valid, rng)
    test_neg = _sample_non_edges(graph, n_test, rng, exclude=valid_neg)
    message_graph = graph.with_edges(train_pos)
    return EdgeSplit(graph, train_pos, valid_pos, test_pos, valid_neg, test_neg, message_graph, seed, fracs)


def sample_negative_edges(split: EdgeSplit, anchors, seed: int, epoch: int, stream: int = 0) -> np.ndarray:
    """One negative per anchor: keep the head node, redraw the tail uniformly.

    The tail avoids the head itself and all of the head's neighbours in the
    full (unsplit) graph. Output is a pure function of ``(seed, epoch, stream)``.
    """
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if len(anchors) == 0:
        raise ValueError("anchors must be non-empty")
    g = split.graph
    n = g.num_nodes
    rng = np.random.default_rng([seed, epoch, stream])
    heads = anchors[:, 0]
    tails = rng.integers(0, n, size=len(heads))
    keys = g.edge_keys()

    def bad(h, t):
        lo, hi = np.minimum(h, t), np.maximum(h, t)
        q = lo * n + hi
        pos = np.minimum(np.searchsorted(keys, q), max(len(keys) - 1, 0))
        hit = keys[pos] == q if len(keys) else np.zeros(len(q), bool)
        return hit | (h == t)

    todo = np.flatnonzero(bad(heads, tails))
    for _ in range(_NEG_RETRY_ROUNDS):
        if len(todo) == 0:
            break
        tails[todo] = rng.integers(0, n, size=len(todo))
        todo = todo[bad(heads[todo], tails[todo])]
    for idx in todo:
        h = heads[idx]
        forbidden = np.zeros(n, bool)
        forbidden[g.neighbors(h)] = True
        forbidden[h] = True
        allowed = np.flatnonzero(~forbidden)
        if len(allowed) == 0:
            raise SamplingError(f"node {h} is adjacent to every other node; no negative tail exists")
        tails[idx] = allowed[rng.integers(0, len(allowed))]
    return np.stack([heads, tails], axis=1)


def normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetric GCN normalisation D^-1/2 (A + I) D^-1/2 as CSR."""
    n = graph.num_nodes
    data = np.ones(len(graph.indices), dtype=np.float64)
    a = sp.csr_matrix((data, graph.indices, graph.indptr), shape=(n, n))
    a = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    out = (d @ a @ d).tocsr()
    out.sort_indices()
    return out


def k_hop_nodes(graph: Graph, v: int, k: int) -> set[int]:
    """Nodes within ``k`` hops of ``v`` (BFS ball, including ``v``)."""
    seen = {int(v)}
    frontier = deque([(int(v), 0)])
    while frontier:
        node, dist = frontier.popleft()
        if dist == k:
            continue
        for nb in graph.neighbors(node):
            nb = int(nb)
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, dist + 1))
    return seen


SPLIT_BUCKETS = ("train_pos", "valid_pos", "test_pos", "valid_neg", "test_neg")


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_split_manifest(split: EdgeSplit, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a, b, c = split.fractions
    header = f"# seed={split.seed} frac={a:g}/{b:g}/{c:g}\n"
    written = []
    for name in SPLIT_BUCKETS:
        edges = getattr(split, name)
        body = "".join(f"{u}\t{v}\n" for u, v in edges)
        path = out_dir / f"{name}.tsv"
        atomic_write_text(path, header + body)
        written.append(path)
    return written


def read_split_manifest(graph: Graph, split_dir) -> EdgeSplit:
    split_dir = Path(split_dir)
    buckets = {}
    seed, fracs = 0, (0.85, 0.05, 0.10)
    for name in SPLIT_BUCKETS:
        path = split_dir / f"{name}.tsv"
        rows = []
        for line_no, line, is_comment in _iter_data_lines(path):
            if is_comment:
                for tok in line.lstrip("#").split():
                    key, _, val = tok.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "frac":
                        fracs = tuple(float(x) for x in val.split("/"))
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected u<TAB>v")
            rows.append((int(parts[0]), int(parts[1])))
        buckets[name] = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    return EdgeSplit(
        graph,
        message_graph=graph.with_edges(buckets["train_pos"]),
        seed=seed,
        fractions=fracs,
        **buckets,
    )
