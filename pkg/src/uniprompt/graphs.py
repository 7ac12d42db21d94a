"""Graph representation, bundle I/O, normalization, kNN prompt construction,
homophily and noise utilities."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class SparseAdj:
    """Immutable CSR matrix (row offsets, sorted column indices, values)."""

    __slots__ = ("n", "n_cols", "indptr", "indices", "data")

    def __init__(self, n, indptr, indices, data, n_cols=None):
        self.n = int(n)
        self.n_cols = int(n_cols) if n_cols is not None else self.n
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        if self.indptr.shape != (self.n + 1,):
            raise ValueError("indptr must have one offset per row plus one")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr offsets must be monotone")
        if self.indices.shape != self.data.shape or self.indices.ndim != 1:
            raise ValueError("indices and values must be parallel 1-D arrays")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if not np.isfinite(self.data).all():
            raise ValueError("sparse values must be finite")
        for arr in (self.indptr, self.indices, self.data):
            arr.flags.writeable = False

    @property
    def nnz(self):
        return self.indices.size

    @classmethod
    def from_coo(cls, n, rows, cols, vals, n_cols=None):
        """Build from unordered triplets; duplicate positions are summed."""
        n_cols = n if n_cols is None else n_cols
        mat = sp.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(n, n_cols)
        ).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(n, mat.indptr, mat.indices, mat.data, n_cols=n_cols)

    def row_ids(self):
        """Row index of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def to_scipy(self, values=None):
        data = self.data if values is None else np.asarray(values, dtype=np.float64)
        return sp.csr_matrix(
            (data, self.indices, self.indptr), shape=(self.n, self.n_cols)
        )

    def with_values(self, values):
        return SparseAdj(self.n, self.indptr, self.indices, values, n_cols=self.n_cols)


class Graph:
    """An immutable node-attributed graph with a symmetric adjacency.

    Edges are stored as directed entries in canonical (src, dst) order; the
    invariant is that (i, j) is present iff (j, i) is, with equal weight.
    """

    __slots__ = ("num_nodes", "src", "dst", "weight", "features", "labels", "num_classes", "name", "_adj")

    def __init__(self, num_nodes, src, dst, weight, features, labels, num_classes, name="graph"):
        self.num_nodes = int(num_nodes)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        self.name = name
        self._adj = None

        order = np.lexsort((self.dst, self.src))
        self.src = self.src[order]
        self.dst = self.dst[order]
        self.weight = self.weight[order]
        self._validate()
        for arr in (self.src, self.dst, self.weight, self.features):
            arr.flags.writeable = False
        if self.labels is not None:
            self.labels.flags.writeable = False

    def _validate(self):
        n = self.num_nodes
        if self.src.shape != self.dst.shape or self.src.shape != self.weight.shape:
            raise ValueError("edge arrays must be parallel")
        if self.src.size:
            if self.src.min() < 0 or self.src.max() >= n or self.dst.min() < 0 or self.dst.max() >= n:
                raise ValueError("edge index out of range")
        if not np.isfinite(self.weight).all() or (self.weight < 0).any():
            raise ValueError("edge weights must be finite and non-negative")
        pairs = self.src * n + self.dst
        if np.unique(pairs).size != pairs.size:
            raise ValueError("duplicate edges")
        # symmetry: the transposed pair set must match with equal weights
        rev = np.lexsort((self.src, self.dst))
        if not np.array_equal(self.dst[rev], self.src) or not np.array_equal(self.src[rev], self.dst):
            raise ValueError("adjacency must be symmetric")
        if not np.array_equal(self.weight[rev], self.weight):
            raise ValueError("adjacency must be symmetric in weights")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be an N x F matrix")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN/Inf")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per node")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError("label out of range")

    @property
    def num_features(self):
        return self.features.shape[1]

    @property
    def num_undirected_edges(self):
        offdiag = int((self.src != self.dst).sum()) // 2
        return offdiag + int((self.src == self.dst).sum())

    def adjacency(self):
        if self._adj is None:
            self._adj = SparseAdj.from_coo(self.num_nodes, self.src, self.dst, self.weight)
        return self._adj

    def with_features(self, features):
        return Graph(self.num_nodes, self.src, self.dst, self.weight, features,
                     self.labels, self.num_classes, name=self.name)


def graph_from_pairs(num_nodes, pairs, features, labels, num_classes, name="graph"):
    """Build a Graph from directed (src, dst) pairs, symmetrized by union
    with unit weights; self-loops dropped."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        if pairs.min() < 0 or pairs.max() >= num_nodes:
            raise ValueError("edge index out of range")
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
        keys = both[:, 0] * num_nodes + both[:, 1]
        uniq = np.unique(keys)
        src, dst = uniq // num_nodes, uniq % num_nodes
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    weight = np.ones_like(src, dtype=np.float64)
    return Graph(num_nodes, src, dst, weight, features, labels, num_classes, name=name)


# ---------------------------------------------------------------------------
# bundle I/O
# ---------------------------------------------------------------------------


def load_graph_bundle(path):
    """Load a graph bundle directory (meta.json, edges.csv, features.csv,
    labels.csv). Directed input edges are symmetrized by union; self-loops
    dropped."""
    path = Path(path)
    for fname in ("meta.json", "edges.csv", "features.csv", "labels.csv"):
        if not (path / fname).exists():
            raise FileNotFoundError(f"missing file: {path / fname}")

    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    n = int(meta["num_nodes"])
    num_features = int(meta["num_features"])
    num_classes = int(meta["num_classes"])
    name = str(meta.get("name", path.name))

    with open(path / "edges.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["src", "dst"]:
            raise ValueError("edges.csv must start with a 'src,dst' header")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pairs.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"edges.csv line {lineno}: non-numeric cell") from exc
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    try:
        features = np.loadtxt(path / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"features.csv: non-numeric cell ({exc})") from exc
    if features.shape[0] != n:
        raise ValueError(
            f"row count mismatch: features.csv has {features.shape[0]} rows, meta says {n}"
        )
    if features.shape[1] != num_features:
        raise ValueError(
            f"column count mismatch: features.csv has {features.shape[1]} columns, "
            f"meta says {num_features}"
        )

    try:
        labels = np.loadtxt(path / "labels.csv", dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise ValueError(f"labels.csv: non-numeric cell ({exc})") from exc
    if labels.shape[0] != n:
        raise ValueError(
            f"row count mismatch: labels.csv has {labels.shape[0]} rows, meta says {n}"
        )

    return graph_from_pairs(n, pairs, features, labels, num_classes, name=name)


def save_graph_bundle(graph, path):
    """Write a Graph as a bundle directory (inverse of load_graph_bundle)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": graph.num_nodes,
        "num_features": graph.num_features,
        "num_classes": graph.num_classes,
        "name": graph.name,
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path / "edges.csv", "w", newline="") as fh:
        fh.write("src,dst\n")
        for s, d in zip(graph.src, graph.dst):
            fh.write(f"{s},{d}\n")
    with open(path / "features.csv", "w") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    with open(path / "labels.csv", "w") as fh:
        if graph.labels is None:
            raise ValueError("cannot save a bundle without labels")
        for y in graph.labels:
            fh.write(f"{y}\n")


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def symmetric_normalize(adj, add_self_loops=True):
    """D^(-1/2) (A + I) D^(-1/2) (or without the +I). Zero-degree rows map to
    zero rows. Mirrors the arithmetic of the differentiable path bit for bit:
    degrees via bincount over stored entries, dinv = deg**-0.5, products
    associated as (v * dinv_i) * dinv_j."""
    if (adj.data < 0).any():
        raise ValueError("negative weight")
    rows = adj.row_ids()
    deg = np.bincount(rows, weights=adj.data, minlength=adj.n)
    if add_self_loops:
        deg = deg + 1.0
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, deg**-0.5, 0.0)
    vals = (adj.data * dinv[rows]) * dinv[adj.indices]
    if not add_self_loops:
        return adj.with_values(vals)
    diag = np.arange(adj.n)
    all_rows = np.concatenate([rows, diag])
    all_cols = np.concatenate([adj.indices, diag])
    all_vals = np.concatenate([vals, dinv * dinv])
    return SparseAdj.from_coo(adj.n, all_rows, all_cols, all_vals)


def cosine_similarity(x_i, x_j):
    """x.y / (|x||y|), 0 when either norm is 0."""
    x_i = np.asarray(x_i, dtype=np.float64).reshape(-1)
    x_j = np.asarray(x_j, dtype=np.float64).reshape(-1)
    if x_i.shape != x_j.shape:
        raise ValueError(f"length mismatch: {x_i.shape[0]} vs {x_j.shape[0]}")
    ni = np.linalg.norm(x_i)
    nj = np.linalg.norm(x_j)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(x_i @ x_j / (ni * nj))


def _normalized_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x, norms, out=out, where=norms > 0)
    return out


def _topk_per_row(sims, k, col_ids, self_col):
    """Indices of the k largest entries per row; ties broken by the smaller
    column id (stable sort on descending value)."""
    picked_rows, picked_cols, picked_vals = [], [], []
    for local, row in enumerate(sims):
        row = row.copy()
        if self_col[local] >= 0:
            row[self_col[local]] = -np.inf
        order = np.argsort(-row, kind="stable")
        avail = row.size - (1 if self_col[local] >= 0 else 0)
        if avail < k:
            raise ValueError("k out of range")
        top = order[:k]
        picked_rows.append(np.full(k, local))
        picked_cols.append(col_ids[top])
        picked_vals.append(row[top])
    return (
        np.concatenate(picked_rows),
        np.concatenate(picked_cols),
        np.concatenate(picked_vals),
    )


def knn_prompt_init(features, k, sample_size=None, seed=0, block=512):
    """Cosine-similarity kNN support as the initial prompt graph.

    Exact mode keeps the k most similar neighbors of every node (self pairs
    excluded); sampled mode restricts candidates to ``sample_size`` seeded
    nodes. The directed selection is symmetrized by union keeping the max
    value.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("empty feature matrix")
    n = x.shape[0]
    if sample_size is None:
        if not 1 <= k <= n - 1:
            raise ValueError("k out of range")
        candidates = np.arange(n)
    else:
        if not 1 <= sample_size <= n:
            raise ValueError("sample size out of range")
        if not 1 <= k <= sample_size:
            raise ValueError("k out of range")
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(n, size=sample_size, replace=False))

    xn = _normalized_rows(x)
    cand = xn[candidates]
    pos_of = -np.ones(n, dtype=np.int64)
    pos_of[candidates] = np.arange(candidates.size)

    rows_all, cols_all, vals_all = [], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = xn[start:stop] @ cand.T
        self_col = pos_of[np.arange(start, stop)]
        r, c, v = _topk_per_row(sims, k, candidates, self_col)
        rows_all.append(r + start)
        cols_all.append(c)
        vals_all.append(v)
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)

    # union symmetrization keeping the max value per (i, j)
    both_r = np.concatenate([rows, cols])
    both_c = np.concatenate([cols, rows])
    both_v = np.concatenate([vals, vals])
    keys = both_r * n + both_c
    order = np.argsort(keys, kind="stable")
    keys, both_v = keys[order], both_v[order]
    uniq, starts = np.unique(keys, return_index=True)
    maxv = np.maximum.reduceat(both_v, starts)
    return SparseAdj.from_coo(n, uniq // n, uniq % n, maxv)


def edge_homophily(graph):
    """Fraction of undirected edges whose endpoints share a label; NaN for
    an edgeless graph."""
    if graph.labels is None:
        raise ValueError("missing labels")
    mask = graph.src < graph.dst
    if not mask.any():
        return float("nan")
    same = graph.labels[graph.src[mask]] == graph.labels[graph.dst[mask]]
    return float(same.mean())


def add_gaussian_noise(features, sigma, seed):
    """features + N(0, sigma^2) noise, deterministic per seed."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)
