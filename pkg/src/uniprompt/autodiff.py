"""Dense/sparse float64 arithmetic with a define-by-run reverse-mode tape.

Every tensor is a 2-D float64 matrix; scalars are shape (1, 1). Each
operation computes its forward value eagerly and records a backward rule,
so a fresh tape is built on every training step. Gradients flow only into
subgraphs reachable from tensors created with ``requires_grad=True``;
constant subgraphs are pruned at construction time and cost nothing at
backward.
"""

from __future__ import annotations

import json
import struct

import numpy as np

LOG_EPS = 1e-12  # additive floor inside log / l2-normalize

# Ops with a registered backward rule. The finite-difference test sweep is
# keyed off this tuple, so adding an op here without coverage fails the suite.
REGISTERED_OPS = (
    "add",
    "concat_rows",
    "cross_entropy",
    "dropout",
    "elu",
    "exp",
    "gather_rows",
    "hadamard",
    "l2_normalize_rows",
    "log",
    "matmul",
    "power",
    "prelu",
    "relu",
    "row_mean",
    "row_sum",
    "scalar_scale",
    "segment_sum",
    "sigmoid",
    "softmax_rows",
    "softplus",
    "spmm",
    "sum_all",
    "take_diag",
    "tanh",
    "transpose",
)


class Tensor:
    """A 2-D float64 value on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError(f"tensors are 2-D matrices, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _node(data, parents, backward_fn):
    """Build an op output; prune the tape when no parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(root, params=None):
    """Accumulate d(root)/d(leaf) through the tape in reverse topological order.

    Returns a dict mapping each tensor in ``params`` (if given) to its
    gradient; tensors disconnected from ``root`` map to zeros. All visited
    gradient accumulators are zero-initialized, and each node's rule runs
    exactly once.
    """
    if root.data.shape != (1, 1):
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones((1, 1))

    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)

    if params is None:
        return None
    out = {}
    for p in params:
        out[p] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    """a + b; b may be a (1, c) row or (1, 1) scalar broadcast against a."""
    if a.shape != b.shape and not (b.shape in ((1, a.shape[1]), (1, 1))):
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def bw(go):
        if a.requires_grad:
            _accum(a, go)
        if b.requires_grad:
            if b.shape == a.shape:
                _accum(b, go)
            elif b.shape == (1, 1):
                _accum(b, go.sum().reshape(1, 1))
            else:
                _accum(b, go.sum(axis=0, keepdims=True))

    return _node(out_data, (a, b), bw)


def sub(a, b):
    return add(a, scalar_scale(b, -1.0))


def hadamard(a, b):
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def bw(go):
        if a.requires_grad:
            _accum(a, go * b.data)
        if b.requires_grad:
            _accum(b, go * a.data)

    return _node(out_data, (a, b), bw)


def scalar_scale(a, s):
    s = float(s)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * s)

    return _node(a.data * s, (a,), bw)


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(go):
        if a.requires_grad:
            _accum(a, go @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ go)

    return _node(out_data, (a, b), bw)


def transpose(a):
    def bw(go):
        if a.requires_grad:
            _accum(a, go.T)

    return _node(a.data.T, (a,), bw)


def row_mean(a):
    n = a.shape[0]

    def bw(go):
        if a.requires_grad:
            _accum(a, np.repeat(go, n, axis=0) / n)

    return _node(a.data.mean(axis=0, keepdims=True), (a,), bw)


def row_sum(a):
    """Sum each row: (n, c) -> (n, 1)."""

    def bw(go):
        if a.requires_grad:
            _accum(a, np.repeat(go, a.shape[1], axis=1))

    return _node(a.data.sum(axis=1, keepdims=True), (a,), bw)


def sum_all(a):
    def bw(go):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, go[0, 0]))

    return _node(a.data.sum().reshape(1, 1), (a,), bw)


def concat_rows(a, b):
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"concat_rows width mismatch: {a.shape} vs {b.shape}")
    na = a.shape[0]

    def bw(go):
        if a.requires_grad:
            _accum(a, go[:na])
        if b.requires_grad:
            _accum(b, go[na:])

    return _node(np.concatenate([a.data, b.data], axis=0), (a, b), bw)


def gather_rows(a, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("gather_rows ids must be a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise ValueError("gather_rows index out of range")

    def bw(go):
        if a.requires_grad:
            if go.shape[1] == 1:
                g = np.bincount(ids, weights=go[:, 0], minlength=a.shape[0])
                _accum(a, g.reshape(-1, 1))
            else:
                g = np.zeros_like(a.data)
                np.add.at(g, ids, go)
                _accum(a, g)

    return _node(a.data[ids], (a,), bw)


def segment_sum(a, seg_ids, num_segments):
    """Scatter-add rows of a (n, c) tensor into ``num_segments`` output rows."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    if seg_ids.shape != (a.shape[0],):
        raise ValueError("segment_sum needs one segment id per row")
    if seg_ids.size and (seg_ids.min() < 0 or seg_ids.max() >= num_segments):
        raise ValueError("segment_sum segment id out of range")
    if a.shape[1] == 1:
        out_data = np.bincount(seg_ids, weights=a.data[:, 0],
                               minlength=num_segments).reshape(-1, 1)
    else:
        out_data = np.zeros((num_segments, a.shape[1]))
        np.add.at(out_data, seg_ids, a.data)

    def bw(go):
        if a.requires_grad:
            _accum(a, go[seg_ids])

    return _node(out_data, (a,), bw)


def take_diag(a):
    n, c = a.shape
    if n != c:
        raise ValueError(f"take_diag needs a square tensor, got {a.shape}")

    def bw(go):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.fill_diagonal(g, go[:, 0])
            _accum(a, g)

    return _node(np.diag(a.data).reshape(-1, 1), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    mask = a.data > 0

    def bw(go):
        if a.requires_grad:
            _accum(a, go * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def elu(a):
    pos = a.data > 0
    # clip only the exp argument; saturation keeps values in (-1, 0]
    expm1 = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(pos, a.data, expm1)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * np.where(pos, 1.0, expm1 + 1.0))

    return _node(out_data, (a,), bw)


def prelu(a, slope):
    """max(x, 0) + slope * min(x, 0) with a learnable (1, 1) slope."""
    if slope.shape != (1, 1):
        raise ValueError("prelu slope must be a (1, 1) tensor")
    neg = np.minimum(a.data, 0.0)
    out_data = np.maximum(a.data, 0.0) + slope.data[0, 0] * neg

    def bw(go):
        if a.requires_grad:
            _accum(a, go * np.where(a.data > 0, 1.0, slope.data[0, 0]))
        if slope.requires_grad:
            _accum(slope, (go * neg).sum().reshape(1, 1))

    return _node(out_data, (a, slope), bw)


def sigmoid(a):
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * out_data)

    return _node(out_data, (a,), bw)


def log(a):
    """log(x + 1e-12); the floor keeps zero inputs finite."""
    shifted = a.data + LOG_EPS

    def bw(go):
        if a.requires_grad:
            _accum(a, go / shifted)

    return _node(np.log(shifted), (a,), bw)


def softplus(a):
    out_data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -700, 700)))

    def bw(go):
        if a.requires_grad:
            _accum(a, go * sig)

    return _node(out_data, (a,), bw)


def power(a, p):
    """Elementwise x**p for a constant exponent; callers keep x in the domain."""
    p = float(p)
    out_data = a.data**p

    def bw(go):
        if a.requires_grad:
            _accum(a, go * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), bw)


def softmax_rows(a):
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(go):
        if a.requires_grad:
            dot = (go * out_data).sum(axis=1, keepdims=True)
            _accum(a, out_data * (go - dot))

    return _node(out_data, (a,), bw)


def l2_normalize_rows(a):
    """x / sqrt(sum(x^2) + 1e-12) per row; the floor keeps zero rows finite."""
    sq = (a.data * a.data).sum(axis=1, keepdims=True) + LOG_EPS
    inv = sq**-0.5
    out_data = a.data * inv

    def bw(go):
        if a.requires_grad:
            dot = (go * a.data).sum(axis=1, keepdims=True)
            _accum(a, go * inv - a.data * (dot * inv / sq))

    return _node(out_data, (a,), bw)


def dropout(a, p, seed):
    """Inverted dropout with a deterministic per-seed mask; p in [0, 1)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def bw(go):
        if a.requires_grad:
            _accum(a, go * mask)

    return _node(a.data * mask, (a,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, targets):
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if targets.shape != (n,):
        raise ValueError(f"cross_entropy needs {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError("cross_entropy target out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    lse = np.log(e.sum(axis=1)) + logits.data.max(axis=1)
    losses = lse - logits.data[np.arange(n), targets]
    out_data = np.array([[losses.mean()]])

    def bw(go):
        if logits.requires_grad:
            g = probs.copy()
            g[np.arange(n), targets] -= 1.0
            _accum(logits, go[0, 0] * g / n)

    return _node(out_data, (logits,), bw)


# ---------------------------------------------------------------------------
# sparse
# ---------------------------------------------------------------------------


class SparseTensor:
    """A fixed CSR sparsity pattern whose values live on the tape."""

    __slots__ = ("pattern", "values")

    def __init__(self, pattern, values):
        if values.shape != (pattern.nnz, 1):
            raise ValueError(
                f"sparse values must be ({pattern.nnz}, 1), got {values.shape}"
            )
        self.pattern = pattern
        self.values = values

    @property
    def n(self):
        return self.pattern.n


def spmm(adj, x):
    """Sparse @ dense. ``adj`` is a SparseAdj (constant) or SparseTensor."""
    if isinstance(adj, SparseTensor):
        pattern, values = adj.pattern, adj.values
    else:
        pattern, values = adj, constant(adj.data.reshape(-1, 1))
    if pattern.n != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: adjacency {pattern.n} vs dense {x.shape}")
    mat = pattern.to_scipy(values.data.reshape(-1))
    out_data = np.asarray(mat @ x.data)
    rows = pattern.row_ids()
    cols = pattern.indices

    def edge_grads(go):
        # d(loss)/d(value at (i, j)) = go[i] . x[j]; below ~4k nodes the dense
        # product is far cheaper than per-edge gathers
        if pattern.n * pattern.n_cols <= 16_777_216:
            return (go @ x.data.T)[rows, cols]
        out = np.empty(rows.size)
        for start in range(0, rows.size, 65536):
            stop = min(start + 65536, rows.size)
            out[start:stop] = np.einsum(
                "ij,ij->i", go[rows[start:stop]], x.data[cols[start:stop]]
            )
        return out

    def bw(go):
        if x.requires_grad:
            _accum(x, np.asarray(mat.T @ go))
        if values.requires_grad:
            _accum(values, edge_grads(go).reshape(-1, 1))

    return _node(out_data, (values, x), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0


def adam_step(state, grads=None):
    """Apply one Adam update in place; ``grads`` defaults to each .grad."""
    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(state.params):
        g = grads[p] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            name = p.name or f"param[{i}]"
            raise RuntimeError(f"non-finite gradient for parameter '{name}'")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(tensors):
    """Serialize {name: array}: one JSON header line, then little-endian
    float64 payloads in header order."""
    header = {name: list(np.asarray(arr).shape) for name, arr in tensors.items()}
    blob = [json.dumps(header).encode() + b"\n"]
    for name in header:
        blob.append(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return b"".join(blob)


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode())
        out = {}
        for name, shape in header.items():
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise ValueError(f"truncated checkpoint payload for '{name}'")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out
