"""Learnable prompt topology: kNN initialization, edge gating, bootstrapped
fusion with the original adjacency, and the joint prompt/classifier tuning
loop, plus the fine-tune / linear-probe / feature-prompt baselines and the
component-replacement ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoder import (
    Classifier,
    classify,
    clone_encoder,
    encode,
    encoder_checkpoint_hash,
    init_classifier,
    predictions_from_logits,
    thaw,
)
from .graphs import SparseAdj, knn_prompt_init, symmetric_normalize
from .seeds import rng_stream

ABLATION_VARIANTS = ("random_topo", "simple_add", "discard_topo")

DEG_EPS = 1e-12  # degree floor when normalizing without self-loops


@dataclass
class TuneConfig:
    up_lr: float = 0.001
    down_lr: float = 0.05
    k: int = 50
    tau: float = 0.9999
    alpha: float = 10.0
    max_epochs: int = 2000
    patience: int = 20
    min_delta: float = 1e-6
    seed: int = 0
    clf_hidden: int = 256
    knn_sample: int | None = None  # sampled-kNN approximation (candidate count)

    def validate(self):
        if self.up_lr <= 0 or self.down_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.k < 1:
            raise ValueError("k out of range")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0 or self.min_delta < 0:
            raise ValueError("max_epochs and min_delta must be non-negative")
        return self


def gate(w, alpha):
    """ELU(w * alpha - alpha) + 1: smooth, positive, monotone in w."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = w * alpha - alpha
    return z + 1.0 if z > 0 else math.exp(z)


def gate_values(w, alpha):
    """Tape version of the gate for a (nnz, 1) weight tensor."""
    z = ad.add(ad.scalar_scale(w, alpha), ad.constant(np.array([[-alpha]])))
    return ad.add(ad.elu(z), ad.constant(np.array([[1.0]])))


class _NormContext:
    """Precomputed structure for differentiable symmetric normalization over
    a fixed support (optionally with self-loops appended)."""

    def __init__(self, pattern, add_self_loops):
        self.pattern = pattern
        self.rows = pattern.row_ids()
        self.cols = pattern.indices
        self.add_self_loops = add_self_loops
        n = pattern.n
        if add_self_loops:
            diag = np.arange(n)
            all_rows = np.concatenate([self.rows, diag])
            all_cols = np.concatenate([self.cols, diag])
            keys = all_rows * n + all_cols
            if np.unique(keys).size != keys.size:
                raise ValueError("support already contains self-loops")
            self.order = np.argsort(keys, kind="stable")
            self.norm_pattern = SparseAdj.from_coo(
                n, all_rows, all_cols, np.zeros(all_rows.size)
            )
        else:
            self.order = None
            self.norm_pattern = pattern

    def normalize(self, values):
        """D^(-1/2) (V [+ I]) D^(-1/2) over the fixed support, on the tape."""
        n = self.pattern.n
        deg = ad.segment_sum(values, self.rows, n)
        if self.add_self_loops:
            deg = ad.add(deg, ad.constant(np.ones((n, 1))))
        else:
            deg = ad.add(deg, ad.constant(np.full((n, 1), DEG_EPS)))
        dinv = ad.power(deg, -0.5)
        edge = ad.hadamard(
            ad.hadamard(values, ad.gather_rows(dinv, self.rows)),
            ad.gather_rows(dinv, self.cols),
        )
        if not self.add_self_loops:
            return ad.SparseTensor(self.norm_pattern, edge)
        diag = ad.hadamard(dinv, dinv)
        ordered = ad.gather_rows(ad.concat_rows(edge, diag), self.order)
        return ad.SparseTensor(self.norm_pattern, ordered)


@dataclass
class PromptState:
    """Gate weights over a fixed prompt support plus the fused-adjacency
    history. The fused support never exceeds support(A) | support(init)."""

    init_support: SparseAdj          # prompt support (init similarity values)
    w: ad.Tensor                     # (nnz, 1) gate weights
    alpha: float
    tau: float
    union: SparseAdj                 # support(A) | support(init), values = A
    init_pos_in_union: np.ndarray    # position of each support entry in union
    fused_current: np.ndarray        # (union nnz, 1) values of A_hat^(t)
    t: int = 0

    @property
    def num_prompt_edges(self):
        return self.init_support.nnz


def _union_with_graph(adj, support):
    """Union support with the graph's values (zero on prompt-only entries),
    plus the positions of the prompt entries inside the union."""
    n = adj.n
    rows = np.concatenate([adj.row_ids(), support.row_ids()])
    cols = np.concatenate([adj.indices, support.indices])
    vals = np.concatenate([adj.data, np.zeros(support.nnz)])
    union = SparseAdj.from_coo(n, rows, cols, vals)
    union_keys = union.row_ids() * n + union.indices
    support_keys = support.row_ids() * n + support.indices
    pos = np.searchsorted(union_keys, support_keys)
    return union, pos


def init_prompt_state(graph, support, cfg):
    union, pos = _union_with_graph(graph.adjacency(), support)
    w = ad.parameter(np.ones((support.nnz, 1)), name="prompt.gate_weights")
    return PromptState(
        init_support=support,
        w=w,
        alpha=cfg.alpha,
        tau=cfg.tau,
        union=union,
        init_pos_in_union=pos,
        fused_current=union.data.reshape(-1, 1).copy(),
    )


def build_prompt_adj(state):
    """Gate values on the prompt support; gradients flow to the weights."""
    return ad.SparseTensor(state.init_support, gate_values(state.w, state.alpha))


def bootstrap_fuse(state, prompt_adj):
    """A_hat^(t) = tau * stop_grad(A_hat^(t-1)) + (1 - tau) * A_tilde over the
    union support; only the prompt term carries gradient."""
    if not 0.0 <= state.tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {state.tau}")
    scattered = ad.segment_sum(
        prompt_adj.values, state.init_pos_in_union, state.union.nnz
    )
    fused = ad.add(
        ad.scalar_scale(ad.constant(state.fused_current), state.tau),
        ad.scalar_scale(scattered, 1.0 - state.tau),
    )
    state.t += 1
    state.fused_current = fused.data.copy()
    return ad.SparseTensor(state.union, fused)


def random_support_like(knn_support, n, rng):
    """Seeded random symmetric support with exactly as many entries as the
    kNN support (the topology-replacement ablation)."""
    if knn_support.nnz % 2 != 0:
        raise ValueError("prompt support must be symmetric")
    m = knn_support.nnz // 2
    total = n * (n - 1) // 2
    if m > total:
        raise ValueError("graph too small for the requested edge count")
    flat = rng.choice(total, size=m, replace=False)
    # invert the row-major upper-triangle enumeration; the float solve can be
    # off by one at row boundaries, so nudge afterwards
    i = ((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * flat)) // 2).astype(np.int64)
    offset = lambda r: r * (2 * n - 1 - r) // 2
    i = np.where(offset(i) > flat, i - 1, i)
    i = np.where(offset(i + 1) <= flat, i + 1, i)
    j = (flat - offset(i) + i + 1).astype(np.int64)
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    return SparseAdj.from_coo(n, rows, cols, np.ones(rows.size))


@dataclass
class TuneResult:
    method: str
    predictions: np.ndarray
    loss_history: list
    epochs_run: int
    final_loss: float
    classifier: Classifier
    prompt_state: PromptState | None = None
    encoder: object = None
    feature_prompt: ad.Tensor | None = None


def _validate_labeled(graph, train_ids):
    ids = np.asarray(train_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("no labeled nodes")
    if np.unique(ids).size != ids.size:
        raise ValueError("labeled ids must be distinct")
    if ids.min() < 0 or ids.max() >= graph.num_nodes:
        raise ValueError("labeled id out of range")
    if graph.labels is None:
        raise ValueError("missing labels")
    return ids


def _train_loop(cfg, step_fn):
    """Shared early-stopping loop: stop at max_epochs or after ``patience``
    epochs without the training loss improving by more than min_delta."""
    history = []
    best = math.inf
    bad = 0
    for epoch in range(cfg.max_epochs):
        loss = step_fn(epoch)
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at epoch {epoch}")
        history.append(loss)
        if best - loss > cfg.min_delta:
            best = loss
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return history


def _prompt_support(graph, cfg, topology):
    if topology == "knn":
        if cfg.knn_sample is not None:
            sample_seed = int(rng_stream("prompt-init", cfg.seed).integers(2**31))
            return knn_prompt_init(
                graph.features, cfg.k, sample_size=cfg.knn_sample, seed=sample_seed
            )
        return knn_prompt_init(graph.features, cfg.k)
    if topology == "random":
        knn = knn_prompt_init(graph.features, cfg.k)
        return random_support_like(knn, graph.num_nodes, rng_stream("prompt-init", cfg.seed))
    raise ValueError(f"unknown topology '{topology}'")


def _prompt_tune(graph, encoder, train_ids, cfg, topology, integration, method):
    cfg.validate()
    if not encoder.frozen:
        raise ValueError("prompt tuning requires a frozen encoder")
    ids = _validate_labeled(graph, train_ids)
    targets = graph.labels[ids]
    hash_before = encoder_checkpoint_hash(encoder)

    support = _prompt_support(graph, cfg, topology)
    state = init_prompt_state(graph, support, cfg)
    clf = init_classifier(encoder.out_dim, cfg.clf_hidden, graph.num_classes,
                          rng_stream("classifier-init", cfg.seed))
    opt_w = ad.AdamState([state.w], lr=cfg.up_lr)
    opt_clf = ad.AdamState(clf.parameters(), lr=cfg.down_lr)

    if integration == "discard":
        ctx = _NormContext(support, add_self_loops=False)
    else:
        ctx = _NormContext(state.union, add_self_loops=True)
    a_union = ad.constant(state.union.data.reshape(-1, 1))
    x = ad.constant(graph.features)

    def adjacency(values_w):
        prompt_adj = ad.SparseTensor(support, gate_values(values_w, cfg.alpha))
        if integration == "bootstrap":
            fused = bootstrap_fuse(state, prompt_adj)
            return ctx.normalize(fused.values)
        if integration == "discard":
            return ctx.normalize(prompt_adj.values)
        if integration == "simple_add":
            scattered = ad.segment_sum(
                prompt_adj.values, state.init_pos_in_union, state.union.nnz
            )
            return ctx.normalize(ad.add(a_union, scattered))
        raise ValueError(f"unknown integration '{integration}'")

    def step(epoch):
        adj = adjacency(state.w)
        logits = classify(clf, encode(encoder, adj, x))
        loss = ad.cross_entropy(ad.gather_rows(logits, ids), targets)
        ad.backward(loss)
        ad.adam_step(opt_w)
        ad.adam_step(opt_clf)
        return loss.item()

    history = _train_loop(cfg, step)

    # predict with the end-of-training state: the last fused adjacency for the
    # bootstrap path, the current gates otherwise
    if integration == "bootstrap":
        final_adj = ctx.normalize(ad.constant(state.fused_current))
    else:
        final_adj = adjacency(state.w.detach())
    logits = classify(clf, encode(encoder, final_adj, x))
    preds = predictions_from_logits(logits)

    if encoder_checkpoint_hash(encoder) != hash_before:
        raise RuntimeError("frozen encoder parameters changed during prompt tuning")
    return TuneResult(
        method=method,
        predictions=preds,
        loss_history=history,
        epochs_run=len(history),
        final_loss=history[-1] if history else math.nan,
        classifier=clf,
        prompt_state=state,
    )


def uniprompt_tune(graph, encoder, train_ids, cfg):
    """Joint gate/classifier optimization through the bootstrapped fusion
    pipeline; the encoder stays frozen (checkpoint-hash asserted)."""
    return _prompt_tune(graph, encoder, train_ids, cfg, "knn", "bootstrap", "uniprompt")


def ablation_tune(variant, graph, encoder, train_ids, cfg):
    if variant == "random_topo":
        return _prompt_tune(graph, encoder, train_ids, cfg, "random", "bootstrap",
                            "ablate:random_topo")
    if variant == "simple_add":
        return _prompt_tune(graph, encoder, train_ids, cfg, "knn", "simple_add",
                            "ablate:simple_add")
    if variant == "discard_topo":
        return _prompt_tune(graph, encoder, train_ids, cfg, "knn", "discard",
                            "ablate:discard_topo")
    raise ValueError(f"unknown ablation variant '{variant}'")


def linear_probe_tune(graph, encoder, train_ids, cfg):
    """Classifier-only optimization on representations computed once from the
    original normalized adjacency."""
    cfg.validate()
    if not encoder.frozen:
        raise ValueError("linear probing requires a frozen encoder")
    ids = _validate_labeled(graph, train_ids)
    targets = graph.labels[ids]
    hash_before = encoder_checkpoint_hash(encoder)

    adj = symmetric_normalize(graph.adjacency(), add_self_loops=True)
    h = encode(encoder, adj, ad.constant(graph.features))  # single forward
    clf = init_classifier(encoder.out_dim, cfg.clf_hidden, graph.num_classes,
                          rng_stream("classifier-init", cfg.seed))
    opt = ad.AdamState(clf.parameters(), lr=cfg.down_lr)

    def step(epoch):
        logits = classify(clf, h)
        loss = ad.cross_entropy(ad.gather_rows(logits, ids), targets)
        ad.backward(loss)
        ad.adam_step(opt)
        return loss.item()

    history = _train_loop(cfg, step)
    preds = predictions_from_logits(classify(clf, h))
    if encoder_checkpoint_hash(encoder) != hash_before:
        raise RuntimeError("frozen encoder parameters changed during linear probing")
    return TuneResult(
        method="linear-probe",
        predictions=preds,
        loss_history=history,
        epochs_run=len(history),
        final_loss=history[-1] if history else math.nan,
        classifier=clf,
    )


def fine_tune(graph, encoder, train_ids, cfg):
    """Joint encoder/classifier optimization on the original normalized
    adjacency. Pass a thawed clone; the encoder is mutated in place."""
    cfg.validate()
    if encoder.frozen:
        raise ValueError("fine-tuning requires a thawed encoder (clone and thaw first)")
    ids = _validate_labeled(graph, train_ids)
    targets = graph.labels[ids]

    adj = symmetric_normalize(graph.adjacency(), add_self_loops=True)
    x = ad.constant(graph.features)
    clf = init_classifier(encoder.out_dim, cfg.clf_hidden, graph.num_classes,
                          rng_stream("classifier-init", cfg.seed))
    opt_enc = ad.AdamState(encoder.parameters(), lr=cfg.up_lr)
    opt_clf = ad.AdamState(clf.parameters(), lr=cfg.down_lr)

    def step(epoch):
        logits = classify(clf, encode(encoder, adj, x))
        loss = ad.cross_entropy(ad.gather_rows(logits, ids), targets)
        ad.backward(loss)
        ad.adam_step(opt_enc)
        ad.adam_step(opt_clf)
        return loss.item()

    history = _train_loop(cfg, step)
    preds = predictions_from_logits(classify(clf, encode(encoder, adj, x)))
    return TuneResult(
        method="fine-tune",
        predictions=preds,
        loss_history=history,
        epochs_run=len(history),
        final_loss=history[-1] if history else math.nan,
        classifier=clf,
        encoder=encoder,
    )


def feature_prompt_tune(graph, encoder, train_ids, cfg):
    """Single learnable prompt vector added to every feature row (the
    feature-prompt baseline); tuned jointly with the classifier on the fixed
    normalized adjacency."""
    cfg.validate()
    if not encoder.frozen:
        raise ValueError("feature-prompt tuning requires a frozen encoder")
    ids = _validate_labeled(graph, train_ids)
    targets = graph.labels[ids]
    hash_before = encoder_checkpoint_hash(encoder)

    adj = symmetric_normalize(graph.adjacency(), add_self_loops=True)
    x = ad.constant(graph.features)
    p = ad.parameter(np.zeros((1, graph.num_features)), name="gpf.prompt")
    clf = init_classifier(encoder.out_dim, cfg.clf_hidden, graph.num_classes,
                          rng_stream("classifier-init", cfg.seed))
    opt_p = ad.AdamState([p], lr=cfg.up_lr)
    opt_clf = ad.AdamState(clf.parameters(), lr=cfg.down_lr)

    def step(epoch):
        logits = classify(clf, encode(encoder, adj, ad.add(x, p)))
        loss = ad.cross_entropy(ad.gather_rows(logits, ids), targets)
        ad.backward(loss)
        ad.adam_step(opt_p)
        ad.adam_step(opt_clf)
        return loss.item()

    history = _train_loop(cfg, step)
    preds = predictions_from_logits(
        classify(clf, encode(encoder, adj, ad.add(x, p.detach())))
    )
    if encoder_checkpoint_hash(encoder) != hash_before:
        raise RuntimeError("frozen encoder parameters changed during feature-prompt tuning")
    return TuneResult(
        method="gpf",
        predictions=preds,
        loss_history=history,
        epochs_run=len(history),
        final_loss=history[-1] if history else math.nan,
        classifier=clf,
        feature_prompt=p,
    )


METHODS = ("uniprompt", "linear-probe", "fine-tune", "gpf") + tuple(
    f"ablate:{v}" for v in ABLATION_VARIANTS
)


def run_method(method, graph, encoder, train_ids, cfg):
    """Dispatch a tuning method by name. ``encoder`` is shared and frozen;
    fine-tune works on a thawed clone."""
    if method == "uniprompt":
        return uniprompt_tune(graph, encoder, train_ids, cfg)
    if method == "linear-probe":
        return linear_probe_tune(graph, encoder, train_ids, cfg)
    if method == "gpf":
        return feature_prompt_tune(graph, encoder, train_ids, cfg)
    if method == "fine-tune":
        return fine_tune(graph, thaw(clone_encoder(encoder)), train_ids, cfg)
    if method.startswith("ablate:"):
        return ablation_tune(method.split(":", 1)[1], graph, encoder, train_ids, cfg)
    raise ValueError(f"unknown method '{method}'")
