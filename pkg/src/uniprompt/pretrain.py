"""Self-supervised pretraining objectives that produce frozen encoders.

Three objectives are provided: local-global mutual information with a
corrupted negative graph (dgi), two-view InfoNCE contrast with edge dropping
and feature masking (grace), and masked-feature reconstruction with a scaled
cosine error (graphmae). Each returns the trained encoder with its frozen
flag set.

Per-epoch training losses are noisy because every epoch draws a fresh
corruption/view/mask instance. The ``probe_seed`` paths therefore evaluate
the live objective on one fixed instance; a probe that fails to shrink over
the first epochs flags a bad configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import encode, freeze, init_encoder
from .graphs import SparseAdj, symmetric_normalize
from .seeds import rng_stream

OBJECTIVES = ("dgi", "grace", "graphmae")


@dataclass
class PretrainConfig:
    objective: str
    epochs: int = 300
    lr: float = 0.001
    seed: int = 0
    hidden_dim: int = 256
    embed_dim: int = 256
    activation: str = "prelu"
    # grace
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    temperature: float = 0.5
    # graphmae
    mask_rate: float = 0.5
    sce_gamma: float = 2.0

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective '{self.objective}'")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("edge_drop", "feature_mask", "mask_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sce_gamma < 1.0:
            raise ValueError("sce_gamma must be >= 1")
        return self


def pretrain(graph, cfg):
    cfg.validate()
    return _TRAINERS[cfg.objective](graph, cfg)[0]


def pretrain_with_history(graph, cfg, probe_seed=None):
    """Returns (frozen encoder, per-epoch training losses, probe losses).

    The probe list (empty unless ``probe_seed`` is given) holds the objective
    evaluated on one fixed stochasticity instance before training and after
    every epoch.
    """
    cfg.validate()
    return _TRAINERS[cfg.objective](graph, cfg, probe_seed)


def _check_finite(value, epoch):
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite pretraining loss at epoch {epoch}")


def _train(cfg, loss_fn, params, epoch_rng, probe_seed):
    """Shared loop: per-epoch fresh-instance loss, Adam step, optional fixed
    -instance probes (before training and after each epoch)."""
    opt = ad.AdamState(params, lr=cfg.lr)
    history, probes = [], []

    def probe():
        if probe_seed is not None:
            probes.append(loss_fn(np.random.default_rng(probe_seed)).item())

    probe()
    for epoch in range(cfg.epochs):
        loss = loss_fn(epoch_rng)
        _check_finite(loss.item(), epoch)
        history.append(loss.item())
        ad.backward(loss)
        ad.adam_step(opt)
        probe()
    return history, probes


# ---------------------------------------------------------------------------
# DGI: local-global mutual information
# ---------------------------------------------------------------------------


def dgi_loss_at_scores(score_pos, score_neg):
    """Binary cross-entropy on discriminator logits (positives label 1)."""
    sp = ad.constant(np.asarray(score_pos, dtype=np.float64).reshape(-1, 1))
    sn = ad.constant(np.asarray(score_neg, dtype=np.float64).reshape(-1, 1))
    return 0.5 * (
        ad.row_mean(ad.softplus(ad.scalar_scale(sp, -1.0))).item()
        + ad.row_mean(ad.softplus(sn)).item()
    )


def dgi_pretrain(graph, cfg):
    if cfg.validate().objective != "dgi":
        raise ValueError("config objective must be 'dgi'")
    return _dgi(graph, cfg)[0]


def _dgi(graph, cfg, probe_seed=None):
    adj = symmetric_normalize(graph.adjacency(), add_self_loops=True)
    x = ad.constant(graph.features)
    enc = init_encoder(graph.num_features, cfg.hidden_dim, cfg.embed_dim,
                       cfg.activation, rng_stream("encoder-init", cfg.seed))
    disc = ad.parameter(np.eye(cfg.embed_dim), name="dgi.discriminator")

    def loss_fn(rng):
        perm = rng.permutation(graph.num_nodes)
        h_pos = encode(enc, adj, x)
        h_neg = encode(enc, adj, ad.constant(graph.features[perm]))
        summary = ad.sigmoid(ad.row_mean(h_pos))                  # (1, d)
        weighted = ad.matmul(disc, ad.transpose(summary))         # (d, 1)
        score_pos = ad.matmul(h_pos, weighted)                    # (n, 1)
        score_neg = ad.matmul(h_neg, weighted)
        return ad.scalar_scale(
            ad.add(ad.row_mean(ad.softplus(ad.scalar_scale(score_pos, -1.0))),
                   ad.row_mean(ad.softplus(score_neg))),
            0.5,
        )

    history, probes = _train(cfg, loss_fn, enc.parameters() + [disc],
                             rng_stream("corruption", cfg.seed), probe_seed)
    return freeze(enc), history, probes


# ---------------------------------------------------------------------------
# GRACE: two-view InfoNCE
# ---------------------------------------------------------------------------


def _drop_edges(graph, rate, rng):
    mask = graph.src < graph.dst
    pairs = np.stack([graph.src[mask], graph.dst[mask]], axis=1)
    keep = rng.random(pairs.shape[0]) >= rate
    if pairs.shape[0] and not keep.any():
        raise RuntimeError("edge-drop rate left zero edges")
    kept = pairs[keep]
    rows = np.concatenate([kept[:, 0], kept[:, 1]])
    cols = np.concatenate([kept[:, 1], kept[:, 0]])
    return SparseAdj.from_coo(graph.num_nodes, rows, cols, np.ones(rows.size))


def _mask_feature_columns(x, rate, rng):
    keep = (rng.random(x.shape[1]) >= rate).astype(np.float64)
    return x * keep


def infonce_loss(z1, z2, temperature):
    """Symmetric InfoNCE: positives are the same node across views, negatives
    are all other nodes in both views."""
    inv_t = 1.0 / temperature
    s12 = ad.scalar_scale(ad.matmul(z1, ad.transpose(z2)), inv_t)
    s11 = ad.scalar_scale(ad.matmul(z1, ad.transpose(z1)), inv_t)
    s22 = ad.scalar_scale(ad.matmul(z2, ad.transpose(z2)), inv_t)

    def directed(cross, intra):
        pos = ad.take_diag(cross)
        denom = ad.add(
            ad.row_sum(ad.exp(cross)),
            ad.sub(ad.row_sum(ad.exp(intra)), ad.exp(ad.take_diag(intra))),
        )
        return ad.row_mean(ad.sub(ad.log(denom), pos))

    return ad.scalar_scale(
        ad.add(directed(s12, s11), directed(ad.transpose(s12), s22)), 0.5
    )


def grace_pretrain(graph, cfg):
    if cfg.validate().objective != "grace":
        raise ValueError("config objective must be 'grace'")
    return _grace(graph, cfg)[0]


def _grace(graph, cfg, probe_seed=None):
    enc = init_encoder(graph.num_features, cfg.hidden_dim, cfg.embed_dim,
                       cfg.activation, rng_stream("encoder-init", cfg.seed))
    init_rng = rng_stream("encoder-init", cfg.seed, 1)
    d = cfg.embed_dim
    limit = np.sqrt(6.0 / (2 * d))
    head = [
        ad.parameter(init_rng.uniform(-limit, limit, size=(d, d)), name="grace.proj.w1"),
        ad.parameter(np.zeros((1, d)), name="grace.proj.b1"),
        ad.parameter(init_rng.uniform(-limit, limit, size=(d, d)), name="grace.proj.w2"),
        ad.parameter(np.zeros((1, d)), name="grace.proj.b2"),
    ]

    def project(h):
        hidden = ad.elu(ad.add(ad.matmul(h, head[0]), head[1]))
        return ad.l2_normalize_rows(ad.add(ad.matmul(hidden, head[2]), head[3]))

    def loss_fn(rng):
        adj1 = symmetric_normalize(_drop_edges(graph, cfg.edge_drop, rng))
        adj2 = symmetric_normalize(_drop_edges(graph, cfg.edge_drop, rng))
        x1 = ad.constant(_mask_feature_columns(graph.features, cfg.feature_mask, rng))
        x2 = ad.constant(_mask_feature_columns(graph.features, cfg.feature_mask, rng))
        z1 = project(encode(enc, adj1, x1))
        z2 = project(encode(enc, adj2, x2))
        return infonce_loss(z1, z2, cfg.temperature)

    history, probes = _train(cfg, loss_fn, enc.parameters() + head,
                             rng_stream("views", cfg.seed), probe_seed)
    return freeze(enc), history, probes


# ---------------------------------------------------------------------------
# GraphMAE: masked-feature reconstruction with scaled cosine error
# ---------------------------------------------------------------------------


def scaled_cosine_error(x_true, x_hat, gamma):
    """Mean over rows of (1 - cos(x, x_hat))^gamma."""
    xn = ad.l2_normalize_rows(x_true)
    hn = ad.l2_normalize_rows(x_hat)
    cos = ad.row_sum(ad.hadamard(xn, hn))
    one = ad.constant(np.ones_like(cos.data))
    return ad.row_mean(ad.power(ad.sub(one, cos), gamma))


def graphmae_pretrain(graph, cfg):
    if cfg.validate().objective != "graphmae":
        raise ValueError("config objective must be 'graphmae'")
    return _graphmae(graph, cfg)[0]


def _graphmae(graph, cfg, probe_seed=None):
    if cfg.mask_rate == 0:
        raise ValueError("mask rate 0 gives no training signal")
    adj = symmetric_normalize(graph.adjacency(), add_self_loops=True)
    n, f = graph.features.shape
    enc = init_encoder(f, cfg.hidden_dim, cfg.embed_dim, cfg.activation,
                       rng_stream("encoder-init", cfg.seed))
    init_rng = rng_stream("encoder-init", cfg.seed, 1)
    mask_token = ad.parameter(np.zeros((1, f)), name="graphmae.mask_token")
    limit = np.sqrt(6.0 / (cfg.embed_dim + f))
    dec_w = ad.parameter(init_rng.uniform(-limit, limit, size=(cfg.embed_dim, f)),
                         name="graphmae.decoder.weight")
    dec_b = ad.parameter(np.zeros((1, f)), name="graphmae.decoder.bias")
    n_mask = max(1, int(round(cfg.mask_rate * n)))

    def loss_fn(rng):
        masked = np.sort(rng.choice(n, size=n_mask, replace=False))
        keep_rows = np.ones((n, 1))
        keep_rows[masked] = 0.0
        indicator = ad.constant(1.0 - keep_rows)
        x_masked = ad.add(
            ad.hadamard(ad.constant(graph.features),
                        ad.constant(np.repeat(keep_rows, f, axis=1))),
            ad.matmul(indicator, mask_token),
        )
        h = encode(enc, adj, x_masked)
        h_remasked = ad.hadamard(
            h, ad.constant(np.repeat(keep_rows, cfg.embed_dim, axis=1))
        )
        x_hat = ad.add(ad.spmm(adj, ad.matmul(h_remasked, dec_w)), dec_b)
        return scaled_cosine_error(
            ad.constant(graph.features[masked]),
            ad.gather_rows(x_hat, masked),
            cfg.sce_gamma,
        )

    history, probes = _train(cfg, loss_fn, enc.parameters() + [mask_token, dec_w, dec_b],
                             rng_stream("mask", cfg.seed), probe_seed)
    return freeze(enc), history, probes


_TRAINERS = {"dgi": _dgi, "grace": _grace, "graphmae": _graphmae}
