"""Two-layer graph convolutional encoder and the downstream MLP classifier."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("prelu", "relu", "identity")


class GcnLayer:
    """One graph convolution: act(A_hat @ X @ W + b)."""

    __slots__ = ("weight", "bias", "activation", "prelu_slope")

    def __init__(self, weight, bias, activation, prelu_slope=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        if weight.shape[1] != bias.shape[1] or bias.shape[0] != 1:
            raise ValueError("bias width must match weight output width")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.prelu_slope = prelu_slope
        if activation == "prelu" and prelu_slope is None:
            raise ValueError("prelu layer needs a slope parameter")


class Encoder:
    """Frozen-or-trainable 2-layer GCN."""

    __slots__ = ("layer1", "layer2", "frozen")

    def __init__(self, layer1, layer2, frozen=False):
        if layer1.weight.shape[1] != layer2.weight.shape[0]:
            raise ValueError("layer-1 output width must match layer-2 input width")
        self.layer1 = layer1
        self.layer2 = layer2
        self.frozen = bool(frozen)

    @property
    def in_dim(self):
        return self.layer1.weight.shape[0]

    @property
    def hidden_dim(self):
        return self.layer1.weight.shape[1]

    @property
    def out_dim(self):
        return self.layer2.weight.shape[1]

    def named_parameters(self):
        out = {}
        for tag, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            out[f"{tag}.weight"] = layer.weight
            out[f"{tag}.bias"] = layer.bias
            if layer.prelu_slope is not None:
                out[f"{tag}.prelu_slope"] = layer.prelu_slope
        return out

    def parameters(self):
        return list(self.named_parameters().values())


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder(in_dim, hidden_dim, out_dim, activation="prelu", rng=None):
    rng = np.random.default_rng(rng)
    layers = []
    for fan_in, fan_out in ((in_dim, hidden_dim), (hidden_dim, out_dim)):
        weight = ad.parameter(_glorot(rng, fan_in, fan_out))
        bias = ad.parameter(np.zeros((1, fan_out)))
        slope = ad.parameter(np.full((1, 1), 0.25)) if activation == "prelu" else None
        layers.append(GcnLayer(weight, bias, activation, slope))
    enc = Encoder(layers[0], layers[1])
    for name, p in enc.named_parameters().items():
        p.name = f"encoder.{name}"
    return enc


def freeze(encoder):
    encoder.frozen = True
    return encoder


def thaw(encoder):
    encoder.frozen = False
    return encoder


def clone_encoder(encoder):
    """Deep copy (independent parameter arrays, same frozen flag)."""
    def copy_layer(layer):
        return GcnLayer(
            ad.Tensor(layer.weight.data.copy(), requires_grad=True, name=layer.weight.name),
            ad.Tensor(layer.bias.data.copy(), requires_grad=True, name=layer.bias.name),
            layer.activation,
            None
            if layer.prelu_slope is None
            else ad.Tensor(layer.prelu_slope.data.copy(), requires_grad=True,
                           name=layer.prelu_slope.name),
        )

    return Encoder(copy_layer(encoder.layer1), copy_layer(encoder.layer2), frozen=encoder.frozen)


def _activate(x, layer, frozen):
    if layer.activation == "relu":
        return ad.relu(x)
    if layer.activation == "prelu":
        slope = layer.prelu_slope.detach() if frozen else layer.prelu_slope
        return ad.prelu(x, slope)
    return x


def encode(encoder, adj_norm, x):
    """H = act(A_hat @ act(A_hat @ X @ W1 + b1) @ W2 + b2).

    ``adj_norm`` is a symmetric-normalized SparseAdj (constant) or a
    SparseTensor whose values carry prompt gradients. A frozen encoder's
    parameters enter the tape as detached constants, so gradients still flow
    through the adjacency values but never into the weights.
    """
    if not isinstance(x, ad.Tensor):
        x = ad.constant(x)
    if x.shape[1] != encoder.in_dim:
        raise ValueError(f"feature width {x.shape[1]} != encoder input width {encoder.in_dim}")
    h = x
    for layer in (encoder.layer1, encoder.layer2):
        weight = layer.weight.detach() if encoder.frozen else layer.weight
        bias = layer.bias.detach() if encoder.frozen else layer.bias
        h = ad.add(ad.spmm(adj_norm, ad.matmul(h, weight)), bias)
        h = _activate(h, layer, encoder.frozen)
    return h


class Classifier:
    """2-layer MLP head: d -> hidden -> C with a ReLU in between."""

    __slots__ = ("w1", "b1", "w2", "b2")

    def __init__(self, w1, b1, w2, b2):
        if w1.shape[1] != w2.shape[0]:
            raise ValueError("hidden widths disagree")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def num_classes(self):
        return self.w2.shape[1]

    def named_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_classifier(in_dim, hidden_dim, num_classes, rng=None):
    rng = np.random.default_rng(rng)
    clf = Classifier(
        ad.parameter(_glorot(rng, in_dim, hidden_dim), name="classifier.w1"),
        ad.parameter(np.zeros((1, hidden_dim)), name="classifier.b1"),
        ad.parameter(_glorot(rng, hidden_dim, num_classes), name="classifier.w2"),
        ad.parameter(np.zeros((1, num_classes)), name="classifier.b2"),
    )
    return clf


def classify(classifier, h):
    if not isinstance(h, ad.Tensor):
        h = ad.constant(h)
    if h.shape[1] != classifier.in_dim:
        raise ValueError(
            f"representation width {h.shape[1]} != classifier input width {classifier.in_dim}"
        )
    hidden = ad.relu(ad.add(ad.matmul(h, classifier.w1), classifier.b1))
    return ad.add(ad.matmul(hidden, classifier.w2), classifier.b2)


def predictions_from_logits(logits):
    """Argmax per row; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def encoder_state_dict(encoder):
    return {name: p.data for name, p in encoder.named_parameters().items()}


def encoder_checkpoint_hash(encoder):
    return hashlib.sha256(ad.checkpoint_bytes(encoder_state_dict(encoder))).hexdigest()


def save_encoder(encoder, path, meta=None):
    """Write the weight checkpoint plus a '<path>.json' sidecar."""
    path = Path(path)
    ad.save_checkpoint(path, encoder_state_dict(encoder))
    activation = encoder.layer1.activation
    sidecar = {
        "backbone": "gcn",
        "in_dim": encoder.in_dim,
        "hidden_dim": encoder.hidden_dim,
        "out_dim": encoder.out_dim,
        "activation": activation,
    }
    if meta:
        sidecar.update(meta)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_encoder(path):
    """Load an encoder checkpoint; returns (Encoder frozen, sidecar dict)."""
    path = Path(path)
    state = ad.load_checkpoint(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    activation = meta["activation"]

    def build_layer(tag):
        slope = None
        if f"{tag}.prelu_slope" in state:
            slope = ad.parameter(state[f"{tag}.prelu_slope"], name=f"encoder.{tag}.prelu_slope")
        return GcnLayer(
            ad.parameter(state[f"{tag}.weight"], name=f"encoder.{tag}.weight"),
            ad.parameter(state[f"{tag}.bias"], name=f"encoder.{tag}.bias"),
            activation,
            slope,
        )

    enc = Encoder(build_layer("layer1"), build_layer("layer2"), frozen=True)
    return enc, meta
