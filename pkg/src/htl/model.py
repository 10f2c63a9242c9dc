"""A small rectifier MLP whose output is projected onto the unit sphere.

Forward, backward and the SGD update are written out by hand; the network is
the stand-in for a convolutional backbone, so nothing here depends on an
autodiff framework.

Checkpoint layout (all integers unsigned 32-bit little-endian, all reals
IEEE-754 float64 little-endian)::

    bytes 0..3    magic b"HTLC"
    uint32        format version (CHECKPOINT_VERSION)
    uint32        number of entries in layer_dims (K)
    uint32 * K    layer_dims
    per layer l = 0..K-2, in order:
        float64 * (dims[l+1] * dims[l])   weight matrix, row-major (out, in)
        float64 * dims[l+1]               bias vector

Nothing follows the last bias; trailing or missing bytes are load errors.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from htl.embedding import EPSILON_NORM, DegenerateActivationError

CHECKPOINT_MAGIC = b"HTLC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class MlpEmbedder:
    layer_dims: list
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output size")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and one bias per layer required")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[l + 1], self.layer_dims[l])
            if W.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {l}: got W{W.shape}, b{b.shape}, expected W{expected}")

    @classmethod
    def initialize(cls, layer_dims, seed=0):
        """He-normal weights (variance 2/fan_in) and zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Parameter arrays in checkpoint order (W0, b0, W1, b1, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self):
        return MlpEmbedder(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
        )

    def embed(self, X):
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    raw_output: np.ndarray = None
    output_norms: np.ndarray = None
    layer_dims: tuple = ()


@dataclass
class ParamGradients:
    weights: list
    biases: list

    def arrays(self):
        out = []
        for gW, gb in zip(self.weights, self.biases):
            out.extend((gW, gb))
        return out


def forward(model, batch):
    """Embed a batch of feature vectors; returns ``(embeddings, cache)``."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"input dimension {X.shape[1]} does not match model input {model.input_dim}")
    cache = ForwardCache(inputs=X, layer_dims=tuple(model.layer_dims))
    h = X
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        cache.pre_activations.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        cache.activations.append(h)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms < EPSILON_NORM):
        raise DegenerateActivationError("network produced a zero vector before normalization")
    cache.raw_output = h
    cache.output_norms = norms
    return h / norms, cache


def backward(model, cache, grad_embeddings):
    """Gradients of a scalar loss w.r.t. every weight and bias.

    ``grad_embeddings`` holds dLoss/d(embedding) for each batch row.
    """
    if tuple(model.layer_dims) != cache.layer_dims:
        raise ValueError("forward cache was produced by a model with different layer_dims")
    G = np.asarray(grad_embeddings, dtype=np.float64)
    if G.shape != cache.raw_output.shape:
        raise ValueError(f"gradient shape {G.shape} does not match output {cache.raw_output.shape}")

    # d(x/|x|)/dx applied to G: drop the radial component, scale by 1/|x|.
    y = cache.raw_output / cache.output_norms
    delta = (G - y * np.sum(y * G, axis=1, keepdims=True)) / cache.output_norms

    n_layers = len(model.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        if l < n_layers - 1:
            delta = delta * (cache.pre_activations[l] > 0.0)
        h_in = cache.inputs if l == 0 else cache.activations[l - 1]
        gW[l] = delta.T @ h_in
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l]
    return ParamGradients(gW, gb)


def sgd_step(model, grads, lr):
    """In-place ``p <- p - lr * grad`` for every parameter; returns ``model``."""
    if not lr >= 0:
        raise ValueError("learning rate must be non-negative")
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; training diverged")
    for W, b, gW, gb in zip(model.weights, model.biases, grads.weights, grads.biases):
        W -= lr * gW
        b -= lr * gb
    return model


def save_checkpoint(model, path):
    dims = model.layer_dims
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for arr in model.parameters():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, k = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    if k < 2 or len(data) < offset + 4 * k:
        raise CheckpointError(f"{path}: truncated header")
    dims = list(struct.unpack_from(f"<{k}I", data, offset))
    offset += 4 * k
    expected = offset + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(data, dtype="<f8", count=fan_out * fan_in, offset=offset)
        offset += 8 * fan_out * fan_in
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(W.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpEmbedder(dims, weights, biases)
