"""Dense feed-forward networks with manual backpropagation.

Everything downstream (generators, discriminator heads, benchmark
classifiers) is built from the same three pieces: DenseNet for the
forward/backward passes, Adam for updates, and the two losses. All
randomness goes through an explicit numpy Generator so training runs
are reproducible bit for bit.
"""

import struct

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InternalError

RELU = "relu"
SIGMOID = "sigmoid"
IDENTITY = "identity"

_ACT_TAG = {IDENTITY: 0, RELU: 1, SIGMOID: 2}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}

CHECKPOINT_MAGIC = b"HZNN"
CHECKPOINT_VERSION = 1

BCE_EPS = 1e-7


class Layer:
    """One dense layer: weights (out, in), bias (out,), activation name."""

    __slots__ = ("W", "b", "act")

    def __init__(self, W, b, act):
        if act not in _ACT_TAG:
            raise ConfigError(f"unknown activation {act!r}")
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ConfigError(
                f"layer shapes inconsistent: W {self.W.shape}, b {self.b.shape}"
            )
        self.act = act


def _apply_act(z, act):
    if act == RELU:
        return np.maximum(z, 0.0)
    if act == SIGMOID:
        return expit(z)
    return z


def _act_grad(z, a, act):
    # Derivative of the activation, expressed from whichever of z/a is cheaper.
    if act == RELU:
        return (z > 0.0).astype(np.float64)
    if act == SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


class DenseNet:
    """A stack of dense layers with chained dimensions."""

    def __init__(self, layers):
        if not layers:
            raise ConfigError("DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ConfigError(
                    f"layer dims do not chain: {prev.W.shape} -> {nxt.W.shape}"
                )
        self.layers = list(layers)

    @property
    def input_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].W.shape[0]

    @classmethod
    def create(cls, dims, activations, rng):
        """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.

        dims is the full chain [in, h1, ..., out]; activations has one
        entry per layer (len(dims) - 1).
        """
        if len(activations) != len(dims) - 1:
            raise ConfigError(
                f"need {len(dims) - 1} activations for {len(dims)} dims, "
                f"got {len(activations)}"
            )
        layers = []
        for in_d, out_d, act in zip(dims, dims[1:], activations):
            lim = np.sqrt(6.0 / (in_d + out_d))
            W = rng.uniform(-lim, lim, size=(out_d, in_d))
            layers.append(Layer(W, np.zeros(out_d), act))
        return cls(layers)

    def forward(self, x):
        """Returns (output, cache). Cache holds per-layer (input, z, a)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigError(
                f"forward expects (b, {self.input_dim}), got {x.shape}"
            )
        cache = []
        a = x
        for layer in self.layers:
            inp = a
            z = inp @ layer.W.T + layer.b
            a = _apply_act(z, layer.act)
            cache.append((inp, z, a))
        return a, cache

    def backward(self, cache, grad_out):
        """Backprop grad_out (dL/d output) through the cached forward pass.

        Returns (param_grads, grad_input) where param_grads is a list of
        (dW, db) mirroring self.layers.
        """
        if len(cache) != len(self.layers):
            raise InternalError("cache does not match network depth")
        grads = [None] * len(self.layers)
        da = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            inp, z, a = cache[i]
            if da.shape != a.shape:
                raise InternalError(
                    f"stale cache: grad {da.shape} vs activation {a.shape}"
                )
            dz = da * _act_grad(z, a, layer.act)
            grads[i] = (dz.T @ inp, dz.sum(axis=0))
            da = dz @ layer.W
        return grads, da

    def copy(self):
        return DenseNet(
            [Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers]
        )

    def param_arrays(self):
        for layer in self.layers:
            yield layer.W
            yield layer.b


class Adam:
    """Adaptive-moment optimizer state for one DenseNet."""

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.param_arrays()]
        self.v = [np.zeros_like(p) for p in net.param_arrays()]

    def step(self, net, grads, scale=1.0):
        """One bias-corrected update. grads mirrors net.layers as (dW, db).

        scale multiplies the gradients first; scale=-1 turns the update
        into gradient ascent.
        """
        flat = []
        for dW, db in grads:
            flat.append(dW)
            flat.append(db)
        params = list(net.param_arrays())
        if len(flat) != len(params):
            raise InternalError("gradient list does not mirror parameters")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, flat, self.m, self.v):
            if g.shape != p.shape:
                raise InternalError(
                    f"gradient shape {g.shape} does not mirror parameter {p.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise InternalError("non-finite gradient in adam step")
            g = g * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise InternalError("non-finite parameter after adam step")


def mse(pred, target):
    """Mean squared error over all entries; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff)))
    return loss, 2.0 * diff / diff.size


def bce(prob, label):
    """Binary cross-entropy with probabilities clamped to [eps, 1-eps].

    Returns (loss, dloss/dprob); the gradient is evaluated at the clamped
    probabilities.
    """
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if prob.shape != label.shape:
        raise ConfigError(f"bce shapes differ: {prob.shape} vs {label.shape}")
    p = np.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(np.mean(-(label * np.log(p) + (1.0 - label) * np.log1p(-p))))
    grad = (p - label) / (p * (1.0 - p)) / p.size
    return loss, grad


def save_net(net, path):
    """Write the binary checkpoint: little-endian, layout documented in README."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(net.layers))
    for layer in net.layers:
        out_d, in_d = layer.W.shape
        buf += struct.pack("<IIB", in_d, out_d, _ACT_TAG[layer.act])
        buf += np.ascontiguousarray(layer.W, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(layer.b, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_net(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a network checkpoint (bad magic)")
    off = 4
    version, n_layers = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        in_d, out_d, tag = struct.unpack_from("<IIB", raw, off)
        off += 9
        if tag not in _TAG_ACT:
            raise ConfigError(f"{path}: unknown activation tag {tag}")
        n_w = in_d * out_d
        W = np.frombuffer(raw, dtype="<f8", count=n_w, offset=off).reshape(
            out_d, in_d
        )
        off += 8 * n_w
        b = np.frombuffer(raw, dtype="<f8", count=out_d, offset=off)
        off += 8 * out_d
        layers.append(Layer(W.copy(), b.copy(), _TAG_ACT[tag]))
    if off != len(raw):
        raise ConfigError(f"{path}: {len(raw) - off} trailing bytes")
    return DenseNet(layers)


class Batch:
    """Features with aligned private/utility label vectors."""

    __slots__ = ("features", "private", "utility")

    def __init__(self, features, private, utility):
        self.features = np.asarray(features, dtype=np.float64)
        self.private = np.asarray(private, dtype=np.float64)
        self.utility = np.asarray(utility, dtype=np.float64)
        b = self.features.shape[0]
        if b < 1:
            raise ConfigError("empty batch")
        if self.private.shape != (b,) or self.utility.shape != (b,):
            raise ConfigError(
                f"label shapes {self.private.shape}/{self.utility.shape} "
                f"do not match batch size {b}"
            )
