"""Small numpy network core with explicit per-layer backprop.

Layers are plain dataclasses describing shapes; the trainable tensors live in
``Network.params`` as one ``{"W": ..., "b": ...}`` dict per dense/conv layer.
Dense weights are stored ``(n_in, n_out)`` and conv filters ``(F, C, k, k)``;
activations are NCHW.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, InputError

CHECKPOINT_MAGIC = b"ADMMNET1"


# ---------------------------------------------------------------------------
# convolution / pooling kernels
# ---------------------------------------------------------------------------


def _conv_out(n, k, stride):
    return (n - k) // stride + 1


def _im2col(x, k, stride):
    # (B, C, H, W) -> (B, Ho, Wo, C, k, k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_forward(filters, x, stride=1, bias=None):
    """Valid-padding 2-D convolution (cross-correlation).

    Returns ``(out, cols)``; ``cols`` is the im2col matrix reused by
    :func:`conv2d_backward`.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    F_, C, k, k2 = filters.shape
    if k != k2:
        raise ConfigError("only square filters are supported")
    B, Cx, H, W = x.shape
    if Cx != C:
        raise ConfigError(f"input has {Cx} channels, filters expect {C}")
    if k > H or k > W:
        raise ConfigError(f"filter {k}x{k} larger than input {H}x{W}")
    Ho, Wo = _conv_out(H, k, stride), _conv_out(W, k, stride)
    cols = np.ascontiguousarray(_im2col(x, k, stride)).reshape(B * Ho * Wo, C * k * k)
    out = cols @ filters.reshape(F_, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(B, Ho, Wo, F_).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(dout, filters, x_shape, cols, stride=1):
    """Gradients of :func:`conv2d_forward` w.r.t. input, filters and bias."""
    F_, C, k, _ = filters.shape
    B, _, H, W = x_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F_)
    dfilters = (dflat.T @ cols).reshape(filters.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ filters.reshape(F_, -1)).reshape(B, Ho, Wo, C, k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx, dfilters, dbias


def maxpool_forward(x, size, stride):
    B, C, H, W = x.shape
    if size > H or size > W:
        raise ConfigError(f"pool window {size} larger than input {H}x{W}")
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], size * size)
    # np.argmax returns the first maximum: ties go to the lowest row-major index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(dout, arg, x_shape, size, stride):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    Ho, Wo = dout.shape[2], dout.shape[3]
    for i in range(size):
        for j in range(size):
            hit = arg == i * size + j
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dout * hit
    return dx


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    kind = "dense"
    trainable = True

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ConfigError(f"dense layer expects ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def param_shapes(self):
        return (self.n_in, self.n_out), (self.n_out,)

    def fan_in(self):
        return self.n_in

    def forward(self, x, p):
        return x @ p["W"] + p["b"], x

    def backward(self, dout, cache, p):
        x = cache
        return dout @ p["W"].T, {"W": x.T @ dout, "b": dout.sum(axis=0)}

    def hyper(self):
        return (self.n_in, self.n_out)


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    kind = "conv2d"
    trainable = True

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ConfigError(f"conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        _, H, W = in_shape
        if self.kernel > H or self.kernel > W:
            raise ConfigError(f"filter {self.kernel}x{self.kernel} larger than input {H}x{W}")
        return (
            self.out_channels,
            _conv_out(H, self.kernel, self.stride),
            _conv_out(W, self.kernel, self.stride),
        )

    def param_shapes(self):
        k = self.kernel
        return (self.out_channels, self.in_channels, k, k), (self.out_channels,)

    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel

    def forward(self, x, p):
        out, cols = conv2d_forward(p["W"], x, self.stride, p["b"])
        return out, (x.shape, cols)

    def backward(self, dout, cache, p):
        x_shape, cols = cache
        dx, dW, db = conv2d_backward(dout, p["W"], x_shape, cols, self.stride)
        return dx, {"W": dW, "b": db}

    def hyper(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride)


@dataclass(frozen=True)
class MaxPool2D:
    size: int = 2
    stride: int = 2

    kind = "maxpool"
    trainable = False

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"maxpool expects (C, H, W), got {tuple(in_shape)}")
        C, H, W = in_shape
        if self.size > H or self.size > W:
            raise ConfigError(f"pool window {self.size} larger than input {H}x{W}")
        return (C, _conv_out(H, self.size, self.stride), _conv_out(W, self.size, self.stride))

    def forward(self, x, p):
        out, arg = maxpool_forward(x, self.size, self.stride)
        return out, (x.shape, arg)

    def backward(self, dout, cache, p):
        x_shape, arg = cache
        return maxpool_backward(dout, arg, x_shape, self.size, self.stride), None

    def hyper(self):
        return (self.size, self.stride)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"
    trainable = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, p):
        active = x > 0
        return x * active, active

    def backward(self, dout, cache, p):
        return dout * cache, None

    def hyper(self):
        return ()


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"
    trainable = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, p):
        return dout.reshape(cache), None

    def hyper(self):
        return ()


LAYER_TAGS = {"dense": 1, "conv2d": 2, "maxpool": 3, "relu": 4, "flatten": 5}
_TAG_TO_CLS = {1: Dense, 2: Conv2D, 3: MaxPool2D, 4: ReLU, 5: Flatten}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """An ordered stack of layers plus their parameters.

    ``params[i]`` belongs to the i-th *trainable* layer; ``weights`` is the
    list of W tensors in that order, which is what the ADMM engine constrains.
    """

    def __init__(self, layers, input_shape, seed=0, dtype=np.float32, init=True):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ConfigError(f"network output must be a vector per sample, got {shape}")
        self.n_classes = shape[0]
        self.params = []
        rng = np.random.default_rng(seed)
        for layer in self.trainable_layers:
            w_shape, b_shape = layer.param_shapes()
            if init:
                # He-uniform for ReLU stacks
                limit = np.sqrt(6.0 / layer.fan_in())
                W = rng.uniform(-limit, limit, size=w_shape).astype(self.dtype)
            else:
                W = np.zeros(w_shape, dtype=self.dtype)
            self.params.append({"W": W, "b": np.zeros(b_shape, dtype=self.dtype)})

    @property
    def trainable_layers(self):
        return [layer for layer in self.layers if layer.trainable]

    @property
    def weights(self):
        return [p["W"] for p in self.params]

    def copy(self):
        other = Network(self.layers, self.input_shape, dtype=self.dtype, init=False)
        other.params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return other

    def astype(self, dtype):
        other = Network(self.layers, self.input_shape, dtype=dtype, init=False)
        other.params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return other

    def num_weights(self):
        return sum(p["W"].size for p in self.params)

    def __repr__(self):
        kinds = "-".join(layer.kind for layer in self.layers)
        return f"Network({kinds}, input={self.input_shape}, weights={self.num_weights()})"


def mlp(sizes, seed=0, dtype=np.float32):
    """Fully connected ReLU network, e.g. ``mlp([784, 300, 100, 10])``."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers, (sizes[0],), seed=seed, dtype=dtype)


def lenet5(seed=0, dtype=np.float32):
    """The 430.5K-weight LeNet-5 variant (20-50 conv filters, 500 hidden units)."""
    layers = [
        Conv2D(1, 20, 5),
        ReLU(),
        MaxPool2D(2, 2),
        Conv2D(20, 50, 5),
        ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
        Dense(800, 500),
        ReLU(),
        Dense(500, 10),
    ]
    return Network(layers, (1, 28, 28), seed=seed, dtype=dtype)


def _as_batch(net, batch):
    x = np.asarray(batch)
    if x.ndim == 0:
        raise ConfigError("batch must have a leading batch dimension")
    per_sample = int(np.prod(net.input_shape))
    if x.shape[1:] != net.input_shape:
        if int(np.prod(x.shape[1:])) != per_sample:
            raise ConfigError(f"batch shape {x.shape} does not match input shape {net.input_shape}")
        x = x.reshape((x.shape[0],) + net.input_shape)
    return x.astype(net.dtype, copy=False)


def forward(net, batch):
    """Run the network; returns ``(logits, caches)``."""
    x = _as_batch(net, batch)
    caches = []
    it = iter(net.params)
    for layer in net.layers:
        p = next(it) if layer.trainable else None
        x, cache = layer.forward(x, p)
        caches.append(cache)
    return x, caches


def backward(net, dlogits, caches):
    """Backpropagate ``dlogits``; returns one ``{"W", "b"}`` gradient dict per trainable layer."""
    grads = []
    d = dlogits
    pi = len(net.params)
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        p = None
        if layer.trainable:
            pi -= 1
            p = net.params[pi]
        d, g = layer.backward(d, cache, p)
        if g is not None:
            grads.append(g)
    grads.reverse()
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = ez / s
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def loss_and_grads(net, batch, labels):
    logits, caches = forward(net, batch)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, backward(net, dlogits.astype(net.dtype, copy=False), caches)


def predict(net, images, batch_size=1000):
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(net, images[i : i + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net, images, labels, batch_size=1000):
    if len(labels) == 0:
        return 0.0
    return float((predict(net, images, batch_size) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def _write_array(f, a):
    f.write(struct.pack("<B", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def _read_array(f):
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(shape)


def write_checkpoint(net, f: BinaryIO):
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<I", len(net.layers)))
    f.write(struct.pack("<B", len(net.input_shape)))
    f.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    it = iter(net.params)
    for layer in net.layers:
        hyper = layer.hyper()
        f.write(struct.pack("<BB", LAYER_TAGS[layer.kind], len(hyper)))
        f.write(struct.pack(f"<{len(hyper)}I", *hyper))
        if layer.trainable:
            p = next(it)
            _write_array(f, p["W"])
            _write_array(f, p["b"])


def read_checkpoint(f: BinaryIO):
    if _read_exact(f, 8) != CHECKPOINT_MAGIC:
        raise FormatError("not a network checkpoint (bad magic)")
    (n_layers,) = struct.unpack("<I", _read_exact(f, 4))
    (nd,) = struct.unpack("<B", _read_exact(f, 1))
    input_shape = struct.unpack(f"<{nd}I", _read_exact(f, 4 * nd))
    layers, params = [], []
    for _ in range(n_layers):
        tag, nh = struct.unpack("<BB", _read_exact(f, 2))
        if tag not in _TAG_TO_CLS:
            raise FormatError(f"unknown layer tag {tag}")
        hyper = struct.unpack(f"<{nh}I", _read_exact(f, 4 * nh))
        layer = _TAG_TO_CLS[tag](*hyper)
        layers.append(layer)
        if layer.trainable:
            params.append({"W": _read_array(f), "b": _read_array(f)})
    net = Network(layers, input_shape, init=False)
    for p, (w_shape, b_shape) in zip(params, (l.param_shapes() for l in net.trainable_layers)):
        if p["W"].shape != w_shape or p["b"].shape != b_shape:
            raise FormatError("checkpoint parameter shapes disagree with layer specs")
    net.params = params
    return net


def save_checkpoint(net, path):
    with open(path, "wb") as f:
        write_checkpoint(net, f)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return read_checkpoint(f)


def checkpoint_bytes(net):
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    return buf.getvalue()
