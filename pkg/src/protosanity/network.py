"""Small fully convolutional feature extractor with exact backward passes.

Layers work on batches shaped ``(N, C, H, W)`` in float64. A :class:`Network`
normalises raw ``[0, 1]`` images per channel, then runs its layers in order.
:func:`forward` returns the feature maps together with an
:class:`ActivationTrace` that the backward passes and relevance propagation
consume.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError, UnsupportedOperationError

# ProtoPNet's preprocessing constants.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _sliding(x, k, s):
    """Strided ``k x k`` windows of a batch: ``(N, C, Ho, Wo, k, k)`` view."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]


class Layer:
    kind = None
    # (kernel, stride, padding) for receptive-field arithmetic
    rf_params = None

    def forward(self, x):
        """Return ``(output, cache)`` for a batch ``x``."""
        raise NotImplementedError

    def backward(self, grad, cache):
        """Return ``(grad_input, param_grads)``."""
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def params(self):
        return {}

    def config(self):
        return {"kind": self.kind}


class Conv2d(Layer):
    """2-D cross-correlation with square kernels and zero padding.

    Parameters
    ----------
    weight : ndarray of shape (out_channels, in_channels, k, k)
    bias : ndarray of shape (out_channels,) or None
    stride, padding : int
    """

    kind = "conv2d"

    def __init__(self, weight, bias=None, stride=1, padding=0):
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise InvalidArgumentError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise InvalidArgumentError("conv weights must be finite")
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.bias is not None and self.bias.shape[0] != self.weight.shape[0]:
            raise InvalidArgumentError("bias length must equal the number of output channels")
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def rf_params(self):
        return self.kernel_size, self.stride, self.padding

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise InvalidArgumentError(f"conv expects {self.in_channels} channels, got {c}")
        k, s, p = self.rf_params
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"input {shape} too small for kernel {k}")
        return self.out_channels, ho, wo

    def forward(self, x):
        k, s, p = self.rf_params
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = _sliding(xp, k, s)
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ self.weight.reshape(self.out_channels, -1).T
        if self.bias is not None:
            out += self.bias
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, grad, cache, need_params=True):
        cols, in_shape = cache
        grad_flat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        grads = {}
        if need_params:
            grads["weight"] = (grad_flat.T @ cols).reshape(self.weight.shape)
            if self.bias is not None:
                grads["bias"] = grad_flat.sum(axis=0)
        return self.transpose_apply(grad, in_shape), grads

    def transpose_apply(self, grad, in_shape):
        """Adjoint of the bias-free convolution applied to ``grad``."""
        k, s, p = self.rf_params
        n, c, h, w = in_shape
        ho, wo = grad.shape[2:]
        grad_flat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dcols = (grad_flat @ self.weight.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def config(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias is not None,
        }


class ReLU(Layer):
    kind = "relu"
    rf_params = (1, 1, 0)

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, grad, cache, need_params=True):
        return grad * cache, {}


class MaxPool2d(Layer):
    """Max pooling; the gradient goes to the first maximal entry of each window."""

    kind = "maxpool2d"

    def __init__(self, size=2, stride=None):
        self.size = int(size)
        self.stride = int(stride if stride is not None else size)

    @property
    def rf_params(self):
        return self.size, self.stride, 0

    def output_shape(self, shape):
        c, h, w = shape
        k, s = self.size, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"input {shape} too small for pooling {k}")
        return c, ho, wo

    def forward(self, x):
        k, s = self.size, self.stride
        win = _sliding(x, k, s)
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, grad, cache, need_params=True):
        arg, in_shape = cache
        k, s = self.size, self.stride
        ho, wo = grad.shape[2:]
        dx = np.zeros(in_shape)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(arg == idx, grad, 0.0)
        return dx, {}

    def config(self):
        return {"kind": self.kind, "size": self.size, "stride": self.stride}


class AddBias(Layer):
    kind = "add-bias"
    rf_params = (1, 1, 0)

    def __init__(self, bias):
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)

    def output_shape(self, shape):
        if shape[0] != self.bias.shape[0]:
            raise InvalidArgumentError("bias length must equal the channel count")
        return shape

    def forward(self, x):
        return x + self.bias[None, :, None, None], None

    def backward(self, grad, cache, need_params=True):
        grads = {"bias": grad.sum(axis=(0, 2, 3))} if need_params else {}
        return grad, grads

    def params(self):
        return {"bias": self.bias}

    def config(self):
        return {"kind": self.kind, "channels": int(self.bias.shape[0])}


class Network:
    """Normalisation followed by an ordered list of layers.

    Parameters
    ----------
    layers : list of Layer
    input_shape : tuple of int
        Raw image shape ``(C, H, W)``.
    mean, std : sequence of float
        Per-channel normalisation applied to raw images before layer 0.
    """

    def __init__(self, layers, input_shape=(3, 32, 32), mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        c = self.input_shape[0]
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise InvalidArgumentError("mean and std need one entry per input channel")
        if np.any(self.std <= 0):
            raise InvalidArgumentError("std entries must be strictly positive")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_dims = shape

    def normalize(self, x):
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def copy(self):
        return copy.deepcopy(self)

    def config(self):
        return {
            "input_shape": list(self.input_shape),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "layers": [layer.config() for layer in self.layers],
        }

    def parameters(self):
        """``(layer_index, name, array)`` for every trainable array, in a fixed order."""
        return [(i, name, arr) for i, layer in enumerate(self.layers) for name, arr in layer.params().items()]

    @classmethod
    def from_config(cls, config, arrays=None):
        """Rebuild a network; ``arrays`` maps ``(layer_index, name)`` to weights."""
        arrays = arrays or {}
        layers = []
        for i, spec in enumerate(config["layers"]):
            kind = spec["kind"]
            if kind == "conv2d":
                k = spec["kernel_size"]
                w = arrays.get((i, "weight"), np.zeros((spec["out_channels"], spec["in_channels"], k, k)))
                b = arrays.get((i, "bias"), np.zeros(spec["out_channels"])) if spec["bias"] else None
                layers.append(Conv2d(w, b, spec["stride"], spec["padding"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool2d":
                layers.append(MaxPool2d(spec["size"], spec["stride"]))
            elif kind == "add-bias":
                layers.append(AddBias(arrays.get((i, "bias"), np.zeros(spec["channels"]))))
            else:
                raise UnsupportedOperationError(f"unknown layer kind {kind!r}")
        return cls(layers, config["input_shape"], config["mean"], config["std"])


@dataclass
class ActivationTrace:
    """Everything cached by :func:`forward`.

    ``inputs[i]`` is the input of layer ``i`` (``inputs[0]`` is the normalised
    image) and ``outputs[i]`` its output.
    """

    network: Network
    raw: np.ndarray
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    batched: bool = False

    @property
    def features(self):
        return self.outputs[-1] if self.outputs else self.inputs[0]


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise InvalidArgumentError(f"expected image shape {net.input_shape}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("image contains non-finite values")
    return x, batched


def forward(net: Network, x):
    """Run ``net`` on one raw image ``(C, H, W)`` or a batch ``(N, C, H, W)``.

    Returns
    -------
    features : ndarray of shape (D, H, W) or (N, D, H, W)
    trace : ActivationTrace
    """
    xb, batched = _as_batch(net, x)
    trace = ActivationTrace(network=net, raw=xb, batched=batched)
    a = net.normalize(xb)
    for layer in net.layers:
        trace.inputs.append(a)
        a, cache = layer.forward(a)
        trace.caches.append(cache)
        trace.outputs.append(a)
    if not trace.outputs:
        trace.inputs.append(a)
    feats = trace.features
    return (feats if batched else feats[0]), trace


def _check_trace(net, trace, seed_grad):
    if trace.network is not net or len(trace.caches) != len(net.layers):
        raise InvalidStateError("activation trace was not produced by this network")
    seed = np.asarray(seed_grad, dtype=np.float64)
    feats = trace.features
    if not trace.batched:
        seed = seed[None]
    if seed.shape != feats.shape:
        raise InvalidArgumentError(f"seed gradient shape {seed.shape[1:]} does not match features {feats.shape[1:]}")
    return seed


def backward(net: Network, trace: ActivationTrace, seed_grad, need_params=True):
    """Reverse pass for ``<features, seed_grad>``.

    Returns the gradient with respect to the raw image (normalisation included)
    and a list with one dict of parameter gradients per layer.
    """
    grad = _check_trace(net, trace, seed_grad)
    param_grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grad, pg = net.layers[i].backward(grad, trace.caches[i], need_params)
        param_grads[i] = pg
    grad = grad / net.std[None, :, None, None]
    return (grad if trace.batched else grad[0]), param_grads


def input_gradient(net: Network, trace: ActivationTrace, seed_grad):
    """Gradient of ``<features, seed_grad>`` with respect to the raw image."""
    return backward(net, trace, seed_grad, need_params=False)[0]


def parameter_gradients(net: Network, trace: ActivationTrace, seed_grad):
    """Per-layer dicts of weight and bias gradients of ``<features, seed_grad>``."""
    return backward(net, trace, seed_grad, need_params=True)[1]


@dataclass(frozen=True)
class ReceptiveField:
    """Analytic receptive field of every output location.

    ``centers[h, w]`` is the ``(row, col)`` centre in input pixels and
    ``boxes[h, w]`` the inclusive ``(top, left, bottom, right)`` region clipped
    to the image; ``extents`` are the clipped box heights and widths.
    """

    size: int
    stride: int
    start: float
    centers: np.ndarray
    boxes: np.ndarray
    extents: np.ndarray

    def box(self, h, w):
        return tuple(int(v) for v in self.boxes[h, w])

    def area_fraction(self, h, w, image_hw):
        eh, ew = self.extents[h, w]
        return float(eh * ew) / (image_hw[0] * image_hw[1])


def receptive_field_params(layers):
    """Run the usual ``(size, jump, start)`` recurrence over ``layers``."""
    size, jump, start = 1, 1, 0.0
    for layer in layers:
        if layer.rf_params is None:
            raise UnsupportedOperationError(f"no receptive-field rule for layer kind {layer.kind!r}")
        k, s, p = layer.rf_params
        size += (k - 1) * jump
        start += ((k - 1) / 2 - p) * jump
        jump *= s
    return size, jump, start


def analytic_receptive_field(net: Network) -> ReceptiveField:
    size, jump, start = receptive_field_params(net.layers)
    _, h_in, w_in = net.input_shape
    _, h_out, w_out = net.output_dims
    rows = start + jump * np.arange(h_out)
    cols = start + jump * np.arange(w_out)
    centers = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    half = (size - 1) / 2
    top = np.clip(np.ceil(centers[..., 0] - half), 0, h_in - 1)
    left = np.clip(np.ceil(centers[..., 1] - half), 0, w_in - 1)
    bottom = np.clip(np.floor(centers[..., 0] + half), 0, h_in - 1)
    right = np.clip(np.floor(centers[..., 1] + half), 0, w_in - 1)
    boxes = np.stack([top, left, bottom, right], axis=-1).astype(np.int64)
    extents = np.stack([boxes[..., 2] - boxes[..., 0] + 1, boxes[..., 3] - boxes[..., 1] + 1], axis=-1)
    return ReceptiveField(size=size, stride=jump, start=start, centers=centers, boxes=boxes, extents=extents)


def build_network(
    channels=(16, 32, 32),
    input_shape=(3, 32, 32),
    kernel_size=3,
    pool=True,
    bias=True,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    rng=None,
    final_relu=True,
    feature_scale=1.0,
):
    """Stack of conv-ReLU(-maxpool) blocks with He-initialised weights.

    The default is the desk-scale backbone: three 3x3 conv-ReLU blocks, each
    followed by a 2x2 max pool, turning 3x32x32 images into 32x4x4 features.
    ``feature_scale`` multiplies the last block's initial weights; exponential
    similarities need latent distances of order one to produce gradients.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    c_in = input_shape[0]
    for i, c_out in enumerate(channels):
        fan_in = c_in * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel_size, kernel_size))
        if i == len(channels) - 1:
            w *= feature_scale
        layers.append(Conv2d(w, np.zeros(c_out) if bias else None, 1, kernel_size // 2))
        if final_relu or i < len(channels) - 1:
            layers.append(ReLU())
        if pool:
            layers.append(MaxPool2d(2, 2))
        c_in = c_out
    return Network(layers, input_shape, mean, std)
