"""Minimal numpy neural-network engine.

A :class:`Model` is an ordered list of layers ending in a softmax.  All
arithmetic is float64.  Gradients are exact reverse-mode derivatives,
computed layer by layer by :meth:`Pass.backward`; there is no general
autodiff graph.

Layer outputs are indexed from 1: ``trace[0]`` is the input and
``trace[l]`` is the post-activation output of layer ``l``.  A *neuron*
``(l, i)`` is scalar ``i`` of the flattened output of layer ``l``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import jsonio
from .jsonio import FormatError

__all__ = [
    "Dense",
    "Conv2D",
    "ReLU",
    "Flatten",
    "MaxPool2D",
    "Softmax",
    "Model",
    "ForwardTrace",
    "Pass",
    "CrossEntropy",
    "NeuronOutput",
    "OutputComponent",
    "InputShapeError",
    "forward",
    "forward_trace",
    "predict_label",
    "grad_input",
    "grad_params",
    "run",
    "log_softmax",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "model_hash",
    "layer_hash",
    "lenet_small",
]


class InputShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = ""
    param_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, g: np.ndarray, cache, need_params: bool):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def init_params(self, rng: np.random.Generator) -> None:
        pass


class Dense(Layer):
    """Fully connected layer, ``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, n_in: int, n_out: int, W=None, b=None):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params["W"] = (np.zeros((self.n_out, self.n_in)) if W is None
                            else np.asarray(W, dtype=np.float64).reshape(self.n_out, self.n_in))
        self.params["b"] = (np.zeros(self.n_out) if b is None
                            else np.asarray(b, dtype=np.float64).reshape(self.n_out))

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ValueError(f"dense expects input ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, g, cache, need_params):
        grads = {}
        if need_params:
            grads = {"W": g.T @ cache, "b": g.sum(axis=0)}
        return g @ self.params["W"], grads

    def config(self):
        return {"in": self.n_in, "out": self.n_out}

    def init_params(self, rng):
        bound = np.sqrt(6.0 / self.n_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(self.n_out, self.n_in))
        self.params["b"] = np.zeros(self.n_out)


class Conv2D(Layer):
    """Valid (unpadded) 2-D convolution over (C, H, W) inputs."""

    kind = "conv2d"
    param_names = ("W", "b")

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, W=None, b=None):
        super().__init__()
        self.cin, self.cout = int(in_channels), int(out_channels)
        self.k, self.stride = int(kernel), int(stride)
        if self.k < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        shape = (self.cout, self.cin, self.k, self.k)
        self.params["W"] = np.zeros(shape) if W is None else np.asarray(W, dtype=np.float64).reshape(shape)
        self.params["b"] = np.zeros(self.cout) if b is None else np.asarray(b, dtype=np.float64).reshape(self.cout)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise ValueError(f"conv2d expects ({self.cin}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        if h < self.k or w < self.k:
            raise ValueError("conv2d kernel larger than input")
        return (self.cout, (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1)

    def forward(self, x):
        s = self.stride
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))[:, :, ::s, ::s]
        y = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, win)

    def backward(self, g, cache, need_params):
        x_shape, win = cache
        s, k = self.stride, self.k
        grads = {}
        if need_params:
            grads = {"W": np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])), "b": g.sum(axis=(0, 2, 3))}
        gcol = np.tensordot(g, self.params["W"], axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        ho, wo = g.shape[2], g.shape[3]
        gx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, grads

    def config(self):
        return {"in_channels": self.cin, "out_channels": self.cout, "kernel": self.k, "stride": self.stride}

    def init_params(self, rng):
        fan_in = self.cin * self.k * self.k
        bound = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(self.cout, self.cin, self.k, self.k))
        self.params["b"] = np.zeros(self.cout)


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, g, cache, need_params):
        return g * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache, need_params):
        return g.reshape(cache), {}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool2d"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = int(size)
        if self.size < 1:
            raise ValueError("pool size must be positive")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"maxpool2d expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ValueError("pool window larger than input")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        p = self.size
        n, c, h, w = x.shape
        ho, wo = h // p, w // p
        blocks = x[:, :, :ho * p, :wo * p].reshape(n, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, p * p)
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, g, cache, need_params):
        (n, c, h, w), arg = cache
        p = self.size
        ho, wo = g.shape[2], g.shape[3]
        blocks = np.zeros((n, c, ho, wo, p * p))
        np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :ho * p, :wo * p] = blocks
        return gx, {}

    def config(self):
        return {"size": self.size}


class Softmax(Layer):
    kind = "softmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError("softmax expects a flat input")
        return tuple(in_shape)

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, g, cache, need_params):
        y = cache
        return y * (g - (g * y).sum(axis=1, keepdims=True)), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, MaxPool2D, Softmax)}


# --------------------------------------------------------------------------
# model


class Model:
    """Ordered layer list with a final softmax over ``class_count`` classes."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], metadata: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.metadata: dict[str, str] = dict(metadata or {})
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("model must end with a softmax layer")
        if any(isinstance(layer, Softmax) for layer in self.layers[:-1]):
            raise ValueError("softmax may only appear as the final layer")
        shapes = [self.input_shape]
        for n, layer in enumerate(self.layers, start=1):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except ValueError as exc:
                raise ValueError(f"layer {n} ({layer.kind}): {exc}") from None
        self.shapes = shapes
        self.class_count = shapes[-1][0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def final_param_layer(self) -> int:
        """1-based index of the last layer that carries parameters."""
        idx = [n for n, layer in enumerate(self.layers, start=1) if layer.param_names]
        if not idx:
            raise ValueError("model has no parameterized layer")
        return idx[-1]

    def hidden_layers(self) -> list[int]:
        """Layers whose outputs do not depend on the final parameterized layer."""
        return list(range(1, self.final_param_layer))

    def default_layer(self) -> int:
        """Layer used for white-box testing when none is named.

        The first hidden dense layer: its neurons see the whole input, so none
        is stuck at a constant output the way convolution neurons over an
        always-blank image border are.  Models without a hidden dense layer
        fall back to the first relu, then to the first hidden layer.
        """
        hidden = self.hidden_layers()
        if not hidden:
            raise ValueError("model has no hidden layer")
        for kind in (Dense, ReLU):
            for n in hidden:
                if isinstance(self.layers[n - 1], kind):
                    return n
        return hidden[0]

    def neuron_count(self, layer: int) -> int:
        self._check_layer(layer)
        return int(np.prod(self.shapes[layer]))

    def _check_layer(self, layer: int) -> None:
        if not (1 <= layer <= self.depth):
            raise IndexError(f"layer {layer} out of range 1..{self.depth}")

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_params(rng)

    def __repr__(self):
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"Model(input={self.input_shape}, classes={self.class_count}, layers=[{kinds}])"


@dataclass
class ForwardTrace:
    """Per-layer outputs; ``outputs[0]`` is the input, ``outputs[-1]`` the probabilities."""

    outputs: list[np.ndarray]

    def __len__(self):
        return len(self.outputs)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.outputs[layer]


@dataclass
class CrossEntropy:
    label: int | np.ndarray


@dataclass
class NeuronOutput:
    layer: int
    index: int | np.ndarray


@dataclass
class OutputComponent:
    index: int | np.ndarray


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] == model.input_shape and x.ndim == len(model.input_shape) + 1:
        return x, False
    raise InputShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")


@dataclass
class Pass:
    """A batched forward pass that keeps what the backward sweep needs."""

    model: Model
    outputs: list[np.ndarray]
    caches: list = field(repr=False)

    @property
    def probs(self) -> np.ndarray:
        return self.outputs[self.model.depth]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[self.model.depth - 1]

    def backward(self, inject: dict[int, np.ndarray], need_params: bool = True, need_input: bool = False):
        """Propagate output gradients injected at one or more layers down to the input.

        ``inject[l]`` is d(objective)/d(output of layer l), batched.  Returns
        ``(grad_input, param_grads)`` where ``param_grads[l-1]`` is a dict
        keyed like ``layer.params`` (empty for parameter-free layers).
        """
        top = max(inject)
        if top == 0:
            return (inject[0] if need_input else None), [{} for _ in self.model.layers]
        if top > len(self.caches):
            raise IndexError(f"layer {top} was not evaluated in this pass")
        layers = self.model.layers
        param_grads: list[dict] = [{} for _ in layers]
        lowest = 1
        if not need_input:
            with_params = [n for n in range(1, top + 1) if layers[n - 1].param_names]
            lowest = with_params[0] if (with_params and need_params) else top + 1
        g = None
        for n in range(top, lowest - 1, -1):
            if n in inject:
                g = inject[n] if g is None else g + inject[n]
            if g is None:
                continue
            g, grads = layers[n - 1].backward(g, self.caches[n - 1], need_params)
            param_grads[n - 1] = grads
        return (g if need_input and lowest == 1 else None), param_grads


def run(model: Model, x, upto: int | None = None) -> Pass:
    """Batched forward pass through layers ``1..upto`` (default: all)."""
    xb, _ = _as_batch(model, x)
    upto = model.depth if upto is None else upto
    model._check_layer(upto)
    outputs = [xb]
    caches = []
    h = xb
    for layer in model.layers[:upto]:
        h, cache = layer.forward(h)
        outputs.append(h)
        caches.append(cache)
    return Pass(model, outputs, caches)


def forward(model: Model, x) -> np.ndarray:
    """Class-probability vector(s) for an input or a batch of inputs."""
    xb, single = _as_batch(model, x)
    p = run(model, xb).probs
    return p[0] if single else p


def forward_trace(model: Model, x) -> ForwardTrace:
    xb, single = _as_batch(model, x)
    outs = run(model, xb).outputs
    return ForwardTrace([o[0] for o in outs] if single else outs)


def predict_label(model: Model, x, batch_size: int = 1024):
    """argmax of the output; exact ties go to the lowest class index."""
    xb, single = _as_batch(model, x)
    labels = np.concatenate([run(model, xb[i:i + batch_size]).probs.argmax(axis=1)
                             for i in range(0, max(len(xb), 1), batch_size)]) if len(xb) else np.zeros(0, int)
    return int(labels[0]) if single else labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _per_sample(value, n: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.int64), (n,))
    return arr


def grad_input(model: Model, x, objective) -> np.ndarray:
    """Gradient of a scalar objective with respect to the input.

    For a batch, objective indices may be per-sample arrays and the result
    holds each sample's own gradient.
    """
    xb, single = _as_batch(model, x)
    n = len(xb)
    L = model.depth
    C = model.class_count
    if isinstance(objective, CrossEntropy):
        labels = _per_sample(objective.label, n, "label")
        if np.any((labels < 0) | (labels >= C)):
            raise IndexError("label out of range")
        ps = run(model, xb)
        g = ps.probs.copy()
        g[np.arange(n), labels] -= 1.0
        inject = {L - 1: g}
    elif isinstance(objective, OutputComponent):
        idx = _per_sample(objective.index, n, "index")
        if np.any((idx < 0) | (idx >= C)):
            raise IndexError("output component out of range")
        ps = run(model, xb)
        g = np.zeros_like(ps.probs)
        g[np.arange(n), idx] = 1.0
        inject = {L: g}
    elif isinstance(objective, NeuronOutput):
        layer = int(objective.layer)
        model._check_layer(layer)
        idx = _per_sample(objective.index, n, "index")
        size = model.neuron_count(layer)
        if np.any((idx < 0) | (idx >= size)):
            raise IndexError(f"neuron index out of range 0..{size - 1}")
        ps = run(model, xb, upto=layer)
        g = np.zeros((n, size))
        g[np.arange(n), idx] = 1.0
        inject = {layer: g.reshape(ps.outputs[layer].shape)}
    else:
        raise TypeError(f"unknown objective {objective!r}")
    gx, _ = ps.backward(inject, need_params=False, need_input=True)
    return gx[0] if single else gx


def grad_params(model: Model, inputs, labels) -> list[dict[str, np.ndarray]]:
    """Gradients of the mean cross-entropy over a batch, one dict per layer."""
    xb = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if xb.shape == model.input_shape:
        xb = xb[None]
    if len(xb) == 0:
        raise ValueError("empty batch")
    if len(xb) != len(labels):
        raise ValueError("inputs and labels differ in length")
    if np.any((labels < 0) | (labels >= model.class_count)):
        raise IndexError("label out of range")
    ps = run(model, xb)
    g = ps.probs.copy()
    g[np.arange(len(xb)), labels] -= 1.0
    _, grads = ps.backward({model.depth - 1: g / len(xb)})
    return grads


# --------------------------------------------------------------------------
# construction helpers


def lenet_small(input_shape=(1, 20, 20), class_count: int = 10, channels: int = 8,
                hidden: int = 16, kernel: int = 3, pool: int = 2) -> Model:
    """conv -> relu -> maxpool -> flatten -> dense -> relu -> dense -> softmax (zero weights)."""
    c, h, w = input_shape
    ho, wo = (h - kernel + 1) // pool, (w - kernel + 1) // pool
    layers = [
        Conv2D(c, channels, kernel),
        ReLU(),
        MaxPool2D(pool),
        Flatten(),
        Dense(channels * ho * wo, hidden),
        ReLU(),
        Dense(hidden, class_count),
        Softmax(),
    ]
    return Model(layers, input_shape)


# --------------------------------------------------------------------------
# serialization


def _layer_dict(layer: Layer) -> dict:
    d = {"kind": layer.kind}
    d.update(layer.config())
    if layer.param_names:
        d["weights"] = {name: layer.params[name].reshape(-1) for name in layer.param_names}
    return d


def model_to_dict(model: Model) -> dict:
    return {
        "format_version": jsonio.FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [_layer_dict(layer) for layer in model.layers],
        "metadata": {str(k): str(v) for k, v in model.metadata.items()},
    }


def _field(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"{where}: missing field '{key}'")
    return d[key]


def _int_field(d, key, where) -> int:
    v = _field(d, key, where)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise FormatError(f"{where}.{key}: expected positive integer, got {v!r}")
    return v


def _layer_from_dict(d: dict, where: str) -> Layer:
    kind = _field(d, "kind", where)
    if kind not in LAYER_KINDS:
        raise FormatError(f"{where}.kind: unknown layer kind {kind!r}")
    if kind == "dense":
        layer = Dense(_int_field(d, "in", where), _int_field(d, "out", where))
    elif kind == "conv2d":
        layer = Conv2D(_int_field(d, "in_channels", where), _int_field(d, "out_channels", where),
                       _int_field(d, "kernel", where), _int_field(d, "stride", where))
    elif kind == "maxpool2d":
        layer = MaxPool2D(_int_field(d, "size", where))
    else:
        layer = LAYER_KINDS[kind]()
    if layer.param_names:
        weights = _field(d, "weights", where)
        for name in layer.param_names:
            values = _field(weights, name, f"{where}.weights")
            expected = layer.params[name]
            if not isinstance(values, list) or len(values) != expected.size:
                got = len(values) if isinstance(values, list) else type(values).__name__
                raise FormatError(f"{where}.weights.{name}: expected {expected.size} values, got {got}")
            arr = np.asarray(values, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{where}.weights.{name}: non-finite value")
            layer.params[name] = arr.reshape(expected.shape)
    return layer


def model_from_dict(d: dict) -> Model:
    version = _field(d, "format_version", "model")
    if version != jsonio.FORMAT_VERSION:
        raise FormatError(f"model.format_version: unsupported version {version!r}")
    shape = _field(d, "input_shape", "model")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise FormatError(f"model.input_shape: invalid {shape!r}")
    raw_layers = _field(d, "layers", "model")
    if not isinstance(raw_layers, list):
        raise FormatError("model.layers: expected a list")
    layers = [_layer_from_dict(ld, f"model.layers[{n}]") for n, ld in enumerate(raw_layers)]
    try:
        model = Model(layers, shape, d.get("metadata") or {})
    except ValueError as exc:
        raise FormatError(f"model.layers: {exc}") from None
    if _field(d, "class_count", "model") != model.class_count:
        raise FormatError(f"model.class_count: {d['class_count']!r} does not match output width {model.class_count}")
    return model


def save_model(model: Model, path) -> str:
    return jsonio.write(path, model_to_dict(model))


def load_model(path) -> Model:
    return model_from_dict(jsonio.read(path))


def model_hash(model: Model) -> str:
    """sha256 over architecture and weights (metadata excluded)."""
    d = model_to_dict(model)
    d.pop("metadata")
    return jsonio.digest(d)


def layer_hash(layer: Layer) -> str:
    return jsonio.digest(_layer_dict(layer))
