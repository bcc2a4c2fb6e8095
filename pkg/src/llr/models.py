"""Desk-scale smooth classifiers and their loss functions.

Every activation is softplus, so the loss is smooth in both the input and the
parameters.  Dense layers flatten whatever they receive, which lets a dense
head sit directly on a convolutional feature map.
"""

from dataclasses import dataclass, field

import numpy as np

from llr import autodiff as ad
from llr.errors import ConfigError, ContractError, ShapeError

LOSS_KINDS = ("cross_entropy", "squared_error")


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Softplus:
    pass


_LAYER_TYPES = {
    "dense": (Dense, {"in": "in_features", "out": "out_features"}),
    "conv2d": (
        Conv2d,
        {"in_channels": "in_channels", "out_channels": "out_channels", "kernel": "kernel",
         "stride": "stride", "padding": "padding"},
    ),
    "global_avg_pool": (GlobalAvgPool, {}),
    "softplus": (Softplus, {}),
}
_TYPE_NAMES = {cls: name for name, (cls, _) in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 1:
            raise ContractError("num_classes must be positive")
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError("ModelSpec", shapes[-1], (self.num_classes,), detail="final layer must emit one logit per class")

    def shapes(self):
        """Per-example activation shape before the first layer and after each layer."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if int(np.prod(shape)) != layer.in_features:
                    raise ShapeError(f"layer {i} (dense)", shape, (layer.in_features,))
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"layer {i} (conv2d)", shape, (layer.in_channels, "H", "W"))
                if layer.stride not in (1, 2):
                    raise ContractError(f"layer {i}: conv2d stride must be 1 or 2")
                h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i} (conv2d)", shape, (layer.kernel, layer.kernel))
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, GlobalAvgPool):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (global_avg_pool)", shape, ("C", "H", "W"))
                shape = (shape[0],)
            elif not isinstance(layer, Softplus):
                raise ContractError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    def param_shapes(self):
        shapes = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"{i}.weight"] = (layer.in_features, layer.out_features)
                shapes[f"{i}.bias"] = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                shapes[f"{i}.bias"] = (layer.out_channels,)
        return shapes

    def to_dict(self):
        layers = []
        for layer in self.layers:
            name = _TYPE_NAMES[type(layer)]
            keys = _LAYER_TYPES[name][1]
            layers.append({"type": name, **{k: getattr(layer, attr) for k, attr in keys.items()}})
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, {"input_shape", "num_classes", "layers"}, "model")
        layers = []
        for i, item in enumerate(d["layers"]):
            item = dict(item)
            kind = item.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise ConfigError(f"model.layers[{i}]: unknown layer type {kind!r}")
            layer_cls, keys = _LAYER_TYPES[kind]
            _reject_unknown(item, set(keys), f"model.layers[{i}]")
            layers.append(layer_cls(**{keys[k]: int(v) for k, v in item.items()}))
        return cls(tuple(d["input_shape"]), tuple(layers), int(d["num_classes"]))


def _reject_unknown(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


@dataclass
class ParamSet:
    tensors: dict
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def validate(self, spec):
        expected = spec.param_shapes()
        if set(expected) != set(self.tensors):
            raise ContractError(f"parameter names {sorted(self.tensors)} do not match spec slots {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(f"param {name}", self.tensors[name].shape, shape)
        return self

    def leaves(self):
        """Fresh graph leaves for every tensor, in name order."""
        return {name: ad.leaf(self.tensors[name], name=name) for name in sorted(self.tensors)}

    def copy(self):
        return ParamSet({k: np.array(v) for k, v in self.tensors.items()}, self.seed, self.epoch, dict(self.meta))


def init_params(spec, seed):
    """Fan-in scaled uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(tensors, seed=seed)


def _param_nodes(params):
    if isinstance(params, ParamSet):
        return {k: ad.as_node(v) for k, v in params.tensors.items()}
    return {k: ad.as_node(v) for k, v in params.items()}


def logits(spec, params, x):
    """f(x; theta) for one example (shape ``input_shape``) or a batch of them."""
    x = ad.as_node(x)
    theta = _param_nodes(params)
    single = x.shape == spec.input_shape
    if single:
        x = ad.reshape(x, (1,) + spec.input_shape)
    elif x.shape[1:] != spec.input_shape:
        raise ShapeError("logits", x.shape, spec.input_shape, detail="input does not match the model")
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if h.ndim != 2:
                h = ad.reshape(h, (h.shape[0], -1))
            h = h @ theta[f"{i}.weight"] + theta[f"{i}.bias"]
        elif isinstance(layer, Conv2d):
            b = ad.reshape(theta[f"{i}.bias"], (layer.out_channels, 1, 1))
            h = ad.conv2d(h, theta[f"{i}.weight"], layer.stride, layer.padding) + b
        elif isinstance(layer, GlobalAvgPool):
            h = ad.sum_(h, axis=(2, 3)) * (1.0 / (h.shape[2] * h.shape[3]))
        else:
            h = ad.softplus(h)
    return ad.reshape(h, (spec.num_classes,)) if single else h


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_one_hot(y):
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(np.sum(y, axis=-1) == 1.0)
    if not ok:
        raise ContractError("cross_entropy: targets must be one-hot rows")


def cross_entropy(z, y):
    """-y^T log softmax(z), per example, through logsumexp."""
    z = ad.as_node(z)
    y = np.asarray(y.value if isinstance(y, ad.Node) else y, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError("cross_entropy", z.shape, y.shape)
    _check_one_hot(y)
    return ad.logsumexp(z, axis=-1) - ad.sum_(z * y, axis=-1)


def squared_error(out, y):
    """0.5 * ||y - out||^2, per example."""
    out = ad.as_node(out)
    y = ad.as_node(y)
    if y.shape != out.shape:
        raise ShapeError("squared_error", out.shape, y.shape)
    r = y - out
    return 0.5 * ad.sum_(r * r, axis=-1)


def loss(spec, params, x, y, kind="cross_entropy"):
    """Per-example loss of the model output at ``x`` against one-hot ``y``."""
    z = logits(spec, params, x)
    if kind == "cross_entropy":
        return cross_entropy(z, y)
    if kind == "squared_error":
        return squared_error(z, y)
    raise ContractError(f"unsupported loss kind {kind!r}; expected one of {LOSS_KINDS}")


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def predict(spec, params, x):
    with ad.no_record():
        return np.argmax(logits(spec, params, x).value, axis=-1)


def evaluate_logits(spec, params, x, batch_size=512):
    """Plain forward pass over a (possibly large) batch, no graph kept."""
    x = np.asarray(x, dtype=np.float64)
    with ad.no_record():
        if x.shape == spec.input_shape:
            return logits(spec, params, x).value
        return np.concatenate(
            [logits(spec, params, x[i : i + batch_size]).value for i in range(0, len(x), batch_size)]
        )


# ------------------------------------------------------------ reference zoo


def mlp(in_dim, hidden=(256, 256), num_classes=10, input_shape=None):
    layers = []
    prev = in_dim
    for h in hidden:
        layers += [Dense(prev, h), Softplus()]
        prev = h
    layers.append(Dense(prev, num_classes))
    return ModelSpec(tuple(input_shape) if input_shape else (in_dim,), tuple(layers), num_classes)


def small_cnn(num_classes=10, in_channels=3, size=32, channels=(16, 32), hidden=64, pool=False):
    """Two stride-2 conv blocks followed by a dense (or pooled) head."""
    c1, c2 = channels
    layers = [
        Conv2d(in_channels, c1, 3, 2, 1),
        Softplus(),
        Conv2d(c1, c2, 3, 2, 1),
        Softplus(),
    ]
    s = ((size + 1) // 2 + 1) // 2
    if pool:
        layers += [GlobalAvgPool(), Dense(c2, num_classes)]
    else:
        layers += [Dense(c2 * s * s, hidden), Softplus(), Dense(hidden, num_classes)]
    return ModelSpec((in_channels, size, size), tuple(layers), num_classes)


def linear(in_dim, num_classes):
    return ModelSpec((in_dim,), (Dense(in_dim, num_classes),), num_classes)
