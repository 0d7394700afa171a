"""A small sequential CNN with float32 parameter storage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..filters import FilterBank
from ..rng import make_rng
from . import layers as L


@dataclass
class Conv2D:
    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    groups: int = 1
    # set on layers produced by splitting: "basis" / "combine" plus the original layer name
    role: str = ""
    source: str = ""

    kind = "conv"

    @property
    def bank(self) -> FilterBank:
        return FilterBank.from_array(self.weight, self.groups)

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def out_shape(self, shape):
        c, h, w = shape
        n, cg, kh, kw = self.weight.shape
        if c != cg * self.groups:
            raise ValueError(f"{self.name}: expects {cg * self.groups} input channels, got {c}")
        oh = L.conv_output_size(h, kh, self.stride, self.pad)
        ow = L.conv_output_size(w, kw, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ValueError(f"{self.name}: input {shape} too small")
        return (n, oh, ow)

    def describe(self):
        d = {"type": "conv", "name": self.name, "filters": int(self.weight.shape[0]),
             "channels": int(self.weight.shape[1]), "kernel": list(self.weight.shape[2:]),
             "stride": self.stride, "pad": self.pad, "groups": self.groups,
             "bias": self.bias is not None}
        if self.role:
            d["role"] = self.role
            d["source"] = self.source
        return d


@dataclass
class ReLU:
    name: str
    kind = "relu"

    def params(self):
        return {}

    def out_shape(self, shape):
        return shape

    def describe(self):
        return {"type": "relu", "name": self.name}


@dataclass
class MaxPool:
    name: str
    k: int = 2
    stride: int = 2
    kind = "maxpool"

    def params(self):
        return {}

    def out_shape(self, shape):
        c, h, w = shape
        oh = L.conv_output_size(h, self.k, self.stride, 0)
        ow = L.conv_output_size(w, self.k, self.stride, 0)
        if oh < 1 or ow < 1:
            raise ValueError(f"{self.name}: input {shape} too small for pooling")
        return (c, oh, ow)

    def describe(self):
        return {"type": "maxpool", "name": self.name, "k": self.k, "stride": self.stride}


@dataclass
class Dense:
    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind = "dense"

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def out_shape(self, shape):
        n_in = int(np.prod(shape))
        if n_in != self.weight.shape[1]:
            raise ValueError(f"{self.name}: expects {self.weight.shape[1]} inputs, got {n_in}")
        return (int(self.weight.shape[0]),)

    def describe(self):
        return {"type": "dense", "name": self.name, "out": int(self.weight.shape[0]),
                "in": int(self.weight.shape[1]), "bias": self.bias is not None}


class DivergenceError(RuntimeError):
    pass


@dataclass
class MicroNet:
    layers: list
    input_shape: tuple
    num_classes: int
    rng_seed: int = 0
    preset: str = "custom"
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"network output {shape} does not match {self.num_classes} classes")
        self._caches = None

    # parameters -----------------------------------------------------------
    def named_params(self) -> dict:
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def set_param(self, key: str, value: np.ndarray):
        lname, pname = key.rsplit(".", 1)
        layer = self.layer(lname)
        old = getattr(layer, pname)
        if old.shape != value.shape:
            raise ValueError(f"{key}: shape {value.shape} != {old.shape}")
        setattr(layer, pname, np.asarray(value, dtype=np.float32))

    def layer(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def conv_layers(self) -> list[Conv2D]:
        return [layer for layer in self.layers if layer.kind == "conv"]

    def conv_out_hw(self) -> dict:
        out = {}
        for layer, shape in zip(self.layers, self.shapes[1:]):
            if layer.kind == "conv":
                out[layer.name] = (shape[1], shape[2])
        return out

    def check_finite(self):
        for key, arr in self.named_params().items():
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(f"parameter {key} became non-finite")

    # computation ------------------------------------------------------------
    def forward(self, x, keep_cache: bool = False) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            if layer.kind == "conv":
                h, c = L.conv2d_forward(h, layer.weight, layer.bias, layer.stride, layer.pad,
                                        layer.groups)
            elif layer.kind == "relu":
                h, c = L.relu_forward(h)
            elif layer.kind == "maxpool":
                h, c = L.maxpool_forward(h, layer.k, layer.stride)
            else:
                h, c = L.dense_forward(h, layer.weight, layer.bias)
            caches.append(c)
        self._caches = caches if keep_cache else None
        return h

    def backward(self, grad_logits) -> dict:
        if self._caches is None:
            raise L.MissingCacheError("backward needs forward(..., keep_cache=True)")
        grads = {}
        g = grad_logits
        for layer, cache in zip(reversed(self.layers), reversed(self._caches)):
            if layer.kind == "conv":
                g, dw, db = L.conv2d_backward(g, cache)
            elif layer.kind == "relu":
                g = L.relu_backward(g, cache)
                continue
            elif layer.kind == "maxpool":
                g = L.maxpool_backward(g, cache)
                continue
            else:
                g, dw, db = L.dense_backward(g, cache)
            grads[f"{layer.name}.weight"] = dw
            if layer.bias is not None:
                grads[f"{layer.name}.bias"] = db
        self._caches = None
        return grads

    def loss_and_grads(self, x, y):
        logits = self.forward(x, keep_cache=True)
        loss, g = L.softmax_cross_entropy(logits, y)
        return loss, self.backward(g)

    def evaluate(self, x, y, batch_size: int = 256) -> tuple[float, float]:
        """Mean loss and accuracy (percent) over a dataset."""
        total_loss = 0.0
        correct = 0
        n = len(y)
        for start in range(0, n, batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits = self.forward(xb)
            loss, _ = L.softmax_cross_entropy(logits, yb)
            total_loss += loss * len(yb)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        return total_loss / n, 100.0 * correct / n

    def describe(self) -> dict:
        return {"preset": self.preset, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "rng_seed": self.rng_seed,
                "layers": [layer.describe() for layer in self.layers]}

    def copy(self) -> "MicroNet":
        return from_description(self.describe(), {k: v.copy() for k, v in self.named_params().items()})


def from_description(desc: dict, params: dict) -> MicroNet:
    layers = []
    for d in desc["layers"]:
        t, name = d["type"], d["name"]
        if t == "conv":
            w = np.asarray(params[f"{name}.weight"], dtype=np.float32)
            b = np.asarray(params[f"{name}.bias"], dtype=np.float32) if d.get("bias") else None
            layers.append(Conv2D(name, w, b, d.get("stride", 1), d.get("pad", 0),
                                 d.get("groups", 1), d.get("role", ""), d.get("source", "")))
        elif t == "relu":
            layers.append(ReLU(name))
        elif t == "maxpool":
            layers.append(MaxPool(name, d["k"], d["stride"]))
        elif t == "dense":
            w = np.asarray(params[f"{name}.weight"], dtype=np.float32)
            b = np.asarray(params[f"{name}.bias"], dtype=np.float32) if d.get("bias") else None
            layers.append(Dense(name, w, b))
        else:
            raise ValueError(f"unknown layer type {t!r}")
    return MicroNet(layers, tuple(desc["input_shape"]), desc["num_classes"],
                    desc.get("rng_seed", 0), desc.get("preset", "custom"))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


PRESETS = ("tiny-convnet",)


def build_preset(preset: str, input_shape, num_classes: int, seed: int,
                 widths: tuple[int, int] = (8, 16)) -> MicroNet:
    """Build a named architecture with fan-in scaled uniform weights and zero biases."""
    if preset != "tiny-convnet":
        raise ValueError(f"unknown architecture preset {preset!r}; known: {PRESETS}")
    c, h, w = input_shape
    n1, n2 = widths
    rng1 = make_rng(seed, "init", 0)
    rng2 = make_rng(seed, "init", 1)
    rng3 = make_rng(seed, "init", 2)
    conv1 = Conv2D("conv1", _uniform(rng1, (n1, c, 3, 3), c * 9), np.zeros(n1, np.float32), 1, 1)
    conv2 = Conv2D("conv2", _uniform(rng2, (n2, n1, 3, 3), n1 * 9), np.zeros(n2, np.float32), 1, 1)
    flat = n2 * (h // 4) * (w // 4)
    fc = Dense("fc", _uniform(rng3, (num_classes, flat), flat), np.zeros(num_classes, np.float32))
    return MicroNet([conv1, ReLU("relu1"), MaxPool("pool1", 2, 2), conv2, ReLU("relu2"),
                     MaxPool("pool2", 2, 2), fc], (c, h, w), num_classes, seed, preset)
