"""Sequential classifier built from layer specs, with fused softmax cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU, Softmax

__all__ = [
    "LayerSpec",
    "ClassifierModel",
    "build_model",
    "build_paper_cnn",
    "build_mlp_baseline",
    "forward",
    "loss_and_gradients",
    "predict",
    "LOG_CLAMP",
]

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


@dataclass(eq=False)
class ClassifierModel:
    input_shape: tuple[int, ...]
    specs: list[LayerSpec]
    layers: list[Layer]
    rng_seed: int = 0
    # Adam state: first/second moments keyed like the gradients, plus step count
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    epochs_done: int = 0

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    @property
    def output_shape(self) -> tuple[int, ...]:
        shape = _internal_shape(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", arr

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_params())

    def param(self, key: str) -> np.ndarray:
        i, name = key.split(".", 1)
        return self.layers[int(i)].params[name]

    def summary(self) -> str:
        lines = []
        shape = _internal_shape(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            n = sum(a.size for a in layer.params.values())
            lines.append(f"{i:2d} {layer.kind:<10} -> {'x'.join(map(str, shape)):<14} params={n}")
        lines.append(f"total params: {self.param_count()}")
        return "\n".join(lines)


def _internal_shape(shape):
    # images arrive channels-first; layers run channels-last
    shape = tuple(shape)
    return (shape[1], shape[2], shape[0]) if len(shape) == 3 else shape


def _make_layer(spec: LayerSpec, in_shape):
    p = spec.params
    if spec.kind == "conv2d":
        return Conv2D(in_shape[-1], p["filters"], p.get("kernel_hw", (3, 3)), p.get("stride", 1),
                      p.get("padding", "same"))
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "batchnorm":
        return BatchNorm(in_shape[-1], p.get("momentum", 0.9), p.get("eps", 1e-5))
    if spec.kind == "maxpool":
        return MaxPool2D(p.get("window", 2), p.get("stride"))
    if spec.kind == "dropout":
        return Dropout(p.get("rate", 0.25))
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise ValueError(f"dense layer needs a flat input, got {in_shape}")
        return Dense(in_shape[0], p["units"])
    if spec.kind == "softmax":
        return Softmax()
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def build_model(input_shape, specs: list[LayerSpec], seed: int = 0) -> ClassifierModel:
    """Instantiate layers, chain-checking shapes, and draw He-uniform weights."""
    if not specs or specs[-1].kind != "softmax":
        raise ValueError("the last layer must be softmax")
    if any(s.kind == "softmax" for s in specs[:-1]):
        raise ValueError("softmax is only allowed as the terminal layer")
    rng = np.random.default_rng(seed)
    shape = _internal_shape(int(s) for s in input_shape)
    layers = []
    for i, spec in enumerate(specs):
        try:
            layer = _make_layer(spec, shape)
            shape = layer.output_shape(shape)
        except ValueError as exc:
            raise ValueError(f"layer {i} ({spec.kind}): {exc}") from exc
        if "W" in layer.params:
            w = layer.params["W"]
            fan_in = w[0].size if isinstance(layer, Conv2D) else w.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            layer.params["W"] = rng.uniform(-bound, bound, size=w.shape)
        layers.append(layer)
    if shape[0] < 2:
        raise ValueError("a softmax classifier needs at least 2 classes")
    for layer in layers:
        if hasattr(layer, "need_input_grad"):
            layer.need_input_grad = False
            break
    return ClassifierModel(tuple(int(s) for s in input_shape), list(specs), layers, seed)


def paper_cnn_specs(num_classes: int, hidden_units: int = 128, batchnorm: bool = True,
                    dropout: float = 0.25, filters=(32, 32, 64, 64, 128)) -> list[LayerSpec]:
    def conv(f):
        block = [LayerSpec("conv2d", {"filters": f, "kernel_hw": [3, 3], "stride": 1, "padding": "same"}),
                 LayerSpec("relu")]
        return block + ([LayerSpec("batchnorm")] if batchnorm else [])

    f1, f2, f3, f4, f5 = filters
    specs = conv(f1) + conv(f2) + [LayerSpec("maxpool", {"window": 2, "stride": 2})]
    specs += conv(f3) + conv(f4) + [LayerSpec("maxpool", {"window": 2, "stride": 2})]
    specs += conv(f5)
    specs += [LayerSpec("dropout", {"rate": dropout}), LayerSpec("flatten"),
              LayerSpec("dense", {"units": hidden_units}), LayerSpec("relu"),
              LayerSpec("dense", {"units": num_classes}), LayerSpec("softmax")]
    return specs


def build_paper_cnn(input_hw: int, channels: int, num_classes: int, seed: int = 0,
                    hidden_units: int = 128, batchnorm: bool = True, dropout: float = 0.25,
                    filters=(32, 32, 64, 64, 128)) -> ClassifierModel:
    """Five 3x3 same-padded conv blocks, pooling after the 2nd and 4th, then a dense head."""
    if input_hw < 8:
        raise ValueError(f"input {input_hw}x{input_hw} is too small for two 2x2 pooling stages (need >= 8)")
    if num_classes < 2:
        raise ValueError("a softmax classifier needs at least 2 classes")
    specs = paper_cnn_specs(num_classes, hidden_units, batchnorm, dropout, filters)
    return build_model((channels, input_hw, input_hw), specs, seed)


def build_mlp_baseline(input_len: int, hidden, num_classes: int, seed: int = 0) -> ClassifierModel:
    hidden = list(hidden)
    if not hidden:
        raise ValueError("the MLP baseline needs at least one hidden layer")
    if input_len < 1:
        raise ValueError("input_len must be >= 1")
    if num_classes < 2:
        raise ValueError("a softmax classifier needs at least 2 classes")
    specs = []
    for units in hidden:
        specs += [LayerSpec("dense", {"units": int(units)}), LayerSpec("relu")]
    specs += [LayerSpec("dense", {"units": num_classes}), LayerSpec("softmax")]
    return build_model((input_len,), specs, seed)


def _check_input(model: ClassifierModel, x: np.ndarray):
    if tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {model.input_shape}")


def _logits(model, x, training, rng):
    _check_input(model, x)
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 4:
        h = np.ascontiguousarray(h.transpose(0, 2, 3, 1))
    for layer in model.layers[:-1]:
        h = layer.forward(h, training=training, rng=rng)
    return h


def forward(model: ClassifierModel, x, training: bool = False, rng=None) -> np.ndarray:
    """Class probabilities, shape (batch, K)."""
    return model.layers[-1].forward(_logits(model, x, training, rng))


def loss_and_gradients(model: ClassifierModel, x, labels_onehot, training: bool = True, rng=None):
    """Mean categorical cross-entropy and per-parameter gradients keyed ``"{layer}.{name}"``."""
    loss, grads, _ = loss_gradients_probs(model, x, labels_onehot, training, rng)
    return loss, grads


def loss_gradients_probs(model, x, labels_onehot, training=True, rng=None):
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.shape[0] != np.shape(x)[0]:
        raise ValueError("batch sizes of inputs and labels differ")
    probs = model.layers[-1].forward(_logits(model, x, training, rng))
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} does not match outputs {probs.shape}")
    n = y.shape[0]
    loss = float(-np.sum(y * np.log(np.clip(probs, LOG_CLAMP, None))) / n)
    grad = (probs - y) / n
    grads = {}
    for i in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[i]
        grad = layer.backward(grad)
        for name, g in layer.grads.items():
            grads[f"{i}.{name}"] = g
    return loss, grads, probs


def predict(model: ClassifierModel, images, batch_size: int = 256):
    """Argmax labels (lowest index wins ties) and the probability matrix."""
    x = np.asarray(images, dtype=np.float64)
    _check_input(model, x)
    probs = [forward(model, x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
    p = np.concatenate(probs) if probs else np.zeros((0, model.num_classes))
    return p.argmax(axis=1), p
