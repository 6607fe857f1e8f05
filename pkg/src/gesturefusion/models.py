"""Network descriptions and their functional evaluation.

A :class:`NetworkSpec` is a flat, ordered list of :class:`LayerSpec` entries.
Each layer reads and writes a named *stream* (``"depth"``, ``"skeleton"`` or
``"head"``); a ``concat`` layer joins several streams into ``"head"``. Shapes
are per sample and channels-last, with a leading time axis for sequence
streams. Parameters are a flat ``{"layer.tensor": torch.Tensor}`` map and
evaluation is purely functional, so autograd gives gradients for training.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .preprocess import DEFAULT_IMAGE_SIZE, DEFAULT_TIMESTEP

Parameters = dict[str, torch.Tensor]

NETWORK_NAMES = ("depth_cnn", "depth_cnn_lstm", "skeleton_lstm", "fl_concat")
CONV_FILTERS = (32, 64, 128)
PROJECTION_WIDTH = 512
DEPTH_LSTM_WIDTH = 256
SKELETON_LSTM_WIDTH = 512
FC_WIDTH = 256
SKELETON_INPUT = 44
PARAMETRIC = ("conv3x3", "project_fc", "fc", "lstm")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    stream: str
    width: int = 0
    activation: str = "none"
    in_shape: tuple = ()
    out_shape: tuple = ()
    sources: tuple[str, ...] = ()


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    inputs: tuple[tuple[str, tuple[int, ...]], ...]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    timestep: int
    scale: float = 1.0
    image_size: int = DEFAULT_IMAGE_SIZE

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def final_layer(self) -> LayerSpec:
        return [l for l in self.layers if l.kind in PARAMETRIC][-1]

    @property
    def is_sequence(self) -> bool:
        return self.name != "depth_cnn"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": [[k, list(v)] for k, v in self.inputs],
            "layers": [
                {"kind": l.kind, "name": l.name, "width": l.width, "activation": l.activation,
                 "out_shape": list(l.out_shape)}
                for l in self.layers
            ],
            "n_classes": self.n_classes,
            "timestep": self.timestep,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- building


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def _layer_out_shape(kind: str, width: int, shape: tuple) -> tuple:
    if kind == "conv3x3":
        return shape[:-1] + (width,)
    if kind == "maxpool2x2":
        h, w, c = shape[-3:]
        if h < 2 or w < 2:
            raise ShapeError(f"cannot pool {h}x{w} feature map")
        return shape[:-3] + (h // 2, w // 2, c)
    if kind == "flatten":
        return shape[:-3] + (math.prod(shape[-3:]),)
    if kind in ("project_fc", "fc"):
        return shape[:-1] + (width,)
    if kind == "lstm":
        return shape[:-1] + (width,)
    if kind == "last_step":
        return shape[1:]
    if kind == "softmax":
        return shape
    raise ValueError(f"unknown layer kind {kind!r}")


def chain(stream: str, in_shape: tuple, items, prefix: str = "") -> list[LayerSpec]:
    """Build layers from ``(kind, name, width, activation)`` items, threading shapes."""
    layers = []
    shape = tuple(in_shape)
    for kind, name, width, activation in items:
        out = _layer_out_shape(kind, width, shape)
        layers.append(LayerSpec(kind, prefix + name, stream, width, activation, shape, out))
        shape = out
    return layers


def concat_layer(branches: list[list[LayerSpec]], name: str = "concat") -> LayerSpec:
    shapes = tuple(b[-1].out_shape for b in branches)
    if any(len(s) != 1 for s in shapes):
        raise ShapeError(f"concat needs flat branch outputs, got {shapes}")
    return LayerSpec("concat", name, "head", 0, "none", shapes, (sum(s[0] for s in shapes),),
                     tuple(b[-1].stream for b in branches))


def _conv_items(scale: float):
    f1, f2, f3 = (_scaled(f, scale) for f in CONV_FILTERS)
    return [
        ("conv3x3", "conv1", f1, "relu"), ("conv3x3", "conv2", f1, "relu"), ("maxpool2x2", "pool1", 0, "none"),
        ("conv3x3", "conv3", f2, "relu"), ("conv3x3", "conv4", f2, "relu"), ("maxpool2x2", "pool2", 0, "none"),
        ("conv3x3", "conv5", f3, "relu"), ("conv3x3", "conv6", f3, "relu"), ("maxpool2x2", "pool3", 0, "none"),
        ("flatten", "flatten", 0, "none"),
    ]


def _head_items(n_fc: int, n_classes: int, scale: float):
    items = [("fc", f"fc{i + 1}", _scaled(FC_WIDTH, scale), "relu") for i in range(n_fc - 1)]
    items.append(("fc", f"fc{n_fc}", n_classes, "none"))
    items.append(("softmax", "softmax", 0, "softmax"))
    return items


def _check_classes(n_classes: int) -> None:
    if n_classes not in (14, 28):
        raise ValueError(f"n_classes must be 14 or 28, got {n_classes}")


def check_shapes(spec: NetworkSpec) -> None:
    """Static check that every layer's input shape is its stream's current shape."""
    current = {name: tuple(shape) for name, shape in spec.inputs}
    for layer in spec.layers:
        if layer.kind == "concat":
            got = tuple(current.get(s) for s in layer.sources)
            if got != tuple(layer.in_shape):
                raise ShapeError(f"layer {layer.name}: expects {layer.in_shape}, streams give {got}")
        elif current.get(layer.stream) != tuple(layer.in_shape):
            raise ShapeError(
                f"layer {layer.name}: expects {layer.in_shape}, stream {layer.stream!r} gives {current.get(layer.stream)}"
            )
        if _layer_out_shape_safe(layer) != tuple(layer.out_shape):
            raise ShapeError(f"layer {layer.name}: declared output {layer.out_shape} inconsistent")
        current[layer.stream] = tuple(layer.out_shape)
    if spec.final_layer.width != spec.n_classes:
        raise ShapeError(f"final layer width {spec.final_layer.width} != n_classes {spec.n_classes}")


def _layer_out_shape_safe(layer: LayerSpec) -> tuple:
    if layer.kind == "concat":
        return (sum(s[0] for s in layer.in_shape),)
    return _layer_out_shape(layer.kind, layer.width, tuple(layer.in_shape))


def _finish(name, inputs, layers, n_classes, timestep, scale, image_size) -> NetworkSpec:
    spec = NetworkSpec(name, tuple(inputs), tuple(layers), n_classes, timestep, scale, image_size)
    check_shapes(spec)
    return spec


def build_depth_cnn(n_classes: int = 14, scale: float = 1.0, image_size: int = DEFAULT_IMAGE_SIZE,
                    timestep: int = DEFAULT_TIMESTEP) -> NetworkSpec:
    """Per-frame depth CNN used for pretraining the convolutional trunk."""
    _check_classes(n_classes)
    shape = (image_size, image_size, 1)
    layers = chain("depth", shape, _conv_items(scale) + _head_items(3, n_classes, scale))
    return _finish("depth_cnn", [("depth", shape)], layers, n_classes, timestep, scale, image_size)


def _depth_trunk(timestep: int, image_size: int, scale: float, prefix: str = "") -> list[LayerSpec]:
    items = _conv_items(scale) + [
        ("project_fc", "proj", _scaled(PROJECTION_WIDTH, scale), "relu"),
        ("lstm", "lstm1", _scaled(DEPTH_LSTM_WIDTH, scale), "none"),
        ("lstm", "lstm2", _scaled(DEPTH_LSTM_WIDTH, scale), "none"),
        ("last_step", "last", 0, "none"),
    ]
    return chain("depth", (timestep, image_size, image_size, 1), items, prefix)


def _skeleton_trunk(timestep: int, scale: float, prefix: str = "") -> list[LayerSpec]:
    items = [
        ("lstm", "lstm1", _scaled(SKELETON_LSTM_WIDTH, scale), "none"),
        ("lstm", "lstm2", _scaled(SKELETON_LSTM_WIDTH, scale), "none"),
        ("last_step", "last", 0, "none"),
    ]
    return chain("skeleton", (timestep, SKELETON_INPUT), items, prefix)


def build_depth_cnn_lstm(n_classes: int = 14, timestep: int = DEFAULT_TIMESTEP, scale: float = 1.0,
                         image_size: int = DEFAULT_IMAGE_SIZE) -> NetworkSpec:
    _check_classes(n_classes)
    trunk = _depth_trunk(timestep, image_size, scale)
    head = chain("depth", trunk[-1].out_shape, _head_items(3, n_classes, scale))
    return _finish("depth_cnn_lstm", [("depth", trunk[0].in_shape)], trunk + head,
                   n_classes, timestep, scale, image_size)


def build_skeleton_lstm(n_classes: int = 14, timestep: int = DEFAULT_TIMESTEP, scale: float = 1.0) -> NetworkSpec:
    _check_classes(n_classes)
    trunk = _skeleton_trunk(timestep, scale)
    head = chain("skeleton", trunk[-1].out_shape, _head_items(4, n_classes, scale))
    return _finish("skeleton_lstm", [("skeleton", trunk[0].in_shape)], trunk + head,
                   n_classes, timestep, scale, DEFAULT_IMAGE_SIZE)


def build_fl_concat(depth_spec: NetworkSpec, skeleton_spec: NetworkSpec, n_classes: int | None = None) -> NetworkSpec:
    """Feature-level fusion: both recurrent trunks, concatenated, then an FC head."""
    if depth_spec.timestep != skeleton_spec.timestep:
        raise ShapeError(f"timestep mismatch: depth {depth_spec.timestep} vs skeleton {skeleton_spec.timestep}")
    n_classes = n_classes or depth_spec.n_classes
    _check_classes(n_classes)
    if skeleton_spec.n_classes != depth_spec.n_classes:
        raise ShapeError("branch specs disagree on n_classes")
    t, scale = depth_spec.timestep, depth_spec.scale
    a = _depth_trunk(t, depth_spec.image_size, scale, prefix="depth/")
    b = _skeleton_trunk(t, skeleton_spec.scale, prefix="skeleton/")
    cat = concat_layer([a, b])
    head = chain("head", cat.out_shape, _head_items(3, n_classes, scale))
    inputs = [("depth", a[0].in_shape), ("skeleton", b[0].in_shape)]
    return _finish("fl_concat", inputs, a + b + [cat] + head, n_classes, t, scale, depth_spec.image_size)


def build_network(name: str, n_classes: int = 14, timestep: int = DEFAULT_TIMESTEP, scale: float = 1.0,
                  image_size: int = DEFAULT_IMAGE_SIZE) -> NetworkSpec:
    if name == "depth_cnn":
        return build_depth_cnn(n_classes, scale, image_size, timestep)
    if name == "depth_cnn_lstm":
        return build_depth_cnn_lstm(n_classes, timestep, scale, image_size)
    if name == "skeleton_lstm":
        return build_skeleton_lstm(n_classes, timestep, scale)
    if name == "fl_concat":
        return build_fl_concat(
            build_depth_cnn_lstm(n_classes, timestep, scale, image_size),
            build_skeleton_lstm(n_classes, timestep, scale),
        )
    raise ValueError(f"unknown network {name!r}; expected one of {NETWORK_NAMES}")


# ---------------------------------------------------------------- parameters


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in spec.layers:
        if layer.kind == "conv3x3":
            c = layer.in_shape[-1]
            shapes[f"{layer.name}.weight"] = (layer.width, c, 3, 3)
            shapes[f"{layer.name}.bias"] = (layer.width,)
        elif layer.kind in ("fc", "project_fc"):
            shapes[f"{layer.name}.weight"] = (layer.width, layer.in_shape[-1])
            shapes[f"{layer.name}.bias"] = (layer.width,)
        elif layer.kind == "lstm":
            h = layer.width
            shapes[f"{layer.name}.w_ih"] = (4 * h, layer.in_shape[-1])
            shapes[f"{layer.name}.w_hh"] = (4 * h, h)
            shapes[f"{layer.name}.bias"] = (4 * h,)
    return shapes


def init_layer(layer: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform initialisation; LSTM forget-gate bias starts at 1."""
    out = {}
    if layer.kind == "conv3x3":
        c = layer.in_shape[-1]
        limit = math.sqrt(6.0 / (9 * c))
        out["weight"] = rng.uniform(-limit, limit, (layer.width, c, 3, 3))
        out["bias"] = np.zeros(layer.width)
    elif layer.kind in ("fc", "project_fc"):
        fan_in = layer.in_shape[-1]
        limit = math.sqrt(6.0 / fan_in) if layer.activation == "relu" else math.sqrt(3.0 / fan_in)
        out["weight"] = rng.uniform(-limit, limit, (layer.width, fan_in))
        out["bias"] = np.zeros(layer.width)
    elif layer.kind == "lstm":
        h, fan_in = layer.width, layer.in_shape[-1]
        out["w_ih"] = rng.uniform(-1, 1, (4 * h, fan_in)) * math.sqrt(3.0 / fan_in)
        out["w_hh"] = rng.uniform(-1, 1, (4 * h, h)) * math.sqrt(3.0 / h)
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        out["bias"] = bias
    return out


def init_parameters(spec: NetworkSpec, seed: int = 0, dtype=torch.float32) -> Parameters:
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for layer in spec.layers:
        for key, value in init_layer(layer, rng).items():
            params[f"{layer.name}.{key}"] = torch.as_tensor(value, dtype=dtype)
    return params


def check_parameters(spec: NetworkSpec, params: Mapping[str, torch.Tensor]) -> None:
    expected = parameter_shapes(spec)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter names do not match {spec.name}: missing={missing} extra={extra}")
    for key, shape in expected.items():
        if tuple(params[key].shape) != shape:
            raise ShapeError(f"parameter {key}: expected {shape}, got {tuple(params[key].shape)}")


def clone_parameters(params: Mapping[str, torch.Tensor]) -> Parameters:
    return {k: v.detach().clone() for k, v in params.items()}


def transfer_conv_weights(source: Mapping[str, torch.Tensor], target: Mapping[str, torch.Tensor],
                          target_prefix: str = "") -> Parameters:
    """Copy the six conv layers of a pretrained depth CNN into a new parameter map."""
    out = clone_parameters(target)
    conv_keys = sorted(k for k in source if k.startswith("conv"))
    if len({k.split(".")[0] for k in conv_keys}) != 6:
        raise ShapeError(f"source has no complete conv trunk: {conv_keys}")
    for key in conv_keys:
        dest = target_prefix + key
        if dest not in out:
            raise ShapeError(f"target has no parameter {dest}")
        if out[dest].shape != source[key].shape:
            raise ShapeError(f"{dest}: shape {tuple(out[dest].shape)} != source {tuple(source[key].shape)}")
        out[dest] = source[key].detach().clone()
    return out


# ---------------------------------------------------------------- primitives


def conv3x3(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Same-padded, stride-1 3x3 convolution on NCHW input."""
    return torch.nn.functional.conv2d(x, weight, bias, padding=1)


def maxpool2x2(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.max_pool2d(x, 2, 2)


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return x @ weight.T + bias


def lstm(x: torch.Tensor, w_ih: torch.Tensor, w_hh: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Unidirectional LSTM over (B, T, I); gate order i, f, g, o. Returns all hidden states."""
    b, t, _ = x.shape
    hidden = w_hh.shape[1]
    pre = x @ w_ih.T + bias
    h = x.new_zeros(b, hidden)
    c = x.new_zeros(b, hidden)
    outs = []
    for step in range(t):
        gates = pre[:, step] + h @ w_hh.T
        i, f, g, o = gates.chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        outs.append(h)
    return torch.stack(outs, dim=1)


def last_step(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Hidden state at the last valid (masked-true) timestep of each sequence."""
    if mask is None:
        return x[:, -1]
    idx = (mask.to(torch.long).sum(dim=1) - 1).clamp(min=0)
    return x[torch.arange(x.shape[0]), idx]


# ---------------------------------------------------------------- evaluation


def _shape_channels_last(t: torch.Tensor, image: bool) -> tuple:
    s = tuple(t.shape[1:])
    if image:  # stored internally as (..., C, H, W)
        return s[:-3] + (s[-2], s[-1], s[-3])
    return s


def _to_tensor(value, dtype) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(dtype)
    return torch.as_tensor(np.asarray(value), dtype=dtype)


def _batch_dtype(params: Mapping[str, torch.Tensor], batch: Mapping) -> torch.dtype:
    if params:
        return next(iter(params.values())).dtype
    for value in batch.values():
        if isinstance(value, torch.Tensor) and value.is_floating_point():
            return value.dtype
    return torch.get_default_dtype()


def logits(spec: NetworkSpec, params: Mapping[str, torch.Tensor], batch: Mapping, trace: dict | None = None) -> torch.Tensor:
    """Pre-softmax scores for a batch ``{"depth": ..., "skeleton": ..., "mask": ...}``.

    Depth input is channels-last: (B, S, S, 1) for the per-frame CNN and
    (B, T, S, S, 1) for sequence networks. When ``trace`` is a dict, each
    layer's per-sample output shape (channels-last) is recorded in it.
    """
    dtype = _batch_dtype(params, batch)
    streams: dict[str, torch.Tensor] = {}
    image: dict[str, bool] = {}
    for name, shape in spec.inputs:
        if name not in batch:
            raise ShapeError(f"batch is missing input {name!r} required by {spec.name}")
        x = _to_tensor(batch[name], dtype)
        if tuple(x.shape[1:]) != tuple(shape):
            raise ShapeError(f"layer {spec.layers[0].name if name == spec.layers[0].stream else name}: "
                             f"input {name!r} expects per-sample shape {shape}, got {tuple(x.shape[1:])}")
        if len(shape) >= 3:
            x = x.movedim(-1, -3)
            image[name] = True
        else:
            image[name] = False
        streams[name] = x
    mask = batch.get("mask")
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
        mask = mask.to(torch.bool)

    for layer in spec.layers:
        if layer.kind == "softmax":
            continue
        if layer.kind == "concat":
            x = torch.cat([streams[s] for s in layer.sources], dim=-1)
            image["head"] = False
        else:
            x = streams[layer.stream]
            got = _shape_channels_last(x, image[layer.stream])
            if got != tuple(layer.in_shape):
                raise ShapeError(f"layer {layer.name}: expects input {layer.in_shape}, got {got}")
            x = _apply(layer, params, x, mask)
            if layer.kind == "flatten":
                image[layer.stream] = False
        streams[layer.stream] = x
        if trace is not None:
            trace[layer.name] = _shape_channels_last(x, image[layer.stream])
    return streams[spec.layers[-1].stream]


def _apply(layer: LayerSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor, mask) -> torch.Tensor:
    p = lambda key: params[f"{layer.name}.{key}"]  # noqa: E731
    kind = layer.kind
    if kind in ("conv3x3", "maxpool2x2", "flatten"):
        lead = x.shape[:-3]
        y = x.reshape((-1,) + tuple(x.shape[-3:]))
        if kind == "conv3x3":
            y = torch.relu(conv3x3(y, p("weight"), p("bias")))
        elif kind == "maxpool2x2":
            y = maxpool2x2(y)
        else:  # flatten in channels-last order to match the declared shapes
            return y.movedim(1, -1).reshape(tuple(lead) + (-1,))
        return y.reshape(tuple(lead) + tuple(y.shape[1:]))
    if kind in ("fc", "project_fc"):
        y = dense(x, p("weight"), p("bias"))
        return torch.relu(y) if layer.activation == "relu" else y
    if kind == "lstm":
        return lstm(x, p("w_ih"), p("w_hh"), p("bias"))
    if kind == "last_step":
        return last_step(x, mask)
    raise ValueError(f"cannot apply layer kind {kind!r}")


def forward(spec: NetworkSpec, params: Mapping[str, torch.Tensor], batch: Mapping) -> torch.Tensor:
    """Softmax class scores, shape (B, n_classes)."""
    with torch.no_grad():
        return torch.softmax(logits(spec, params, batch), dim=-1)


def feature_shapes(spec: NetworkSpec, params: Mapping[str, torch.Tensor], batch: Mapping) -> dict[str, tuple]:
    trace: dict[str, tuple] = {}
    with torch.no_grad():
        logits(spec, params, batch, trace)
    return trace


# ---------------------------------------------------------------- score fusion


def _pair(s1, s2):
    a, b = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score shapes differ: {a.shape} vs {b.shape}")
    return a, b


def fuse_scores_average(s1, s2) -> np.ndarray:
    a, b = _pair(s1, s2)
    return (a + b) / 2


def fuse_scores_max(s1, s2) -> np.ndarray:
    """Elementwise maximum. Only meaningful for argmax; rows do not sum to 1."""
    a, b = _pair(s1, s2)
    return np.maximum(a, b)


def predict(scores) -> np.ndarray | int:
    """1-based rank-1 class; ties go to the lowest index."""
    s = np.asarray(scores)
    if s.size == 0:
        raise ValueError("empty score vector")
    out = np.argmax(s, axis=-1) + 1
    return int(out) if s.ndim == 1 else out


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Parameters
    spec: dict
    fingerprint: str
    metadata: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)


def save_checkpoint(path, spec: NetworkSpec, params: Mapping[str, torch.Tensor], metadata: dict | None = None,
                    optimizer_state: dict | None = None) -> None:
    check_parameters(spec, params)
    header = {"spec": spec.to_dict(), "fingerprint": spec.fingerprint(), "metadata": metadata or {}}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in params.items()}
    for slot, values in (optimizer_state or {}).items():
        if isinstance(values, dict):
            for k, v in values.items():
                arrays[f"opt/{slot}/{k}"] = v.detach().cpu().numpy()
        else:
            header.setdefault("optimizer_scalars", {})[slot] = values
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Checkpoint:
    """Read a checkpoint; with ``spec`` given, a different fingerprint is an error."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if spec is not None and header["fingerprint"] != spec.fingerprint():
            raise ShapeError(
                f"{path}: checkpoint fingerprint {header['fingerprint']} does not match {spec.name} "
                f"spec {spec.fingerprint()}"
            )
        params = {k[6:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        opt: dict = dict(header.get("optimizer_scalars", {}))
        for k in data.files:
            if k.startswith("opt/"):
                _, slot, name = k.split("/", 2)
                opt.setdefault(slot, {})[name] = torch.from_numpy(data[k].copy())
    if spec is not None:
        check_parameters(spec, params)
    return Checkpoint(params, header["spec"], header["fingerprint"], header["metadata"], opt)
