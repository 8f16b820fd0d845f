"""LeNet-style classifier with a named parameter registry and binary checkpoints.

The model maps raw pixels in [0, 1] to class probabilities. Dataset
normalization is a fixed first transform inside :meth:`Model.logits`, so
attack budgets stay in raw pixel units.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import ops
from ._io import atomic_write_bytes
from .tensor import ShapeError, Tensor, no_grad

MAGIC = b"MMRB"
FORMAT_VERSION = 1

LAYER_KINDS = ("normalize", "conv", "maxpool", "relu", "flatten", "dense", "softmax")


class CheckpointError(ValueError):
    """Checkpoint cannot be used (wrong version, inconsistent contents)."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or malformed."""


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, **self.params}, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LayerSpec":
        d = json.loads(text)
        kind = d.pop("kind")
        return cls(kind, d)


def _output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Shape after one layer (batch axis excluded). Raises ShapeError on mismatch."""
    k, p = spec.kind, spec.params
    if k in ("normalize", "relu", "softmax"):
        if k == "normalize" and len(p["mean"]) != shape[0]:
            raise ShapeError(f"normalize has {len(p['mean'])} channels, input has {shape[0]}")
        return shape
    if k == "conv":
        if len(shape) != 3 or shape[0] != p["in_channels"]:
            raise ShapeError(f"conv expects {p['in_channels']} channels, got shape {shape}")
        h = ops.conv_output_size(shape[1], p["kernel"], p["padding"], p.get("stride", 1))
        w = ops.conv_output_size(shape[2], p["kernel"], p["padding"], p.get("stride", 1))
        if h <= 0 or w <= 0:
            raise ShapeError(f"conv output extent non-positive for input {shape}")
        return (p["out_channels"], h, w)
    if k == "maxpool":
        win, st = p["window"], p.get("stride", p["window"])
        if len(shape) != 3 or win > shape[1] or win > shape[2]:
            raise ShapeError(f"pool window {win} does not fit {shape}")
        return (shape[0], (shape[1] - win) // st + 1, (shape[2] - win) // st + 1)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if shape != (p["in_features"],):
            raise ShapeError(f"dense expects {p['in_features']} features, got shape {shape}")
        return (p["out_features"],)
    raise ShapeError(k)


class Model:
    """Ordered layers plus a registry of named parameter tensors.

    Parameter names follow ``<layer>.weight`` / ``<layer>.bias`` with layers
    numbered ``conv1, conv2, ...`` and ``dense1, dense2, ...``.
    """

    def __init__(self, layers: list[LayerSpec], input_shape: tuple, params: Optional[dict] = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.params: dict[str, Tensor] = {}
        self._names: list[Optional[str]] = []
        shape = self.input_shape
        counts = {"conv": 0, "dense": 0}
        for spec in self.layers:
            shape = _output_shape(spec, shape)
            if spec.kind in counts:
                counts[spec.kind] += 1
                self._names.append(f"{spec.kind}{counts[spec.kind]}")
            else:
                self._names.append(None)
        self.output_shape = shape
        if len(shape) != 1:
            raise ShapeError(f"model output must be a vector per example, got {shape}")
        expected = self.param_shapes()
        if params is not None:
            for name, shp in expected.items():
                if name not in params:
                    raise CheckpointError(f"missing parameter {name}")
                if tuple(params[name].shape) != shp:
                    raise CheckpointError(f"{name} has shape {tuple(params[name].shape)}, layers expect {shp}")
            extra = set(params) - set(expected)
            if extra:
                raise CheckpointError(f"unexpected parameters {sorted(extra)}")
            for name in expected:
                arr = params[name].data if isinstance(params[name], Tensor) else params[name]
                self.params[name] = Tensor(np.array(arr), requires_grad=True, name=name)

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_shapes(self) -> dict:
        shapes = {}
        for spec, name in zip(self.layers, self._names):
            p = spec.params
            if spec.kind == "conv":
                shapes[f"{name}.weight"] = (p["out_channels"], p["in_channels"], p["kernel"], p["kernel"])
                shapes[f"{name}.bias"] = (p["out_channels"],)
            elif spec.kind == "dense":
                shapes[f"{name}.weight"] = (p["in_features"], p["out_features"])
                shapes[f"{name}.bias"] = (p["out_features"],)
        return shapes

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    @property
    def conv_params(self) -> dict:
        """Convolution kernels (not biases): the set the fuzziness term acts on."""
        return {n: t for n, t in self.params.items() if n.startswith("conv") and n.endswith(".weight")}

    @property
    def other_params(self) -> dict:
        conv = self.conv_params
        return {n: t for n, t in self.params.items() if n not in conv}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast (e.g. float64 for gradient checks)."""
        return Model(self.layers, self.input_shape, {n: t.data.astype(dtype) for n, t in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.layers, self.input_shape, {n: t.data.copy() for n, t in self.params.items()})

    def state(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    # -- forward ---------------------------------------------------------
    def logits(self, x, track_gradients: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        if not track_gradients:
            with no_grad():
                return self._run(x, stop_at_softmax=True)
        return self._run(x, stop_at_softmax=True)

    def forward(self, x, track_gradients: bool = True) -> Tensor:
        """Class probabilities, B×m."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        if not track_gradients:
            with no_grad():
                return self._run(x, stop_at_softmax=False)
        return self._run(x, stop_at_softmax=False)

    __call__ = forward

    def _run(self, h: Tensor, stop_at_softmax: bool) -> Tensor:
        for spec, name in zip(self.layers, self._names):
            k, p = spec.kind, spec.params
            if k == "normalize":
                mean = np.asarray(p["mean"], dtype=h.dtype).reshape(1, -1, 1, 1)
                std = np.asarray(p["std"], dtype=h.dtype).reshape(1, -1, 1, 1)
                h = (h - Tensor(np.broadcast_to(mean, h.shape))) / Tensor(np.broadcast_to(std, h.shape))
            elif k == "conv":
                h = ops.conv2d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                               padding=p["padding"], stride=p.get("stride", 1))
            elif k == "maxpool":
                h = ops.maxpool2d(h, p["window"], p.get("stride", p["window"]))
            elif k == "relu":
                h = ops.relu(h)
            elif k == "flatten":
                h = ops.flatten(h)
            elif k == "dense":
                h = h @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]
            elif k == "softmax":
                if stop_at_softmax:
                    return h
                h = ops.softmax(h)
        return h

    def predict(self, x) -> np.ndarray:
        return predict(self, x)


def predict(model: Model, x) -> np.ndarray:
    """Arg-max class per row; ties resolve to the lowest index."""
    probs = model.forward(x, track_gradients=False).data
    return probs.argmax(axis=1)


def lenet_layers(input_channels: int = 1, input_side: int = 28, conv_filters=(5, 16), padding: int = 2,
                 fc_widths=(120, 84), classes: int = 10, kernel: int = 5,
                 mean=(0.1307,), std=(0.3081,)) -> tuple[list[LayerSpec], tuple]:
    f1, f2 = conv_filters
    for v in (input_channels, input_side, f1, f2, *fc_widths, classes, kernel):
        if v <= 0:
            raise ValueError("all extents must be positive")
    side = ops.conv_output_size(input_side, kernel, padding, 1) // 2
    side = ops.conv_output_size(side, kernel, 0, 1) // 2
    if side <= 0:
        raise ShapeError(f"input side {input_side} too small for the LeNet layer chain")
    flat = f2 * side * side
    layers = [
        LayerSpec("normalize", {"mean": list(mean), "std": list(std)}),
        LayerSpec("conv", {"in_channels": input_channels, "out_channels": f1, "kernel": kernel, "padding": padding}),
        LayerSpec("relu"),
        LayerSpec("maxpool", {"window": 2, "stride": 2}),
        LayerSpec("conv", {"in_channels": f1, "out_channels": f2, "kernel": kernel, "padding": 0}),
        LayerSpec("relu"),
        LayerSpec("maxpool", {"window": 2, "stride": 2}),
        LayerSpec("flatten"),
        LayerSpec("dense", {"in_features": flat, "out_features": fc_widths[0]}),
        LayerSpec("relu"),
        LayerSpec("dense", {"in_features": fc_widths[0], "out_features": fc_widths[1]}),
        LayerSpec("relu"),
        LayerSpec("dense", {"in_features": fc_widths[1], "out_features": classes}),
        LayerSpec("softmax"),
    ]
    return layers, (input_channels, input_side, input_side)


def build_lenet(input_channels: int = 1, input_side: int = 28, conv_filters=(5, 16), padding: int = 2,
                fc_widths=(120, 84), classes: int = 10, seed: int = 0, kernel: int = 5,
                mean=None, std=None, dtype=np.float32) -> Model:
    """LeNet with weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``mean``/``std`` default to the MNIST constants for one channel and the
    CIFAR10 constants for three.
    """
    if mean is None or std is None:
        from .data import CIFAR10_MEAN, CIFAR10_STD, MNIST_MEAN, MNIST_STD

        mean, std = (CIFAR10_MEAN, CIFAR10_STD) if input_channels == 3 else (MNIST_MEAN, MNIST_STD)
        if len(mean) != input_channels:
            mean, std = (0.0,) * input_channels, (1.0,) * input_channels
    layers, in_shape = lenet_layers(input_channels, input_side, conv_filters, padding, fc_widths, classes,
                                    kernel, mean, std)
    skeleton = Model(layers, in_shape)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in skeleton.param_shapes().items():
        layer = name.split(".")[0]
        wshape = skeleton.param_shapes()[f"{layer}.weight"]
        fan_in = int(np.prod(wshape[1:])) if layer.startswith("conv") else wshape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Model(layers, in_shape, params)


# -- checkpoints ---------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    out.append(struct.pack("<I", len(model.input_shape)))
    out.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.append(struct.pack("<I", len(model.layers)))
    for spec in model.layers:
        raw = spec.to_json().encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    out.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model: Model, path) -> Path:
    names = list(model.params)
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names are not unique")
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def parse_checkpoint(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("bad magic; not an MMRB checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    rank = r.u32()
    in_shape = tuple(np.atleast_1d(r.u32(rank))) if rank else ()
    layers = []
    try:
        for _ in range(r.u32()):
            layers.append(LayerSpec.from_json(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptCheckpointError(f"malformed layer table: {exc}") from exc
    params = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("malformed tensor name") from exc
        nd = r.u32()
        shape = tuple(np.atleast_1d(r.u32(nd))) if nd else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        if name in params:
            raise CorruptCheckpointError(f"duplicate tensor {name}")
        params[name] = arr
    if r.pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after last tensor")
    try:
        return Model(layers, in_shape, params)
    except ShapeError as exc:
        raise CheckpointError(f"layer specs do not compose: {exc}") from exc


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
