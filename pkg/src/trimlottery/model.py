"""Chain-structured models: construction, forward pass, cost accounting, checkpoints."""
from __future__ import annotations

import copy
import io
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ContractError, NumericError, ShapeError, Tensor

WEIGHT_KINDS = ("dense", "conv1d", "output-dense")
LAYER_KINDS = WEIGHT_KINDS + ("batchnorm", "relu", "maxpool", "dropout", "flatten")
BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    window: int = 2
    p: float = 0.0
    prunable: bool | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.prunable is None:
            object.__setattr__(self, "prunable", self.kind in ("dense", "conv1d"))
        if self.kind == "output-dense" and self.prunable:
            raise ValueError("output-dense layers are unprunable")
        if self.kind in WEIGHT_KINDS and self.units < 1:
            raise ValueError(f"{self.kind} needs a positive unit count")
        if self.kind == "conv1d" and min(self.kernel, self.stride, self.dilation) < 1:
            raise ValueError("conv1d kernel, stride and dilation must be positive")
        if self.kind == "dropout":
            if not 0 <= self.p < 1:
                raise ValueError(f"dropout p must be in [0, 1), got {self.p}")
            # stored as float32 in checkpoints
            object.__setattr__(self, "p", float(np.float32(self.p)))


def dense(units, prunable=True):
    return LayerSpec("dense", units=units, prunable=prunable)


def output_dense(units):
    return LayerSpec("output-dense", units=units, prunable=False)


def conv1d(channels, kernel, stride=1, dilation=1, padding=0, prunable=True):
    return LayerSpec("conv1d", units=channels, kernel=kernel, stride=stride, dilation=dilation,
                     padding=padding, prunable=prunable)


def batchnorm():
    return LayerSpec("batchnorm")


def relu():
    return LayerSpec("relu")


def maxpool(window):
    return LayerSpec("maxpool", window=window)


def dropout(p):
    return LayerSpec("dropout", p=p)


def flatten():
    return LayerSpec("flatten")


def infer_shapes(specs, input_shape):
    """Per-layer (in_shape, out_shape) pairs, excluding the batch axis."""
    shape = tuple(int(d) for d in input_shape)
    out = []
    for i, s in enumerate(specs):
        def bad(msg):
            return ShapeError(f"layer {i} ({s.kind}): {msg}; input shape {shape}")

        if s.kind in ("dense", "output-dense"):
            if len(shape) != 1:
                raise bad("dense layers need a flat input")
            nxt = (s.units,)
        elif s.kind == "conv1d":
            if len(shape) != 2:
                raise bad("conv1d needs a [channels, length] input")
            l_out = T.conv_output_length(shape[1], s.kernel, s.stride, s.dilation, s.padding)
            if l_out < 1:
                raise bad(f"non-positive output length {l_out}")
            nxt = (s.units, l_out)
        elif s.kind == "maxpool":
            if len(shape) != 2 or s.window > shape[1] or s.window < 1:
                raise bad(f"pool window {s.window} does not fit")
            nxt = (shape[0], shape[1] // s.window)
        elif s.kind == "flatten":
            if len(shape) != 2:
                raise bad("flatten needs a [channels, length] input")
            nxt = (shape[0] * shape[1],)
        else:
            nxt = shape
        out.append((shape, nxt))
        shape = nxt
    return out


class Layer:
    """One materialized layer: its spec, parameters and trim state."""

    def __init__(self, spec: LayerSpec, in_shape, out_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.params: dict[str, Tensor] = {}
        self.bn_state: T.BatchNormState | None = None
        self.kept: np.ndarray | None = None
        self.mask: np.ndarray | None = None

    @property
    def kind(self):
        return self.spec.kind

    @property
    def is_weight(self):
        return self.spec.kind in WEIGHT_KINDS

    @property
    def width(self):
        """Current number of output units (channels for conv and batch-norm)."""
        if self.is_weight:
            return self.spec.units
        if self.kind == "batchnorm":
            return self.in_shape[0]
        return None

    @property
    def fan_in(self):
        if self.kind == "conv1d":
            return self.in_shape[0] * self.spec.kernel
        if self.is_weight:
            return self.in_shape[0]
        return None

    def dims(self):
        s = self.spec
        if s.kind in ("dense", "output-dense"):
            return (self.in_shape[0], s.units)
        if s.kind == "conv1d":
            return (self.in_shape[0], s.units, s.kernel, s.stride, s.dilation, s.padding)
        if s.kind == "batchnorm":
            return (self.in_shape[0],)
        if s.kind == "maxpool":
            return (s.window,)
        if s.kind == "dropout":
            return (struct.unpack("<I", struct.pack("<f", s.p))[0],)
        return ()

    def state_arrays(self):
        """All numeric state in checkpoint order."""
        arrays = [t.data for t in self.params.values()]
        if self.bn_state is not None:
            arrays += [self.bn_state.running_mean, self.bn_state.running_var]
        return arrays


class ModelGraph:
    def __init__(self, layers, input_shape, seed=0):
        if not layers:
            raise ShapeError("a model needs at least one layer")
        self.layers: list[Layer] = layers
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    # -- structure --------------------------------------------------------
    @property
    def specs(self):
        return [layer.spec for layer in self.layers]

    @property
    def output_shape(self):
        return self.layers[-1].out_shape

    def weight_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.is_weight]

    def prunable_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.is_weight and layer.spec.prunable]

    def widths(self):
        return {i: self.layers[i].width for i in self.weight_layers()}

    def batchnorm_after(self, i):
        """Index of the batch-norm that normalizes weight layer ``i``'s outputs, or None."""
        for j in range(i + 1, len(self.layers)):
            kind = self.layers[j].kind
            if kind == "batchnorm":
                return j
            if kind in WEIGHT_KINDS or kind == "flatten":
                return None
        return None

    def activation_tap(self, i):
        """Index whose output serves as weight layer ``i``'s post-activation output."""
        for j in range(i + 1, len(self.layers)):
            kind = self.layers[j].kind
            if kind == "relu":
                return j
            if kind in WEIGHT_KINDS or kind == "flatten":
                break
        return i

    def followed_by_batchnorm(self, i):
        return self.batchnorm_after(i) is not None

    def parameters(self):
        return [t for layer in self.layers for t in layer.params.values()]

    def named_parameters(self):
        return [((i, name), t) for i, layer in enumerate(self.layers) for name, t in layer.params.items()]

    def masks(self):
        return {i: layer.mask for i, layer in enumerate(self.layers) if layer.mask is not None}

    def clone(self):
        return copy.deepcopy(self)

    def state(self):
        """Copies of every parameter and running statistic, in checkpoint order."""
        return [a.copy() for layer in self.layers for a in layer.state_arrays()]

    def load_state(self, arrays):
        arrays = list(arrays)
        targets = [a for layer in self.layers for a in layer.state_arrays()]
        if len(arrays) != len(targets) or any(a.shape != t.shape for a, t in zip(arrays, targets)):
            raise ContractError("state does not match the model topology")
        for dst, src in zip(targets, arrays):
            dst[...] = src

    def reset_running_stats(self):
        for layer in self.layers:
            if layer.bn_state is not None:
                layer.bn_state.running_mean[:] = 0
                layer.bn_state.running_var[:] = 1

    def apply_masks(self):
        """Zero masked weights in place."""
        for layer in self.layers:
            if layer.mask is not None:
                layer.params["W"].data *= layer.mask

    def refresh_shapes(self):
        shapes = infer_shapes(self.specs, self.input_shape)
        for layer, (i_s, o_s) in zip(self.layers, shapes):
            layer.in_shape, layer.out_shape = i_s, o_s

    # -- execution --------------------------------------------------------
    def __call__(self, x, mode="eval"):
        return self.forward(x, mode)

    def forward(self, x, mode="eval", taps=None):
        """Run the chain. With ``taps`` (layer indices), also return their outputs."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {self.input_shape}")
        training = mode == "train"
        captured = {}
        for i, layer in enumerate(self.layers):
            try:
                x = self._layer_forward(layer, x, training)
            except NumericError as exc:
                raise NumericError(f"layer {i} ({layer.kind}): {exc}") from None
            if taps is not None and i in taps:
                captured[i] = x
        return (x, captured) if taps is not None else x

    def _layer_forward(self, layer, x, training):
        kind = layer.kind
        p = layer.params
        if kind in WEIGHT_KINDS:
            W = p["W"]
            if layer.mask is not None:
                W = T.mul(W, Tensor(layer.mask.astype(W.dtype)))
            if kind == "conv1d":
                s = layer.spec
                return T.conv1d(x, W, p["b"], s.stride, s.dilation, s.padding)
            return T.affine(x, W, p["b"])
        if kind == "batchnorm":
            return T.batchnorm1d(x, p["gamma"], p["beta"], layer.bn_state, training)
        if kind == "relu":
            return T.relu(x)
        if kind == "maxpool":
            return T.maxpool1d(x, layer.spec.window)
        if kind == "dropout":
            return T.dropout(x, layer.spec.p, training, self.rng)
        if kind == "flatten":
            return T.flatten(x)
        raise AssertionError(kind)

    def predict(self, inputs, batch_size=256):
        """Eval-mode outputs as a numpy array, evaluated in chunks without taping."""
        outs = []
        with T.no_grad():
            for start in range(0, len(inputs), batch_size):
                outs.append(self.forward(inputs[start : start + batch_size], "eval").data)
        return np.concatenate(outs, axis=0)


def _init_layer(layer: Layer, rng: np.random.Generator):
    kind = layer.kind
    if kind in WEIGHT_KINDS:
        bound = 1.0 / math.sqrt(layer.fan_in)
        if kind == "conv1d":
            wshape = (layer.spec.units, layer.in_shape[0], layer.spec.kernel)
        else:
            wshape = (layer.spec.units, layer.in_shape[0])
        layer.params["W"] = Tensor(rng.uniform(-bound, bound, wshape).astype(np.float32), requires_grad=True)
        layer.params["b"] = Tensor(rng.uniform(-bound, bound, layer.spec.units).astype(np.float32),
                                   requires_grad=True)
        layer.kept = np.arange(layer.spec.units, dtype=np.int64)
    elif kind == "batchnorm":
        c = layer.in_shape[0]
        layer.params["gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
        layer.params["beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
        layer.bn_state = T.BatchNormState(c)
        layer.kept = np.arange(c, dtype=np.int64)


def build_model(specs, input_shape, seed=0) -> ModelGraph:
    """Materialize a layer chain with seeded uniform fan-in initialization."""
    specs = list(specs)
    if not specs:
        raise ShapeError("a model needs at least one layer")
    shapes = infer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    layers = []
    for spec, (i_s, o_s) in zip(specs, shapes):
        layer = Layer(spec, i_s, o_s)
        _init_layer(layer, rng)
        layers.append(layer)
    return ModelGraph(layers, input_shape, seed)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class CostReport:
    param_count: int
    disk_size: int
    flops: int
    memory: int


def count_params(model: ModelGraph) -> int:
    return int(sum(t.size for t in model.parameters()))


def _shapes_for(model, input_shape):
    if not model.layers:
        raise ShapeError("cost of a zero-layer model is undefined")
    shape = model.input_shape if input_shape is None else tuple(input_shape)
    return infer_shapes(model.specs, shape)


def layer_flops(spec: LayerSpec, in_shape, out_shape) -> int:
    n_out = int(np.prod(out_shape))
    if spec.kind in ("dense", "output-dense"):
        return 2 * in_shape[0] * out_shape[0] + out_shape[0]
    if spec.kind == "conv1d":
        c_out, l_out = out_shape
        return l_out * (2 * spec.kernel * in_shape[0] + 1) * c_out
    if spec.kind == "batchnorm":
        return 2 * n_out
    if spec.kind == "relu":
        return n_out
    if spec.kind == "maxpool":
        return n_out * (spec.window - 1)
    return 0


def count_flops(model: ModelGraph, input_shape=None) -> int:
    """Single-input inference FLOPS, one multiply-add counted as two."""
    shapes = _shapes_for(model, input_shape)
    return int(sum(layer_flops(s, i_s, o_s) for s, (i_s, o_s) in zip(model.specs, shapes)))


def peak_activation_elements(model: ModelGraph, input_shape=None) -> int:
    """Largest live set (layer input + output) over the forward pass, per input."""
    shapes = _shapes_for(model, input_shape)
    peak = 0
    for spec, (i_s, o_s) in zip(model.specs, shapes):
        n_in, n_out = int(np.prod(i_s)), int(np.prod(o_s))
        # flatten is a view and eval-mode dropout is the identity
        live = n_in if spec.kind in ("flatten", "dropout") else n_in + n_out
        peak = max(peak, live)
    return peak


def estimate_memory(model: ModelGraph, input_shape=None, batch=1) -> int:
    """Bytes of parameters plus peak live activations, 4 bytes per value."""
    return BYTES_PER_VALUE * (count_params(model) + batch * peak_activation_elements(model, input_shape))


def disk_size(model: ModelGraph) -> int:
    return len(dumps_checkpoint(model))


def cost_report(model: ModelGraph) -> CostReport:
    return CostReport(count_params(model), disk_size(model), count_flops(model), estimate_memory(model))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TRIM"
FORMAT_VERSION = 1
KIND_TAGS = {k: i + 1 for i, k in enumerate(
    ("dense", "conv1d", "batchnorm", "relu", "maxpool", "dropout", "flatten", "output-dense"))}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
ROLES = {"model": 0, "rewind": 1}


class CheckpointFormatError(ValueError):
    pass


def dumps_checkpoint(model: ModelGraph, role="model", epoch=0) -> bytes:
    if role not in ROLES:
        raise ValueError(f"unknown checkpoint role {role!r}; choose from {sorted(ROLES)}")
    buf = io.BytesIO()
    w = buf.write
    w(MAGIC)
    w(struct.pack("<HQH", FORMAT_VERSION, model.seed & 0xFFFFFFFFFFFFFFFF, len(model.layers)))
    w(struct.pack("<BIB", ROLES[role], epoch, len(model.input_shape)))
    w(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for layer in model.layers:
        dims = layer.dims()
        w(struct.pack("<BB", KIND_TAGS[layer.kind], len(dims)))
        w(struct.pack(f"<{len(dims)}I", *dims))
        w(struct.pack("<B", int(bool(layer.spec.prunable))))
        kept = layer.kept if layer.kept is not None else np.zeros(0, np.int64)
        w(struct.pack("<I", len(kept)))
        w(kept.astype("<u4").tobytes())
        for arr in layer.state_arrays():
            w(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        w(struct.pack("<B", int(layer.mask is not None)))
        if layer.mask is not None:
            w(layer.mask.astype(np.uint8).tobytes())
    return buf.getvalue()


def save_checkpoint(model: ModelGraph, path, role="model", epoch=0):
    Path(path).write_bytes(dumps_checkpoint(model, role, epoch))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at offset {self.pos}: need {size} bytes")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, count, dtype):
        dt = np.dtype(dtype)
        size = count * dt.itemsize
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"truncated payload at offset {self.pos}: need {size} bytes")
        arr = np.frombuffer(self.data, dtype=dt, count=count, offset=self.pos).copy()
        self.pos += size
        return arr


def _spec_from_dims(kind, dims, prunable, offset):
    try:
        if kind in ("dense", "output-dense"):
            return LayerSpec(kind, units=dims[1], prunable=prunable), (dims[0],)
        if kind == "conv1d":
            return LayerSpec(kind, units=dims[1], kernel=dims[2], stride=dims[3], dilation=dims[4],
                             padding=dims[5], prunable=prunable), (dims[0],)
        if kind == "maxpool":
            return LayerSpec(kind, window=dims[0], prunable=prunable), None
        if kind == "dropout":
            p = struct.unpack("<f", struct.pack("<I", dims[0]))[0]
            return LayerSpec(kind, p=p, prunable=prunable), None
        if kind == "batchnorm":
            return LayerSpec(kind, prunable=prunable), (dims[0],)
        return LayerSpec(kind, prunable=prunable), None
    except (IndexError, ValueError) as exc:
        raise CheckpointFormatError(f"invalid {kind} layer record at offset {offset}: {exc}") from None


def loads_checkpoint(data: bytes, return_meta=False):
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {data[:4]!r} at offset 0")
    r.pos = 4
    version, seed, n_layers = r.take("<HQH")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version} at offset 4")
    role_tag, epoch, rank = r.take("<BIB")
    roles = {v: k for k, v in ROLES.items()}
    if role_tag not in roles:
        raise CheckpointFormatError(f"unknown role tag {role_tag} at offset {r.pos - 6}")
    input_shape = r.take(f"<{rank}I")
    raw = []
    for _ in range(n_layers):
        start = r.pos
        tag, ndims = r.take("<BB")
        if tag not in TAG_KINDS:
            raise CheckpointFormatError(f"unknown layer kind tag {tag} at offset {start}")
        kind = TAG_KINDS[tag]
        dims = r.take(f"<{ndims}I")
        (prunable,) = r.take("<B")
        (n_kept,) = r.take("<I")
        kept = r.array(n_kept, "<u4").astype(np.int64)
        spec, _ = _spec_from_dims(kind, dims, bool(prunable), start)
        raw.append((spec, dims, kept, start))
        # payload sizes follow from the dims
        if kind in ("dense", "output-dense"):
            sizes = [dims[0] * dims[1], dims[1]]
        elif kind == "conv1d":
            sizes = [dims[1] * dims[0] * dims[2], dims[1]]
        elif kind == "batchnorm":
            sizes = [dims[0]] * 4
        else:
            sizes = []
        arrays = [r.array(n, "<f4").astype(np.float32) for n in sizes]
        (has_mask,) = r.take("<B")
        mask = r.array(sizes[0], np.uint8).astype(bool) if has_mask else None
        raw[-1] = (spec, dims, kept, start, arrays, mask)
    if r.pos != len(data):
        raise CheckpointFormatError(f"trailing bytes at offset {r.pos}")
    specs = [item[0] for item in raw]
    try:
        shapes = infer_shapes(specs, input_shape)
    except ShapeError as exc:
        raise CheckpointFormatError(f"inconsistent layer chain: {exc}") from None
    layers = []
    for (spec, dims, kept, start, arrays, mask), (i_s, o_s) in zip(raw, shapes):
        layer = Layer(spec, i_s, o_s)
        kind = spec.kind
        if kind in WEIGHT_KINDS:
            if dims[0] != i_s[0]:
                raise CheckpointFormatError(f"layer input width {dims[0]} disagrees with chain at offset {start}")
            wshape = (dims[1], dims[0], dims[2]) if kind == "conv1d" else (dims[1], dims[0])
            layer.params["W"] = Tensor(arrays[0].reshape(wshape), requires_grad=True)
            layer.params["b"] = Tensor(arrays[1], requires_grad=True)
            layer.kept = kept
            if mask is not None:
                layer.mask = mask.reshape(wshape)
        elif kind == "batchnorm":
            layer.params["gamma"] = Tensor(arrays[0], requires_grad=True)
            layer.params["beta"] = Tensor(arrays[1], requires_grad=True)
            layer.bn_state = T.BatchNormState(dims[0])
            layer.bn_state.running_mean[:] = arrays[2]
            layer.bn_state.running_var[:] = arrays[3]
            layer.kept = kept
        layers.append(layer)
    model = ModelGraph(layers, input_shape, seed)
    if return_meta:
        return model, {"role": roles[role_tag], "epoch": epoch}
    return model


def load_checkpoint(path, return_meta=False):
    return loads_checkpoint(Path(path).read_bytes(), return_meta)


def with_units(spec: LayerSpec, units: int) -> LayerSpec:
    return replace(spec, units=int(units))


__all__ = [
    "LayerSpec", "Layer", "ModelGraph", "CostReport", "CheckpointFormatError", "ContractError",
    "build_model", "count_params", "count_flops", "estimate_memory", "disk_size", "cost_report",
    "save_checkpoint", "load_checkpoint", "dumps_checkpoint", "loads_checkpoint", "infer_shapes",
]
