"""Declarative model topologies: shape planning, initialization, forward pass.

A ``ModelSpec`` lists the *hidden* layers; planning always appends the
classifier Dense producing ``n_classes`` logits.  The planner also inserts the
implicit glue stages: ``Flatten`` between a grid (conv) stage and a Dense,
``CnnToRnnReshape`` between a grid stage and a Recurrent (time stays the
sequence axis), and ``SequenceHead`` between the last Recurrent and the
classifier (last hidden state for uni-directional stacks, the concatenation
of each direction's final state for bi-directional ones).

Grid values are channels-first ``[C, *spatial]`` with time as the trailing
spatial axis; sequences are ``[T, F]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    ACTIVATIONS,
    Tensor,
    activation,
    add_bias,
    add,
    concat,
    conv_nd_batched,
    matmul,
    mul,
    reshape,
    select,
    softmax,
    sub,
    tanh,
    sigmoid,
    transpose,
)

RECURRENT_CELLS = ("rnn", "lstm", "gru")
DIRECTIONS = ("uni", "bi")

_GATES = {
    "rnn": ("",),
    "gru": ("r", "z", "n"),
    "lstm": ("i", "f", "g", "o"),
}


def _positive(value, name) -> int:
    value = int(value)
    if value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value}")
    return value


def _per_axis(value, rank, name) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        out = (int(value),) * rank
    else:
        out = tuple(int(v) for v in value)
    if len(out) != rank:
        raise ConfigError(f"{name} needs one entry per axis (rank {rank}), got {out}")
    return out


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    nodes: int

    def __post_init__(self):
        _positive(self.nodes, "Dense nodes")


@dataclass(frozen=True)
class Conv:
    rank: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        if self.rank not in (1, 2, 3):
            raise ConfigError(f"Conv rank must be 1, 2 or 3, got {self.rank}")
        _positive(self.out_channels, "Conv out_channels")
        object.__setattr__(self, "kernel", _per_axis(self.kernel, self.rank, "kernel"))
        object.__setattr__(self, "stride", _per_axis(self.stride, self.rank, "stride"))
        object.__setattr__(self, "padding", _per_axis(self.padding, self.rank, "padding"))
        for k in self.kernel:
            _positive(k, "Conv kernel")
        for s in self.stride:
            _positive(s, "Conv stride")
        for p in self.padding:
            if p < 0:
                raise ConfigError(f"Conv padding must be non-negative, got {p}")


@dataclass(frozen=True)
class Recurrent:
    cell: str
    hidden_nodes: int
    layers: int = 1
    direction: str = "uni"

    def __post_init__(self):
        if self.cell not in RECURRENT_CELLS:
            raise ConfigError(f"recurrent cell must be one of {RECURRENT_CELLS}, got {self.cell!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        _positive(self.hidden_nodes, "Recurrent hidden_nodes")
        _positive(self.layers, "Recurrent layers")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class CnnToRnnReshape:
    pass


@dataclass(frozen=True)
class SequenceHead:
    """Implicit: reduce a sequence to the classifier input state."""


LayerSpec = Dense | Conv | Recurrent | Flatten | CnnToRnnReshape


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        for d in self.input_shape:
            _positive(d, "input dimension")
        if not self.input_shape:
            raise ConfigError("input_shape must not be empty")
        _positive(self.n_classes, "n_classes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    # -- canonical text form (embedded in checkpoints / config round trip) --

    def to_text(self) -> str:
        lines = [
            "input_shape=" + ",".join(str(d) for d in self.input_shape),
            f"n_classes={self.n_classes}",
            f"activation={self.activation}",
            f"seed={self.seed}",
        ]
        for layer in self.layers:
            lines.append("layer=" + _layer_to_text(layer))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelSpec":
        fields = {}
        layers = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"model spec line {line!r} is not key=value")
            key, value = line.split("=", 1)
            if key == "layer":
                layers.append(_layer_from_text(value))
            else:
                fields[key] = value
        try:
            input_shape = tuple(int(d) for d in fields["input_shape"].split(","))
            n_classes = int(fields["n_classes"])
            act = fields.get("activation", "relu")
            seed = int(fields.get("seed", "0"))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"model spec text is missing or corrupt: {exc}") from exc
        return ModelSpec(input_shape, tuple(layers), n_classes, act, seed)


def _layer_to_text(layer: LayerSpec) -> str:
    if isinstance(layer, Dense):
        return f"dense:nodes={layer.nodes}"
    if isinstance(layer, Conv):
        return (
            f"conv:rank={layer.rank},channels={layer.out_channels},"
            f"kernel={'x'.join(map(str, layer.kernel))},"
            f"stride={'x'.join(map(str, layer.stride))},"
            f"padding={'x'.join(map(str, layer.padding))}"
        )
    if isinstance(layer, Recurrent):
        return (
            f"recurrent:cell={layer.cell},hidden={layer.hidden_nodes},"
            f"layers={layer.layers},direction={layer.direction}"
        )
    if isinstance(layer, Flatten):
        return "flatten"
    if isinstance(layer, CnnToRnnReshape):
        return "cnn_to_rnn"
    raise ConfigError(f"unknown layer {layer!r}")


def _layer_from_text(text: str) -> LayerSpec:
    kind, _, rest = text.partition(":")
    opts = {}
    if rest:
        for item in rest.split(","):
            k, _, v = item.partition("=")
            opts[k] = v
    try:
        if kind == "dense":
            return Dense(int(opts["nodes"]))
        if kind == "conv":
            return Conv(
                int(opts["rank"]),
                int(opts["channels"]),
                tuple(int(v) for v in opts["kernel"].split("x")),
                tuple(int(v) for v in opts["stride"].split("x")),
                tuple(int(v) for v in opts["padding"].split("x")),
            )
        if kind == "recurrent":
            return Recurrent(opts["cell"], int(opts["hidden"]),
                             int(opts.get("layers", "1")), opts.get("direction", "uni"))
        if kind == "flatten":
            return Flatten()
        if kind == "cnn_to_rnn":
            return CnnToRnnReshape()
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad layer description {text!r}: {exc}") from exc
    raise FormatError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Shape planning
# ---------------------------------------------------------------------------


def infer_conv_output_size(in_extent: int, kernel: int, stride: int, padding: int) -> int:
    """floor((in + 2*padding - kernel)/stride) + 1, rejected when below 1."""
    in_extent, kernel = int(in_extent), int(kernel)
    stride, padding = int(stride), int(padding)
    if in_extent < 1 or kernel < 1 or stride < 1 or padding < 0:
        raise ConfigError(
            f"conv size arguments out of range: in={in_extent}, kernel={kernel}, "
            f"stride={stride}, padding={padding}"
        )
    out = (in_extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigError(
            f"convolution output extent {out} < 1 "
            f"(input {in_extent}, kernel {kernel}, stride {stride}, padding {padding})"
        )
    return out


@dataclass(frozen=True)
class StagePlan:
    layer: object
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    param_prefix: str | None = None
    is_head: bool = False


@dataclass(frozen=True)
class ShapePlan:
    spec: ModelSpec
    stages: tuple[StagePlan, ...]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.stages[-1].out_shape


def plan_shapes(spec: ModelSpec) -> ShapePlan:
    """Resolve per-stage shapes, inserting the implicit glue stages."""
    if not spec.layers:
        raise ConfigError("model has no layers; at least one hidden layer is required")

    stages: list[StagePlan] = []
    shape = spec.input_shape
    kind = "input"  # input | grid | seq | flat

    def emit(layer, out_shape, prefix=None, is_head=False, new_kind=None):
        nonlocal shape, kind
        stages.append(StagePlan(layer, shape, tuple(out_shape), prefix, is_head))
        shape = tuple(out_shape)
        if new_kind:
            kind = new_kind

    def to_flat(context):
        nonlocal shape, kind
        if kind == "seq":
            raise ConfigError(
                f"{context}: a sequence feeds the classifier through its head state, "
                "not through Flatten"
            )
        if len(shape) > 1:
            emit(Flatten(), (int(np.prod(shape)),), new_kind="flat")
        else:
            kind = "flat"

    for i, layer in enumerate(spec.layers):
        prefix = f"layer{i}"
        if isinstance(layer, Conv):
            if kind == "seq":
                raise ConfigError(
                    f"layer {i}: a convolution may not follow a recurrent layer "
                    "(only input-to-output CNN->RNN stacking is supported)"
                )
            if kind == "flat":
                raise ConfigError(f"layer {i}: convolution after Flatten is not defined")
            if len(shape) != layer.rank + 1:
                raise ConfigError(
                    f"layer {i}: rank-{layer.rank} convolution needs a "
                    f"[channels x {layer.rank} spatial] input, got shape {shape}"
                )
            out_spatial = []
            for axis in range(layer.rank):
                try:
                    out_spatial.append(infer_conv_output_size(
                        shape[1 + axis], layer.kernel[axis], layer.stride[axis], layer.padding[axis]
                    ))
                except ConfigError as exc:
                    raise ConfigError(f"layer {i}, spatial axis {axis}: {exc}") from None
            emit(layer, (layer.out_channels, *out_spatial), prefix, new_kind="grid")
        elif isinstance(layer, Recurrent):
            if kind == "grid":
                if len(shape) == 3:
                    emit(CnnToRnnReshape(), (shape[2], shape[0] * shape[1]), new_kind="seq")
                elif len(shape) == 2:
                    emit(CnnToRnnReshape(), (shape[1], shape[0]), new_kind="seq")
                else:
                    raise ConfigError(
                        f"layer {i}: cannot reshape a {len(shape)}-D grid into a sequence; "
                        "only [C x T] and [C x F x T] conv outputs are supported"
                    )
            elif kind == "input":
                if len(shape) != 2:
                    raise ConfigError(
                        f"layer {i}: a recurrent layer needs a [time x features] input, "
                        f"got shape {shape}"
                    )
                kind = "seq"
            elif kind == "flat":
                raise ConfigError(f"layer {i}: a recurrent layer cannot consume flattened features")
            t, _ = shape
            width = layer.hidden_nodes * (2 if layer.direction == "bi" else 1)
            emit(layer, (t, width), prefix, new_kind="seq")
        elif isinstance(layer, Dense):
            if kind == "seq":
                emit(SequenceHead(), (shape[1],), new_kind="flat")
            else:
                to_flat(f"layer {i}")
            emit(layer, (layer.nodes,), prefix, new_kind="flat")
        elif isinstance(layer, Flatten):
            to_flat(f"layer {i}")
        elif isinstance(layer, CnnToRnnReshape):
            if kind == "seq":
                raise ConfigError(f"layer {i}: input is already a sequence")
            if len(shape) == 3:
                emit(layer, (shape[2], shape[0] * shape[1]), new_kind="seq")
            elif len(shape) == 2:
                emit(layer, (shape[1], shape[0]), new_kind="seq")
            else:
                raise ConfigError(
                    f"layer {i}: cnn_to_rnn needs a [C x T] or [C x F x T] input, got {shape}"
                )
        else:
            raise ConfigError(f"layer {i}: unknown layer specification {layer!r}")

    # classifier head
    if kind == "seq":
        emit(SequenceHead(), (shape[1],), new_kind="flat")
    else:
        to_flat("classifier head")
    emit(Dense(spec.n_classes), (spec.n_classes,), "head", is_head=True)
    return ShapePlan(spec, tuple(stages))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


@dataclass
class Model:
    spec: ModelSpec
    plan: ShapePlan
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def clone_parameters(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_parameters(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ShapeError(f"parameter name sets differ: {sorted(missing)}")
        for name, arr in arrays.items():
            target = self.params[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise ShapeError(
                    f"parameter {name}: shape {tuple(arr.shape)} does not match {tuple(target.shape)}"
                )
            target.data = np.asarray(arr, dtype=target.data.dtype).copy()


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _init_cell_params(rng, params, prefix, cell, in_features, hidden, dtype):
    for gate in _GATES[cell]:
        suffix = f"_{gate}" if gate else ""
        w = _glorot(rng, in_features, hidden, (in_features, hidden), dtype)
        u = _glorot(rng, hidden, hidden, (hidden, hidden), dtype)
        b = np.ones(hidden, dtype) if (cell == "lstm" and gate == "f") else np.zeros(hidden, dtype)
        params[f"{prefix}.W{suffix}"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.U{suffix}"] = Tensor(u, requires_grad=True)
        params[f"{prefix}.b{suffix}"] = Tensor(b, requires_grad=True)


def init_model(spec: ModelSpec, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases (LSTM forget gate 1.0), seeded."""
    plan = plan_shapes(spec)
    rng = np.random.default_rng(spec.seed)
    params: dict[str, Tensor] = {}
    for stage in plan.stages:
        layer, prefix = stage.layer, stage.param_prefix
        if prefix is None:
            continue
        if isinstance(layer, Dense):
            fan_in, fan_out = stage.in_shape[0], layer.nodes
            params[f"{prefix}.weight"] = Tensor(
                _glorot(rng, fan_in, fan_out, (fan_in, fan_out), dtype), requires_grad=True)
            params[f"{prefix}.bias"] = Tensor(np.zeros(fan_out, dtype), requires_grad=True)
        elif isinstance(layer, Conv):
            c_in = stage.in_shape[0]
            k_elems = int(np.prod(layer.kernel))
            shape = (layer.out_channels, c_in, *layer.kernel)
            params[f"{prefix}.weight"] = Tensor(
                _glorot(rng, c_in * k_elems, layer.out_channels * k_elems, shape, dtype),
                requires_grad=True)
            params[f"{prefix}.bias"] = Tensor(np.zeros(layer.out_channels, dtype), requires_grad=True)
        elif isinstance(layer, Recurrent):
            in_features = stage.in_shape[1]
            dirs = ("fwd", "bwd") if layer.direction == "bi" else ("fwd",)
            for sub in range(layer.layers):
                for d in dirs:
                    _init_cell_params(rng, params, f"{prefix}.l{sub}.{d}", layer.cell,
                                      in_features, layer.hidden_nodes, dtype)
                in_features = layer.hidden_nodes * len(dirs)
    return Model(spec, plan, params)


# ---------------------------------------------------------------------------
# Recurrent cells
# ---------------------------------------------------------------------------


def _affine(x, h, w, u, b):
    return add_bias(add(matmul(x, w), matmul(h, u)), b)


def rnn_cell(x, h, p, prefix):
    """h' = tanh(W x + U h + b)."""
    return tanh(_affine(x, h, p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"]))


def gru_cell(x, h, p, prefix):
    """r/z gates sigmoid, candidate n = tanh(W_n x + U_n (r*h) + b_n)."""
    r = sigmoid(_affine(x, h, p[f"{prefix}.W_r"], p[f"{prefix}.U_r"], p[f"{prefix}.b_r"]))
    z = sigmoid(_affine(x, h, p[f"{prefix}.W_z"], p[f"{prefix}.U_z"], p[f"{prefix}.b_z"]))
    n = tanh(add_bias(add(matmul(x, p[f"{prefix}.W_n"]), matmul(mul(r, h), p[f"{prefix}.U_n"])),
                      p[f"{prefix}.b_n"]))
    # (1 - z) * n + z * h  ==  n + z * (h - n)
    return add(n, mul(z, sub(h, n)))


def lstm_cell(x, h, c, p, prefix):
    i = sigmoid(_affine(x, h, p[f"{prefix}.W_i"], p[f"{prefix}.U_i"], p[f"{prefix}.b_i"]))
    f = sigmoid(_affine(x, h, p[f"{prefix}.W_f"], p[f"{prefix}.U_f"], p[f"{prefix}.b_f"]))
    g = tanh(_affine(x, h, p[f"{prefix}.W_g"], p[f"{prefix}.U_g"], p[f"{prefix}.b_g"]))
    o = sigmoid(_affine(x, h, p[f"{prefix}.W_o"], p[f"{prefix}.U_o"], p[f"{prefix}.b_o"]))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def _run_direction(steps, params, prefix, cell, hidden, reverse):
    """Run one direction; returns per-position hidden states (position order)."""
    batch = steps[0].shape[0]
    dtype = steps[0].data.dtype
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    out: list = [None] * len(steps)
    for t in order:
        if cell == "lstm":
            h, c = lstm_cell(steps[t], h, c, params, prefix)
        elif cell == "gru":
            h = gru_cell(steps[t], h, params, prefix)
        else:
            h = rnn_cell(steps[t], h, params, prefix)
        out[t] = h
    return out


def run_recurrent_layer(steps, params, prefix, layer: Recurrent):
    """Full sub-stack; returns (per-position outputs, classifier head state)."""
    if not steps:
        raise ShapeError("recurrent layer received an empty sequence")
    head = None
    for sub in range(layer.layers):
        fwd = _run_direction(steps, params, f"{prefix}.l{sub}.fwd", layer.cell,
                             layer.hidden_nodes, reverse=False)
        if layer.direction == "bi":
            bwd = _run_direction(steps, params, f"{prefix}.l{sub}.bwd", layer.cell,
                                 layer.hidden_nodes, reverse=True)
            steps = [concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
            head = concat([fwd[-1], bwd[0]], axis=1)
        else:
            steps = fwd
            head = fwd[-1]
    return steps, head


def cnn_to_rnn_reshape(x: Tensor) -> Tensor:
    """[B, C, T] -> [B, T, C] or [B, C, F, T] -> [B, T, C*F] (values permuted only)."""
    if x.data.ndim == 3:
        return transpose(x, (0, 2, 1))
    if x.data.ndim == 4:
        b, c, f, t = x.shape
        return reshape(transpose(x, (0, 3, 1, 2)), (b, t, c * f))
    raise ShapeError(f"cnn_to_rnn_reshape needs a [B,C,T] or [B,C,F,T] tensor, got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _sequence_steps(x: Tensor) -> list:
    return [select(x, t, axis=1) for t in range(x.shape[1])]


def _assemble_sequence(steps) -> Tensor:
    batch, width = steps[0].shape
    return concat([reshape(s, (batch, 1, width)) for s in steps], axis=1)


def forward(model: Model, batch, training: bool = False):
    """Run the planned stages; returns (logits Tensor [B x C], probabilities Tensor)."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = model.spec.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(
            f"batch shape {tuple(x.shape)} does not match model input "
            f"[B x {' x '.join(str(d) for d in expected)}]"
        )
    params = model.params
    value = x
    pending_head = None
    stages = model.plan.stages
    for idx, stage in enumerate(stages):
        layer = stage.layer
        if isinstance(layer, Dense):
            value = add_bias(matmul(value, params[f"{stage.param_prefix}.weight"]),
                             params[f"{stage.param_prefix}.bias"])
            if not stage.is_head:
                value = activation(value, model.spec.activation)
        elif isinstance(layer, Conv):
            value = conv_nd_batched(value, params[f"{stage.param_prefix}.weight"],
                                    layer.stride, layer.padding,
                                    bias=params[f"{stage.param_prefix}.bias"])
            value = activation(value, model.spec.activation)
        elif isinstance(layer, Recurrent):
            steps = _sequence_steps(value)
            steps, pending_head = run_recurrent_layer(steps, params, stage.param_prefix, layer)
            # assembling [B,T,H] is wasted work when only the head state is consumed next
            if idx + 1 < len(stages) and isinstance(stages[idx + 1].layer, SequenceHead):
                value = pending_head
                continue
            value = _assemble_sequence(steps)
        elif isinstance(layer, SequenceHead):
            if pending_head is None:
                raise ShapeError("sequence head requested but no recurrent layer ran")
            value = pending_head
        elif isinstance(layer, Flatten):
            value = reshape(value, (value.shape[0], int(np.prod(stage.out_shape))))
        elif isinstance(layer, CnnToRnnReshape):
            value = cnn_to_rnn_reshape(value)
        if tuple(value.shape[1:]) != tuple(stage.out_shape):
            raise ShapeError(
                f"stage {idx} ({type(layer).__name__}) produced shape {tuple(value.shape[1:])}, "
                f"plan expected {tuple(stage.out_shape)}"
            )
    logits = value
    return logits, softmax(logits)
