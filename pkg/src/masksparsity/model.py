"""Layer graphs, network builders, forward/backward composition and accounting."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import compute as K
from .compute import BatchNormState, ShapeError, Tensor

KINDS = ("conv", "bn", "relu", "avgpool", "linear", "add")
INPUT = -1


class GraphError(ValueError):
    """A ModelGraph violates one of its structural invariants."""


@dataclass
class LayerSpec:
    kind: str
    name: str
    inputs: tuple[int, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["inputs"] = tuple(d["inputs"])
        return cls(**d)


@dataclass
class ModelGraph:
    """Topologically ordered layers plus their parameters.

    ``weights`` holds conv weights and linear weight/bias keyed by
    ``"<layer>.weight"`` / ``"<layer>.bias"``; ``bn`` holds one
    BatchNormState per BN layer name. ``tape`` is scratch space written by a
    training-mode :func:`forward` and consumed by :func:`backward`.
    """

    layers: list[LayerSpec]
    weights: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)
    tape: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        validate(self)
        self.coupling_groups = find_coupling_groups(self)

    @property
    def index(self) -> dict[str, int]:
        return {layer.name: i for i, layer in enumerate(self.layers)}

    @property
    def bn_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "bn"]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def parameters(self) -> dict[str, Tensor]:
        """Trainable arrays by name; BN scale and shift appear as ``<bn>.gamma`` / ``<bn>.beta``."""
        params = {}
        for layer in self.layers:
            if layer.kind == "bn":
                params[f"{layer.name}.gamma"] = self.bn[layer.name].gamma
                params[f"{layer.name}.beta"] = self.bn[layer.name].beta
            elif layer.kind == "conv":
                params[f"{layer.name}.weight"] = self.weights[f"{layer.name}.weight"]
            elif layer.kind == "linear":
                params[f"{layer.name}.weight"] = self.weights[f"{layer.name}.weight"]
                params[f"{layer.name}.bias"] = self.weights[f"{layer.name}.bias"]
        return params

    def gammas(self) -> dict[str, Tensor]:
        return {name: self.bn[name].gamma for name in self.bn_names}

    def group_of(self, bn_name: str) -> list[str] | None:
        for group in self.coupling_groups:
            if bn_name in group:
                return group
        return None

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            layers=[copy.copy(layer) for layer in self.layers],
            weights={k: v.copy() for k, v in self.weights.items()},
            bn={k: v.astype(v.gamma.dtype) for k, v in self.bn.items()},
        )

    def astype(self, dtype) -> "ModelGraph":
        return ModelGraph(
            layers=[copy.copy(layer) for layer in self.layers],
            weights={k: v.astype(dtype) for k, v in self.weights.items()},
            bn={k: v.astype(dtype) for k, v in self.bn.items()},
        )

    def topology(self) -> list[dict]:
        return [layer.to_dict() for layer in self.layers]

    def fingerprint(self) -> str:
        """Hash of the layer table; equal for any two models sharing an architecture."""
        blob = json.dumps(self.topology(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def channel_counts(self) -> dict[str, int]:
        return {name: self.bn[name].channels for name in self.bn_names}


def _channels_out(layers: list[LayerSpec], idx: int) -> int:
    if idx == INPUT:
        return layers[0].in_channels
    return layers[idx].out_channels


def validate(graph: ModelGraph) -> None:
    layers = graph.layers
    if not layers:
        raise GraphError("empty graph")
    names = set()
    for i, layer in enumerate(layers):
        if layer.kind not in KINDS:
            raise GraphError(f"layer {layer.name}: unknown kind {layer.kind!r}")
        if layer.name in names:
            raise GraphError(f"duplicate layer name {layer.name}")
        names.add(layer.name)
        need = 2 if layer.kind == "add" else 1
        if len(layer.inputs) != need:
            raise GraphError(f"layer {layer.name}: expected {need} inputs, got {len(layer.inputs)}")
        for src in layer.inputs:
            if not INPUT <= src < i:
                raise GraphError(f"layer {layer.name}: input {src} breaks topological order")
        cin = _channels_out(layers, layer.inputs[0])
        if layer.kind == "conv":
            if layer.in_channels != cin:
                raise GraphError(f"conv {layer.name}: in_channels {layer.in_channels} != producer {cin}")
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if nxt is None or nxt.kind != "bn" or nxt.inputs != (i,):
                raise GraphError(f"conv {layer.name} must be immediately followed by a bn layer")
            w = graph.weights.get(f"{layer.name}.weight")
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            if w is None or w.shape != shape:
                raise GraphError(f"conv {layer.name}: weight missing or not {shape}")
        elif layer.kind == "linear":
            if layer.in_channels != cin:
                raise GraphError(f"linear {layer.name}: in_features {layer.in_channels} != producer {cin}")
            w = graph.weights.get(f"{layer.name}.weight")
            b = graph.weights.get(f"{layer.name}.bias")
            if w is None or w.shape != (layer.out_channels, layer.in_channels):
                raise GraphError(f"linear {layer.name}: bad weight")
            if b is None or b.shape != (layer.out_channels,):
                raise GraphError(f"linear {layer.name}: bad bias")
        elif layer.kind == "add":
            other = _channels_out(layers, layer.inputs[1])
            if cin != other:
                raise GraphError(f"add {layer.name}: channel counts {cin} and {other} differ")
            layer.in_channels = layer.out_channels = cin
        else:
            layer.in_channels = layer.out_channels = cin
            if layer.kind == "bn":
                state = graph.bn.get(layer.name)
                if state is None or state.channels != cin:
                    raise GraphError(f"bn {layer.name}: state missing or not {cin} channels")
    if layers[-1].kind != "linear":
        raise GraphError("the last layer must be the linear classifier")


def source_bns(graph: ModelGraph, idx: int) -> list[str]:
    """BN layers whose channels reach layer ``idx``'s output through channel-preserving ops."""
    layer = graph.layers[idx]
    if layer.kind == "bn":
        return [layer.name]
    if layer.kind in ("relu", "avgpool"):
        return source_bns(graph, layer.inputs[0]) if layer.inputs[0] != INPUT else []
    if layer.kind == "add":
        found = []
        for src in layer.inputs:
            if src != INPUT:
                found += [n for n in source_bns(graph, src) if n not in found]
        return found
    raise GraphError(f"channels of {layer.kind} layer {layer.name} do not come from a BN")


def input_bns(graph: ModelGraph, idx: int) -> list[str]:
    """BN layers feeding the input channel axis of layer ``idx``."""
    src = graph.layers[idx].inputs[0]
    return [] if src == INPUT else source_bns(graph, src)


def find_coupling_groups(graph: ModelGraph) -> list[list[str]]:
    """Union the BN layers meeting at every ``add`` node into channel-coupled groups."""
    parent: dict[str, str] = {}

    def root(n):
        while parent.setdefault(n, n) != n:
            n = parent[n]
        return n

    for i, layer in enumerate(graph.layers):
        if layer.kind == "add":
            members = source_bns(graph, i)
            for other in members[1:]:
                parent[root(other)] = root(members[0])
    groups: dict[str, list[str]] = {}
    for name in graph.bn_names:
        if name in parent:
            groups.setdefault(root(name), []).append(name)
    return [g for g in groups.values() if len(g) > 1]


def _fresh_params(layers: list[LayerSpec], seed: int):
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for layer in layers:
        if layer.kind == "conv":
            fan_out = layer.out_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            weights[f"{layer.name}.weight"] = (
                rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)
            ).astype(np.float32)
        elif layer.kind == "linear":
            bound = 1.0 / np.sqrt(layer.in_channels)
            weights[f"{layer.name}.weight"] = rng.uniform(
                -bound, bound, (layer.out_channels, layer.in_channels)
            ).astype(np.float32)
            weights[f"{layer.name}.bias"] = rng.uniform(
                -bound, bound, layer.out_channels
            ).astype(np.float32)
        elif layer.kind == "bn":
            bn[layer.name] = BatchNormState.create(layer.out_channels)
    return weights, bn


def reinitialized(graph: ModelGraph, seed: int) -> ModelGraph:
    """Same topology, fresh parameters: He-normal (fan-out) convs, unit gamma, zero beta."""
    layers = [copy.copy(layer) for layer in graph.layers]
    weights, bn = _fresh_params(layers, seed)
    return ModelGraph(layers, weights, bn)


def _assemble(layers: list[LayerSpec], seed: int) -> ModelGraph:
    for layer in layers:
        if layer.kind in ("bn", "relu", "avgpool", "add"):
            layer.in_channels = layer.out_channels = _channels_out(layers, layer.inputs[0])
    weights, bn = _fresh_params(layers, seed)
    return ModelGraph(layers, weights, bn)


class _Builder:
    def __init__(self, in_channels: int):
        self.layers: list[LayerSpec] = []
        self.in_channels = in_channels

    def add(self, kind, name, inputs, **attrs) -> int:
        self.layers.append(LayerSpec(kind, name, tuple(inputs), **attrs))
        return len(self.layers) - 1

    def conv_bn(self, name, src, cin, cout, kernel, stride, pad, bn_name=None) -> int:
        c = self.add("conv", name, [src], in_channels=cin, out_channels=cout,
                     kernel=kernel, stride=stride, pad=pad)
        return self.add("bn", bn_name or name.replace("conv", "bn"), [c])


def build_plain_cnn(widths: list[int], num_classes: int = 10, in_channels: int = 3,
                    seed: int = 0) -> ModelGraph:
    """Straight conv-bn-relu chain; a stride-2 conv wherever the width grows."""
    if not widths:
        raise ValueError("widths must be non-empty")
    b = _Builder(in_channels)
    src, cin = INPUT, in_channels
    for i, width in enumerate(widths):
        stride = 2 if i > 0 and width > widths[i - 1] else 1
        bn = b.conv_bn(f"conv{i + 1}", src, cin, width, 3, stride, 1)
        src = b.add("relu", f"relu{i + 1}", [bn])
        cin = width
    pool = b.add("avgpool", "pool", [src])
    b.add("linear", "fc", [pool], in_channels=cin, out_channels=num_classes)
    return _assemble(b.layers, seed)


def build_resnet_cifar(n_per_stage: int, num_classes: int = 10, in_channels: int = 3,
                       base_width: int = 16, seed: int = 0) -> ModelGraph:
    """CIFAR ResNet of depth 6n+2 with projection shortcuts at stage transitions."""
    if n_per_stage < 1:
        raise ValueError("n_per_stage must be >= 1")
    b = _Builder(in_channels)
    bn = b.conv_bn("stem.conv", INPUT, in_channels, base_width, 3, 1, 1, "stem.bn")
    x = b.add("relu", "stem.relu", [bn])
    cin = base_width
    for s in range(3):
        width = base_width * 2**s
        for j in range(n_per_stage):
            stride = 2 if s > 0 and j == 0 else 1
            p = f"s{s + 1}.b{j}"
            h = b.conv_bn(f"{p}.conv1", x, cin, width, 3, stride, 1, f"{p}.bn1")
            h = b.add("relu", f"{p}.relu1", [h])
            h = b.conv_bn(f"{p}.conv2", h, width, width, 3, 1, 1, f"{p}.bn2")
            if stride != 1 or cin != width:
                sc = b.conv_bn(f"{p}.proj", x, cin, width, 1, stride, 0, f"{p}.proj_bn")
            else:
                sc = x
            h = b.add("add", f"{p}.add", [h, sc])
            x = b.add("relu", f"{p}.relu2", [h])
            cin = width
    pool = b.add("avgpool", "pool", [x])
    b.add("linear", "fc", [pool], in_channels=cin, out_channels=num_classes)
    return _assemble(b.layers, seed)


def shapes(graph: ModelGraph, input_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
    """(channels, h, w) of every layer output; linear/avgpool outputs have h = w = 1."""
    out = []

    def get(idx):
        return (graph.in_channels, *input_hw) if idx == INPUT else out[idx]

    for layer in graph.layers:
        c, h, w = get(layer.inputs[0])
        if layer.kind == "conv":
            h, w = K.conv_output_hw(h, w, layer.kernel, layer.stride, layer.pad)
            c = layer.out_channels
        elif layer.kind in ("avgpool", "linear"):
            h = w = 1
            c = layer.out_channels
        elif layer.kind == "add" and get(layer.inputs[1]) != (c, h, w):
            raise ShapeError(f"add {layer.name}: operands {(c, h, w)} and {get(layer.inputs[1])}")
        out.append((c, h, w))
    return out


def layer_flops(graph: ModelGraph, input_hw: tuple[int, int]) -> dict[str, int]:
    dims = shapes(graph, input_hw)
    flops = {}
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv":
            _, h, w = dims[i]
            flops[layer.name] = layer.kernel**2 * layer.in_channels * layer.out_channels * h * w
        elif layer.kind == "linear":
            flops[layer.name] = layer.in_channels * layer.out_channels
    return flops


def flops_count(graph: ModelGraph, input_hw: tuple[int, int] = (32, 32)) -> int:
    """Multiply-accumulates of conv and linear layers; BN, ReLU and pooling count zero."""
    return sum(layer_flops(graph, input_hw).values())


def param_count(graph: ModelGraph) -> int:
    return int(sum(p.size for p in graph.parameters().values()))


def forward(graph: ModelGraph, x: Tensor, training: bool = False) -> Tensor:
    """Run the graph; training mode uses batch statistics and records a tape for backward."""
    if x.ndim != 4 or x.shape[1] != graph.in_channels:
        raise ShapeError(f"input {tuple(x.shape)} does not match stem with {graph.in_channels} channels")
    outs: list[Tensor] = []
    caches: dict[int, object] = {}

    def get(idx):
        return x if idx == INPUT else outs[idx]

    for i, layer in enumerate(graph.layers):
        a = get(layer.inputs[0])
        if layer.kind == "conv":
            y = K.conv2d_forward(a, graph.weights[f"{layer.name}.weight"], layer.stride, layer.pad)
        elif layer.kind == "bn":
            y, caches[i] = K.batchnorm_forward(a, graph.bn[layer.name], training)
        elif layer.kind == "relu":
            y = K.relu_forward(a)
        elif layer.kind == "add":
            y = a + get(layer.inputs[1])
        elif layer.kind == "avgpool":
            y = K.global_avgpool_forward(a)
        else:
            y = K.linear_forward(a, graph.weights[f"{layer.name}.weight"],
                                 graph.weights[f"{layer.name}.bias"])
        outs.append(y)
    graph.tape = {"input": x, "outs": outs, "caches": caches} if training else None
    return outs[-1]


def backward(graph: ModelGraph, grad_logits: Tensor) -> dict[str, Tensor]:
    """Parameter gradients for the last training-mode forward, keyed like ``parameters()``."""
    if graph.tape is None:
        raise RuntimeError("backward needs a preceding training-mode forward")
    x, outs, caches = graph.tape["input"], graph.tape["outs"], graph.tape["caches"]
    grads: dict[str, Tensor] = {}
    pending: dict[int, Tensor] = {len(graph.layers) - 1: grad_logits}

    def get(idx):
        return x if idx == INPUT else outs[idx]

    def push(idx, g):
        if idx == INPUT:
            return
        pending[idx] = pending[idx] + g if idx in pending else g

    for i in range(len(graph.layers) - 1, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        layer = graph.layers[i]
        src = layer.inputs[0]
        if layer.kind == "conv":
            w = graph.weights[f"{layer.name}.weight"]
            if src == INPUT:
                grads[f"{layer.name}.weight"] = K.conv2d_grad_weight(g, x, w, layer.stride, layer.pad)
            else:
                gx, grads[f"{layer.name}.weight"] = K.conv2d_backward(
                    g, get(src), w, layer.stride, layer.pad
                )
                push(src, gx)
        elif layer.kind == "bn":
            gx, gg, gb = K.batchnorm_backward(g, caches[i])
            grads[f"{layer.name}.gamma"] = gg
            grads[f"{layer.name}.beta"] = gb
            push(src, gx)
        elif layer.kind == "relu":
            push(src, K.relu_backward(g, outs[i]))
        elif layer.kind == "add":
            push(src, g)
            push(layer.inputs[1], g)
        elif layer.kind == "avgpool":
            push(src, K.global_avgpool_backward(g, get(src).shape))
        else:
            w = graph.weights[f"{layer.name}.weight"]
            gx, gw, gb = K.linear_backward(g, get(src), w)
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
            push(src, gx)
    return grads


def predict(graph: ModelGraph, images: Tensor, batch_size: int = 500) -> np.ndarray:
    preds = [
        forward(graph, images[i : i + batch_size], training=False).argmax(axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(graph: ModelGraph, images: Tensor, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(graph, images) == labels) * 100.0)
