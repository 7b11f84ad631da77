"""Declarative computation graphs.

A GraphSpec is an immutable, topologically ordered list of layers plus an
input shape and a mapping of named outputs.  It carries no parameter values;
those live in a flat dict keyed "layer_name.param_name" so checkpoints,
optimizers and pruning can treat the model as plain arrays.

Layer kinds and their attrs:
    input       ()                          the fed tensor, first layer only
    conv        stride, dilation, padding   params: kernel (+ bias)
    depthwise   stride, dilation, padding   params: kernel (+ bias)
    batch_norm  epsilon, momentum           params: gamma, beta + running buffers
    relu6       ()
    add         ()                          two inputs, same shape
    upsample    factor                      bilinear, integer factor
    resize      out_h, out_w                bilinear to explicit size
    pool_down   factor                      average pool, factor must divide
    pool_bins   bins                        adaptive average pool to bins x bins
    dropout     rate
    softmax     ()
    concat      ()                          n inputs along channels

Shapes are stored per layer as (h, w, c); the batch axis is implicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import GraphError

LAYER_KINDS = frozenset({
    "input", "conv", "depthwise", "batch_norm", "relu6", "add", "upsample",
    "resize", "pool_down", "pool_bins", "dropout", "softmax", "concat",
})


@dataclass(frozen=True)
class ParamSpec:
    """One named parameter of a layer.

    trainable=False marks running buffers; decay=True opts the parameter into
    l2 weight decay (standard and pointwise conv kernels only).
    """

    name: str
    shape: tuple[int, ...]
    trainable: bool = True
    decay: bool = False


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    out_shape: tuple[int, int, int]
    attrs: dict = field(default_factory=dict)
    params: tuple[ParamSpec, ...] = ()

    def param_key(self, local: str) -> str:
        return f"{self.name}.{local}"


@dataclass(frozen=True)
class GraphSpec:
    """Validated, topologically ordered network description."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    outputs: dict

    @cached_property
    def _by_name(self) -> dict:
        return {l.name: l for l in self.layers}

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"no layer named {name!r}") from None

    def has_layer(self, name: str) -> bool:
        return name in self._by_name

    def output_layer(self, role: str) -> LayerSpec:
        if role not in self.outputs:
            raise GraphError(f"graph has no output role {role!r}")
        return self.layer(self.outputs[role])

    def param_items(self) -> Iterator[tuple[str, LayerSpec, ParamSpec]]:
        """Yield (flat key, owning layer, spec) for every parameter."""
        for layer in self.layers:
            for p in layer.params:
                yield layer.param_key(p.name), layer, p

    def param_shapes(self) -> dict:
        return {key: p.shape for key, _, p in self.param_items()}

    def trainable_keys(self) -> list[str]:
        return [key for key, _, p in self.param_items() if p.trainable]

    def decay_keys(self) -> list[str]:
        return [key for key, _, p in self.param_items() if p.decay]

    @cached_property
    def consumers(self) -> dict:
        """Map layer name -> names of layers that read it."""
        out: dict = {l.name: [] for l in self.layers}
        for layer in self.layers:
            for src in layer.inputs:
                out[src].append(layer.name)
        return out


def infer_shape(layer: LayerSpec, in_shapes: list[tuple[int, int, int]]
                ) -> tuple[int, int, int]:
    """Output (h, w, c) of a layer given its input shapes."""
    kind, a = layer.kind, layer.attrs
    if kind == "input":
        return layer.out_shape
    if kind in ("conv", "depthwise"):
        h, w, c = in_shapes[0]
        kshape = layer.params[0].shape
        kh, kw = kshape[0], kshape[1]
        if kind == "conv":
            if kshape[2] != c:
                raise GraphError(
                    f"layer {layer.name!r}: kernel expects {kshape[2]} channels, input has {c}")
            cout = kshape[3]
        else:
            if kshape[2] != c or kshape[3] != 1:
                raise GraphError(
                    f"layer {layer.name!r}: depthwise kernel {kshape} does not match {c} channels")
            cout = c
        oh, ow = ops.conv_output_hw(h, w, kh, kw, a["stride"], a["dilation"], a["padding"])
        return oh, ow, cout
    if kind in ("batch_norm", "relu6", "dropout", "softmax"):
        return in_shapes[0]
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise GraphError(
                f"layer {layer.name!r}: add inputs differ, {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]
    if kind == "upsample":
        h, w, c = in_shapes[0]
        return h * a["factor"], w * a["factor"], c
    if kind == "resize":
        return a["out_h"], a["out_w"], in_shapes[0][2]
    if kind == "pool_down":
        h, w, c = in_shapes[0]
        f = a["factor"]
        if h % f or w % f:
            raise GraphError(
                f"layer {layer.name!r}: pool factor {f} does not divide {h}x{w}")
        return h // f, w // f, c
    if kind == "pool_bins":
        h, w, c = in_shapes[0]
        b = a["bins"]
        if b > h or b > w:
            raise GraphError(f"layer {layer.name!r}: {b} bins do not fit {h}x{w}")
        return b, b, c
    if kind == "concat":
        h, w = in_shapes[0][:2]
        for s in in_shapes[1:]:
            if s[:2] != (h, w):
                raise GraphError(f"layer {layer.name!r}: concat spatial shapes differ")
        return h, w, sum(s[2] for s in in_shapes)
    raise GraphError(f"layer {layer.name!r}: unknown kind {kind!r}")


_ARITY = {"input": 0, "add": 2}


def validate_graph(g: GraphSpec) -> None:
    """Check ordering, wiring, shapes and parameter declarations; raise GraphError."""
    if not g.layers:
        raise GraphError("graph has no layers")
    if g.layers[0].kind != "input":
        raise GraphError("first layer must be the input node")
    if g.layers[0].out_shape != tuple(g.input_shape):
        raise GraphError("input layer shape does not match graph input_shape")
    seen: dict = {}
    param_keys: set = set()
    for layer in g.layers:
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        if layer.name in seen:
            raise GraphError(f"duplicate layer name {layer.name!r}")
        if " " in layer.name:
            raise GraphError(f"layer name {layer.name!r} must not contain spaces")
        want = _ARITY.get(layer.kind, None if layer.kind == "concat" else 1)
        if layer.kind == "concat":
            if len(layer.inputs) < 2:
                raise GraphError(f"layer {layer.name!r}: concat needs at least two inputs")
        elif len(layer.inputs) != want:
            raise GraphError(
                f"layer {layer.name!r}: kind {layer.kind} takes {want} inputs, "
                f"got {len(layer.inputs)}")
        for src in layer.inputs:
            if src not in seen:
                raise GraphError(
                    f"layer {layer.name!r}: input {src!r} is not defined earlier in the graph")
        for p in layer.params:
            if "." in p.name or " " in p.name:
                raise GraphError(
                    f"layer {layer.name!r}: bad parameter name {p.name!r}")
            key = layer.param_key(p.name)
            if key in param_keys:
                raise GraphError(f"duplicate parameter key {key!r}")
            param_keys.add(key)
        in_shapes = [seen[s] for s in layer.inputs]
        got = infer_shape(layer, in_shapes)
        if tuple(got) != tuple(layer.out_shape):
            raise GraphError(
                f"layer {layer.name!r}: declared shape {layer.out_shape} but "
                f"inputs give {got}")
        seen[layer.name] = tuple(layer.out_shape)
    for role, name in g.outputs.items():
        if name not in seen:
            raise GraphError(f"output {role!r} points at unknown layer {name!r}")


class GraphBuilder:
    """Convenience for assembling a GraphSpec layer by layer.

    Each method appends one layer, computes its shape and returns the layer
    name so calls chain naturally.
    """

    def __init__(self, input_shape: tuple[int, int, int], input_name: str = "input"):
        self.input_name = input_name
        self._layers: list[LayerSpec] = [
            LayerSpec(input_name, "input", (), tuple(input_shape))]
        self._shapes = {input_name: tuple(input_shape)}

    def shape(self, name: str) -> tuple[int, int, int]:
        if name not in self._shapes:
            raise GraphError(f"unknown layer {name!r}")
        return self._shapes[name]

    def _append(self, layer: LayerSpec) -> str:
        if layer.name in self._shapes:
            raise GraphError(f"duplicate layer name {layer.name!r}")
        if " " in layer.name:
            raise GraphError(f"layer name {layer.name!r} contains a space")
        in_shapes = [self.shape(s) for s in layer.inputs]
        shape = infer_shape(layer, in_shapes)
        self._layers.append(LayerSpec(layer.name, layer.kind, layer.inputs, shape,
                                      layer.attrs, layer.params))
        self._shapes[layer.name] = shape
        return layer.name

    def conv(self, name: str, src: str, c_out: int, k: int = 1, stride: int = 1,
             dilation: int = 1, padding: str = ops.PAD_SAME, bias: bool = False,
             decay: bool = True) -> str:
        c_in = self.shape(src)[2]
        params = [ParamSpec("kernel", (k, k, c_in, c_out), decay=decay)]
        if bias:
            params.append(ParamSpec("bias", (c_out,)))
        return self._append(LayerSpec(
            name, "conv", (src,), (0, 0, 0),
            {"stride": stride, "dilation": dilation, "padding": padding},
            tuple(params)))

    def depthwise(self, name: str, src: str, k: int = 3, stride: int = 1,
                  dilation: int = 1, padding: str = ops.PAD_SAME,
                  bias: bool = False) -> str:
        c = self.shape(src)[2]
        params = [ParamSpec("kernel", (k, k, c, 1))]
        if bias:
            params.append(ParamSpec("bias", (c,)))
        return self._append(LayerSpec(
            name, "depthwise", (src,), (0, 0, 0),
            {"stride": stride, "dilation": dilation, "padding": padding},
            tuple(params)))

    def batch_norm(self, name: str, src: str, epsilon: float = 1e-3,
                   momentum: float = 0.99) -> str:
        c = self.shape(src)[2]
        params = (ParamSpec("gamma", (c,)), ParamSpec("beta", (c,)),
                  ParamSpec("running_mean", (c,), trainable=False),
                  ParamSpec("running_var", (c,), trainable=False))
        return self._append(LayerSpec(
            name, "batch_norm", (src,), (0, 0, 0),
            {"epsilon": epsilon, "momentum": momentum}, params))

    def relu6(self, name: str, src: str) -> str:
        return self._append(LayerSpec(name, "relu6", (src,), (0, 0, 0)))

    def add(self, name: str, a: str, b: str) -> str:
        return self._append(LayerSpec(name, "add", (a, b), (0, 0, 0)))

    def upsample(self, name: str, src: str, factor: int) -> str:
        return self._append(LayerSpec(name, "upsample", (src,), (0, 0, 0),
                                      {"factor": factor}))

    def resize(self, name: str, src: str, out_h: int, out_w: int) -> str:
        return self._append(LayerSpec(name, "resize", (src,), (0, 0, 0),
                                      {"out_h": out_h, "out_w": out_w}))

    def pool_down(self, name: str, src: str, factor: int) -> str:
        return self._append(LayerSpec(name, "pool_down", (src,), (0, 0, 0),
                                      {"factor": factor}))

    def pool_bins(self, name: str, src: str, bins: int) -> str:
        return self._append(LayerSpec(name, "pool_bins", (src,), (0, 0, 0),
                                      {"bins": bins}))

    def dropout(self, name: str, src: str, rate: float) -> str:
        return self._append(LayerSpec(name, "dropout", (src,), (0, 0, 0),
                                      {"rate": rate}))

    def softmax(self, name: str, src: str) -> str:
        return self._append(LayerSpec(name, "softmax", (src,), (0, 0, 0)))

    def concat(self, name: str, srcs: list[str]) -> str:
        return self._append(LayerSpec(name, "concat", tuple(srcs), (0, 0, 0)))

    def build(self, outputs: dict) -> GraphSpec:
        g = GraphSpec(self._shapes[self.input_name], tuple(self._layers), dict(outputs))
        validate_graph(g)
        return g


def init_params(graph: GraphSpec, rng: np.random.Generator,
                dtype=np.float32) -> dict:
    """Fresh parameter store for a graph.

    Conv kernels get He-normal init scaled by fan-in (per-channel fan-in for
    depthwise), biases and BN beta start at zero, BN gamma at one, running
    variance at one.
    """
    params: dict = {}
    for key, layer, p in graph.param_items():
        if p.name == "kernel":
            shape = p.shape
            if layer.kind == "depthwise":
                fan_in = shape[0] * shape[1]
            else:
                fan_in = shape[0] * shape[1] * shape[2]
            std = float(np.sqrt(2.0 / fan_in))
            params[key] = rng.normal(0.0, std, size=shape).astype(dtype)
        elif p.name == "gamma":
            params[key] = np.ones(p.shape, dtype=dtype)
        elif p.name == "running_var":
            params[key] = np.ones(p.shape, dtype=dtype)
        else:
            params[key] = np.zeros(p.shape, dtype=dtype)
    return params
