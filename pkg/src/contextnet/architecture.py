"""Two-branch segmentation network assembly.

The network pairs a deep context branch running on an aggressively
downsampled copy of the image with a shallow detail branch running at full
resolution, fuses the two at 1/8 of the input size, and classifies with a
single 1x1 convolution.  Variants differ only in how much the context branch
input is downsampled: factor 8, 4 or 2 (full resolution divided by 8/4/2).

Context branch layout on its downsampled input, widths at multiplier 1.0:

    3x3 conv stride 2            -> 32
    bottleneck t=1  x1 stride 1  -> 32
    bottleneck t=6  x1 stride 1  -> 32
    bottleneck t=6  x3 stride 2  -> 48
    bottleneck t=6  x3 stride 2  -> 64
    bottleneck t=6  x2 stride 1  -> 96
    bottleneck t=6  x2 stride 1  -> 128
    1x1 conv stride 1            -> 128

Each bottleneck expands by t with a 1x1 conv, filters with a 3x3 depthwise
conv carrying the stride, and projects back with a linear 1x1 conv; the
identity shortcut is added whenever input and output shapes match.  Within a
repeated group only the first block carries the stride.

The detail branch is four layers: one standard 3x3 conv then three separable
(depthwise + pointwise) convs, widths 32/64/128/128, strides 2/2/2/1, with no
nonlinearity between a depthwise kernel and its pointwise projection.

Fusion upsamples the context feature back to 1/8 resolution, refines it with
a dilation-4 depthwise conv and a linear 1x1 conv, projects the detail
feature with a linear 1x1 conv, adds the two and applies the activation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import ConfigError, GraphError
from .graphdef import GraphBuilder, GraphSpec, LayerSpec, ParamSpec, validate_graph

VARIANT_DOWNSAMPLE = {"cn18": 8, "cn14": 4, "cn12": 2}

PPM_BINS = (1, 2, 3, 6)


@dataclass(frozen=True)
class BottleneckSpec:
    """One group of inverted residual blocks: expansion, width, repeats, stride."""

    expansion: int
    channels: int
    repeats: int
    stride: int


CONTEXT_STAGES = (
    BottleneckSpec(1, 32, 1, 1),
    BottleneckSpec(6, 32, 1, 1),
    BottleneckSpec(6, 48, 3, 2),
    BottleneckSpec(6, 64, 3, 2),
    BottleneckSpec(6, 96, 2, 1),
    BottleneckSpec(6, 128, 2, 1),
)

CONTEXT_STEM_WIDTH = 32
CONTEXT_OUT_WIDTH = 128
DETAIL_WIDTHS = (32, 64, 128, 128)
DETAIL_STRIDES = (2, 2, 2, 1)
FUSION_DILATION = 4


@dataclass(frozen=True)
class ContextNetConfig:
    """Everything needed to build one network instance."""

    num_classes: int
    input_size: tuple[int, int] = (1024, 2048)
    context_downsample: int = 4
    width_multiplier: float = 1.0
    use_ppm: bool = False
    dropout_rate: float = 0.1
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def validate(self) -> None:
        h, w = self.input_size
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.context_downsample not in (2, 4, 8):
            raise ConfigError(
                f"context_downsample must be 2, 4 or 8, got {self.context_downsample}")
        step = 8 * self.context_downsample
        if h % step or w % step:
            raise ConfigError(
                f"input size {h}x{w} must be divisible by {step} "
                f"(8x the context downsample factor)")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.use_ppm:
            ch = h // step
            cw = w // step
            if ch < max(PPM_BINS) or cw < max(PPM_BINS):
                raise ConfigError(
                    f"pyramid pooling needs a context feature of at least "
                    f"{max(PPM_BINS)}x{max(PPM_BINS)}, got {ch}x{cw}")


def variant_config(name: str, **kwargs) -> ContextNetConfig:
    """Config for a named variant: cn18, cn14 or cn12."""
    if name not in VARIANT_DOWNSAMPLE:
        raise ConfigError(
            f"unknown variant {name!r}, expected one of {sorted(VARIANT_DOWNSAMPLE)}")
    return ContextNetConfig(context_downsample=VARIANT_DOWNSAMPLE[name], **kwargs)


def scaled_width(base: int, multiplier: float) -> int:
    """Scale a channel count, rounding to a multiple of 8 with a floor of 8."""
    return max(8, int(base * multiplier / 8 + 0.5) * 8)


def _add_bottleneck(gb: GraphBuilder, name: str, src: str, c_out: int,
                    expansion: int, stride: int, cfg: ContextNetConfig) -> str:
    """Append one inverted residual block; returns the output layer name."""
    c_in = gb.shape(src)[2]
    expanded = expansion * c_in
    x = gb.conv(f"{name}/expand", src, expanded, k=1)
    x = gb.batch_norm(f"{name}/expand_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6(f"{name}/expand_relu", x)
    x = gb.depthwise(f"{name}/dw", x, k=3, stride=stride)
    x = gb.batch_norm(f"{name}/dw_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6(f"{name}/dw_relu", x)
    x = gb.conv(f"{name}/project", x, c_out, k=1)
    x = gb.batch_norm(f"{name}/project_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    if stride == 1 and c_in == c_out:
        x = gb.add(f"{name}/add", x, src)
    return x


def _add_context_branch(gb: GraphBuilder, cfg: ContextNetConfig, src: str) -> str:
    m = cfg.width_multiplier
    x = src
    if cfg.context_downsample > 1:
        x = gb.pool_down("context/pool", x, cfg.context_downsample)
    x = gb.conv("context/conv_in", x, scaled_width(CONTEXT_STEM_WIDTH, m), k=3, stride=2)
    x = gb.batch_norm("context/conv_in_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6("context/conv_in_relu", x)
    for si, stage in enumerate(CONTEXT_STAGES, start=1):
        width = scaled_width(stage.channels, m)
        for r in range(stage.repeats):
            stride = stage.stride if r == 0 else 1
            x = _add_bottleneck(gb, f"context/b{si}_{r}", x, width,
                                stage.expansion, stride, cfg)
    x = gb.conv("context/conv_out", x, scaled_width(CONTEXT_OUT_WIDTH, m), k=1)
    x = gb.batch_norm("context/conv_out_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6("context/conv_out_relu", x)
    return x


def _add_ppm(gb: GraphBuilder, cfg: ContextNetConfig, src: str) -> str:
    """Pyramid pooling over the context feature, concat and 1x1 reduce."""
    h, w, c = gb.shape(src)
    branch_width = max(8, c // len(PPM_BINS))
    parts = [src]
    for b in PPM_BINS:
        x = gb.pool_bins(f"ppm/pool{b}", src, b)
        x = gb.conv(f"ppm/red{b}", x, branch_width, k=1)
        x = gb.batch_norm(f"ppm/red{b}_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
        x = gb.relu6(f"ppm/red{b}_relu", x)
        x = gb.resize(f"ppm/up{b}", x, h, w)
        parts.append(x)
    x = gb.concat("ppm/concat", parts)
    x = gb.conv("ppm/conv", x, c, k=1)
    x = gb.batch_norm("ppm/conv_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6("ppm/conv_relu", x)
    return x


def _add_detail_branch(gb: GraphBuilder, cfg: ContextNetConfig, src: str) -> str:
    m = cfg.width_multiplier
    w1, w2, w3, w4 = (scaled_width(c, m) for c in DETAIL_WIDTHS)
    x = gb.conv("detail/conv_in", src, w1, k=3, stride=DETAIL_STRIDES[0])
    x = gb.batch_norm("detail/conv_in_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6("detail/conv_in_relu", x)
    for i, (width, stride) in enumerate(zip((w2, w3, w4), DETAIL_STRIDES[1:]), start=2):
        # separable conv: the depthwise stage feeds the pointwise projection
        # directly, with no activation in between
        x = gb.depthwise(f"detail/sep{i}/dw", x, k=3, stride=stride)
        x = gb.batch_norm(f"detail/sep{i}/dw_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
        x = gb.conv(f"detail/sep{i}/pw", x, width, k=1)
        x = gb.batch_norm(f"detail/sep{i}/pw_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
        x = gb.relu6(f"detail/sep{i}/relu", x)
    return x


def _add_fusion(gb: GraphBuilder, cfg: ContextNetConfig, ctx: str, det: str) -> str:
    det_c = gb.shape(det)[2]
    x = gb.upsample("fuse/up", ctx, cfg.context_downsample)
    x = gb.depthwise("fuse/dw", x, k=3, dilation=FUSION_DILATION)
    x = gb.batch_norm("fuse/dw_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.relu6("fuse/dw_relu", x)
    x = gb.conv("fuse/ctx", x, det_c, k=1)
    cx = gb.batch_norm("fuse/ctx_bn", x, cfg.bn_epsilon, cfg.bn_momentum)
    d = gb.conv("fuse/det", det, det_c, k=1)
    d = gb.batch_norm("fuse/det_bn", d, cfg.bn_epsilon, cfg.bn_momentum)
    x = gb.add("fuse/add", cx, d)
    x = gb.relu6("fuse/relu", x)
    return x


def build_contextnet(cfg: ContextNetConfig) -> GraphSpec:
    """Assemble the full two-branch network for one config."""
    cfg.validate()
    h, w = cfg.input_size
    gb = GraphBuilder((h, w, 3))
    ctx = _add_context_branch(gb, cfg, "input")
    aux = gb.conv("aux/conv", ctx, cfg.num_classes, k=1, bias=True)
    feat = _add_ppm(gb, cfg, ctx) if cfg.use_ppm else ctx
    det = _add_detail_branch(gb, cfg, "input")
    fused = _add_fusion(gb, cfg, feat, det)
    x = gb.dropout("head/drop", fused, cfg.dropout_rate)
    x = gb.conv("head/conv", x, cfg.num_classes, k=1, bias=True)
    x = gb.upsample("head/up", x, 8)
    probs = gb.softmax("head/softmax", x)
    return gb.build({
        "logits": x,
        "probs": probs,
        "aux_logits": aux,
        "context_feature": feat,
        "detail_feature": det,
        "fused": fused,
    })


def build_context_branch(cfg: ContextNetConfig) -> GraphSpec:
    """Context branch only, as a standalone graph over the full-size input."""
    cfg.validate()
    h, w = cfg.input_size
    gb = GraphBuilder((h, w, 3))
    ctx = _add_context_branch(gb, cfg, "input")
    return gb.build({"out": ctx})


def build_detail_branch(cfg: ContextNetConfig) -> GraphSpec:
    """Detail branch only, as a standalone graph."""
    cfg.validate()
    h, w = cfg.input_size
    gb = GraphBuilder((h, w, 3))
    det = _add_detail_branch(gb, cfg, "input")
    return gb.build({"out": det})


# -- accounting ---------------------------------------------------------------


def per_layer_params(graph: GraphSpec, trainable_only: bool = True) -> dict:
    """Map layer name -> parameter count."""
    out = {}
    for layer in graph.layers:
        n = 0
        for p in layer.params:
            if trainable_only and not p.trainable:
                continue
            n += int(np.prod(p.shape))
        out[layer.name] = n
    return out


def count_params(graph: GraphSpec, trainable_only: bool = True) -> int:
    """Total parameter count (trainable only by default; buffers excluded)."""
    return sum(per_layer_params(graph, trainable_only).values())


def per_layer_macs(graph: GraphSpec) -> dict:
    """Map layer name -> multiply-accumulate count for a batch of one.

    Only convolution work is counted: k^2 * c_in * c_out * out_h * out_w for
    standard convs and k^2 * c * out_h * out_w for depthwise.  Everything
    else (BN, activations, resizing, pooling) is reported as zero.
    """
    out = {}
    for layer in graph.layers:
        macs = 0
        if layer.kind in ("conv", "depthwise"):
            kshape = layer.params[0].shape
            oh, ow, _ = layer.out_shape
            if layer.kind == "conv":
                macs = kshape[0] * kshape[1] * kshape[2] * kshape[3] * oh * ow
            else:
                macs = kshape[0] * kshape[1] * kshape[2] * oh * ow
        out[layer.name] = macs
    return out


def count_flops(graph: GraphSpec) -> tuple[int, int]:
    """Total (MACs, FLOPs) for a batch of one; FLOPs counted as 2x MACs."""
    macs = sum(per_layer_macs(graph).values())
    return macs, 2 * macs


# -- batch-norm folding -------------------------------------------------------


def fold_batch_norm(graph: GraphSpec, params: dict) -> tuple[GraphSpec, dict]:
    """Fold every BN layer into its preceding convolution.

    Returns a new graph with the BN layers removed, their consumers rewired to
    the convolutions, and a new parameter dict with rescaled kernels and
    merged biases.  The originals are not modified.  Raises GraphError if a
    BN layer does not directly follow a conv or depthwise layer, or if one
    convolution feeds more than one BN.
    """
    bn_layers = [l for l in graph.layers if l.kind == "batch_norm"]
    folded_into: dict = {}
    for bn in bn_layers:
        parent = graph.layer(bn.inputs[0])
        if parent.kind not in ("conv", "depthwise"):
            raise GraphError(
                f"cannot fold {bn.name!r}: its input {parent.name!r} is "
                f"{parent.kind}, not a convolution")
        if parent.name in folded_into:
            raise GraphError(
                f"cannot fold {bn.name!r}: {parent.name!r} already feeds "
                f"{folded_into[parent.name]!r}")
        folded_into[parent.name] = bn.name

    new_params = {k: v.copy() for k, v in params.items()}
    rename = {}
    new_layers = []
    for layer in graph.layers:
        if layer.kind == "batch_norm" and layer.inputs[0] in folded_into:
            bn = layer
            conv = graph.layer(bn.inputs[0])
            eps = bn.attrs["epsilon"]
            gamma = params[bn.param_key("gamma")]
            beta = params[bn.param_key("beta")]
            mean = params[bn.param_key("running_mean")]
            var = params[bn.param_key("running_var")]
            scale = gamma / np.sqrt(var + eps)
            kkey = conv.param_key("kernel")
            axis = 2 if conv.kind == "depthwise" else 3
            shape = [1, 1, 1, 1]
            shape[axis] = scale.size
            new_params[kkey] = (params[kkey] * scale.reshape(shape)).astype(
                params[kkey].dtype)
            bkey = conv.param_key("bias")
            old_bias = params.get(bkey, np.zeros_like(beta))
            new_params[bkey] = ((old_bias - mean) * scale + beta).astype(beta.dtype)
            for p in bn.params:
                del new_params[bn.param_key(p.name)]
            rename[bn.name] = conv.name
            # patch the already-emitted conv layer to carry the bias
            for i, emitted in enumerate(new_layers):
                if emitted.name == conv.name:
                    pspecs = [p for p in emitted.params if p.name != "bias"]
                    pspecs.append(ParamSpec("bias", (scale.size,)))
                    new_layers[i] = replace(emitted, params=tuple(pspecs))
                    break
            continue
        new_layers.append(layer)

    remapped = []
    for layer in new_layers:
        inputs = tuple(rename.get(s, s) for s in layer.inputs)
        remapped.append(replace(layer, inputs=inputs))
    outputs = {role: rename.get(name, name) for role, name in graph.outputs.items()}
    folded = GraphSpec(graph.input_shape, tuple(remapped), outputs)
    validate_graph(folded)
    return folded, new_params
