"""Graph execution, reverse-mode differentiation, losses and the optimizer.

The executor interprets a GraphSpec directly: forward walks the layers in
order and records every activation plus whatever each op needs for its
backward pass (a Tape); backward walks the layers in reverse, seeding
gradients at named output layers and accumulating into a flat gradient dict
keyed like the parameter store.

Everything is dtype-generic: run the same graph with float64 parameters and
input to get float64 gradients, which is what grad_check does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .data import downsample_labels
from .errors import GraphError, NumericsError, ShapeError
from .graphdef import GraphSpec, LayerSpec


@dataclass
class Tape:
    """Forward-pass record: all activations plus per-layer saved state."""

    values: dict
    saved: dict
    training: bool

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def _conv_params(layer: LayerSpec, params: dict) -> ops.ConvParams:
    bias = None
    if any(p.name == "bias" for p in layer.params):
        bias = params[layer.param_key("bias")]
    return ops.ConvParams(
        kernel=params[layer.param_key("kernel")], bias=bias,
        stride=layer.attrs["stride"], dilation=layer.attrs["dilation"],
        padding=layer.attrs["padding"])


def _bn_params(layer: LayerSpec, params: dict) -> ops.BatchNormParams:
    return ops.BatchNormParams(
        gamma=params[layer.param_key("gamma")],
        beta=params[layer.param_key("beta")],
        running_mean=params[layer.param_key("running_mean")],
        running_var=params[layer.param_key("running_var")],
        epsilon=layer.attrs["epsilon"], momentum=layer.attrs["momentum"])


def forward(graph: GraphSpec, params: dict, x: np.ndarray, *, training: bool = False,
            rng: Optional[np.random.Generator] = None,
            zero_layers: tuple = ()) -> Tape:
    """Run the graph on a batch; returns the Tape of all activations.

    training switches batch norm to batch statistics (updating the running
    buffers in place) and turns dropout on, which then requires rng.
    zero_layers names layers whose computed activation is replaced with
    zeros before being passed on; used for branch ablation studies.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(
            f"input shape {x.shape} does not match graph input "
            f"(n, {', '.join(str(d) for d in graph.input_shape)})")
    for name in zero_layers:
        if not graph.has_layer(name):
            raise GraphError(f"zero_layers names unknown layer {name!r}")
    values: dict = {}
    saved: dict = {}
    for layer in graph.layers:
        try:
            y, extra = _forward_layer(layer, params, values, x, training, rng)
        except ShapeError as e:
            raise GraphError(f"layer {layer.name!r}: {e}") from e
        if layer.name in zero_layers:
            y = np.zeros_like(y)
        values[layer.name] = y
        if extra is not None:
            saved[layer.name] = extra
    return Tape(values=values, saved=saved, training=training)


def _forward_layer(layer, params, values, x, training, rng):
    kind = layer.kind
    if kind == "input":
        return x, None
    src = values[layer.inputs[0]] if layer.inputs else None
    if kind == "conv":
        return ops.conv2d(src, _conv_params(layer, params)), None
    if kind == "depthwise":
        return ops.depthwise_conv2d(src, _conv_params(layer, params)), None
    if kind == "batch_norm":
        y, st = ops.batch_norm(src, _bn_params(layer, params), training)
        return y, st
    if kind == "relu6":
        return ops.relu6(src), None
    if kind == "add":
        return ops.add(src, values[layer.inputs[1]]), None
    if kind == "upsample":
        return ops.bilinear_upsample(src, layer.attrs["factor"]), None
    if kind == "resize":
        return ops.resize_bilinear(src, layer.attrs["out_h"], layer.attrs["out_w"]), None
    if kind == "pool_down":
        return ops.avg_pool_down(src, layer.attrs["factor"]), None
    if kind == "pool_bins":
        return ops.avg_pool_to_bins(src, layer.attrs["bins"]), None
    if kind == "dropout":
        rate = layer.attrs["rate"]
        if not training or rate == 0.0:
            return src, None
        if rng is None:
            raise ShapeError("dropout in training mode requires a random generator")
        mask = ops.dropout_mask(src.shape, rate, rng, dtype=src.dtype)
        return src * mask, {"mask": mask}
    if kind == "softmax":
        return ops.softmax(src), None
    if kind == "concat":
        return ops.concat_channels([values[s] for s in layer.inputs]), None
    raise GraphError(f"layer {layer.name!r}: unknown kind {kind!r}")


def backward(graph: GraphSpec, params: dict, tape: Tape, out_grads: dict
             ) -> tuple[dict, Optional[np.ndarray]]:
    """Reverse sweep from gradients seeded at named layers.

    out_grads maps layer name -> gradient of the objective with respect to
    that layer's activation.  Returns (trainable parameter gradients keyed
    like the parameter store, gradient with respect to the graph input).
    """
    vgrads: dict = {}

    def seed(name: str, g: np.ndarray) -> None:
        if name in vgrads:
            vgrads[name] = vgrads[name] + g
        else:
            vgrads[name] = g

    for name, g in out_grads.items():
        val = tape.values.get(name)
        if val is None:
            raise GraphError(f"out_grads names unknown layer {name!r}")
        if g.shape != val.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, activation is {val.shape}")
        seed(name, g)

    pgrads: dict = {}

    def add_pgrad(key: str, g: np.ndarray) -> None:
        if key in pgrads:
            pgrads[key] += g
        else:
            pgrads[key] = g.copy() if g.base is not None else g

    input_grad: Optional[np.ndarray] = None
    for layer in reversed(graph.layers):
        g = vgrads.pop(layer.name, None)
        if g is None:
            continue
        kind = layer.kind
        if kind == "input":
            input_grad = g if input_grad is None else input_grad + g
            continue
        src_name = layer.inputs[0]
        x_in = tape.values[src_name]
        if kind == "conv":
            p = _conv_params(layer, params)
            gx, gk, gb = ops.conv2d_backward(g, x_in, p)
            add_pgrad(layer.param_key("kernel"), gk)
            if gb is not None:
                add_pgrad(layer.param_key("bias"), gb)
            seed(src_name, gx)
        elif kind == "depthwise":
            p = _conv_params(layer, params)
            gx, gk, gb = ops.depthwise_conv2d_backward(g, x_in, p)
            add_pgrad(layer.param_key("kernel"), gk)
            if gb is not None:
                add_pgrad(layer.param_key("bias"), gb)
            seed(src_name, gx)
        elif kind == "batch_norm":
            p = _bn_params(layer, params)
            st = tape.saved.get(layer.name) if tape.training else None
            gx, ggamma, gbeta = ops.batch_norm_backward(g, x_in, p, st)
            add_pgrad(layer.param_key("gamma"), ggamma)
            add_pgrad(layer.param_key("beta"), gbeta)
            seed(src_name, gx)
        elif kind == "relu6":
            seed(src_name, ops.relu6_backward(g, x_in))
        elif kind == "add":
            seed(src_name, g)
            seed(layer.inputs[1], g)
        elif kind == "upsample":
            seed(src_name, ops.bilinear_upsample_backward(g, layer.attrs["factor"]))
        elif kind == "resize":
            seed(src_name, ops.resize_bilinear_backward(g, x_in.shape[1], x_in.shape[2]))
        elif kind == "pool_down":
            seed(src_name, ops.avg_pool_down_backward(g, layer.attrs["factor"]))
        elif kind == "pool_bins":
            seed(src_name, ops.avg_pool_to_bins_backward(g, x_in.shape[1], x_in.shape[2]))
        elif kind == "dropout":
            st = tape.saved.get(layer.name)
            seed(src_name, g if st is None else g * st["mask"])
        elif kind == "softmax":
            seed(src_name, ops.softmax_backward(g, tape.values[layer.name]))
        elif kind == "concat":
            off = 0
            for s in layer.inputs:
                c = tape.values[s].shape[3]
                seed(s, np.ascontiguousarray(g[..., off:off + c]))
                off += c
        else:
            raise GraphError(f"layer {layer.name!r}: unknown kind {kind!r}")
    return pgrads, input_grad


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_index: int = 255
                  ) -> tuple[float, np.ndarray]:
    """Pixelwise softmax cross-entropy, averaged over non-ignored pixels.

    Returns (loss, gradient w.r.t. logits).  Pixels whose label equals
    ignore_index contribute nothing; if every pixel is ignored the loss and
    gradient are exactly zero.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: logits must be rank 4, got {logits.shape}")
    if labels.shape != logits.shape[:3]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits "
            f"{logits.shape[:3]}")
    c = logits.shape[3]
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits)
    lab = labels[valid].astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise ShapeError(
            f"cross_entropy: label values must be in [0, {c}) or {ignore_index}, "
            f"found {int(lab.min())}..{int(lab.max())}")
    z = logits[valid]
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = float(-logp[np.arange(n_valid), lab].sum() / n_valid)
    gz = ez / sez
    gz[np.arange(n_valid), lab] -= 1.0
    grad = np.zeros_like(logits)
    grad[valid] = gz / n_valid
    return loss, grad


def contextnet_loss(final_logits: np.ndarray, aux_logits: Optional[np.ndarray],
                    labels: np.ndarray, aux_weight: float = 0.4,
                    ignore_index: int = 255
                    ) -> tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Main cross-entropy plus weighted auxiliary cross-entropy.

    The auxiliary head sits at a lower resolution, so labels are
    nearest-downsampled to its size.  Returns (total loss, gradient for the
    final logits, gradient for the aux logits or None).  aux_weight 0 (or
    aux_logits None) reduces to the plain loss with a zero aux gradient.
    """
    loss, grad_final = cross_entropy(final_logits, labels, ignore_index)
    if aux_logits is None or aux_weight == 0.0:
        g_aux = None if aux_logits is None else np.zeros_like(aux_logits)
        return loss, grad_final, g_aux
    fh = labels.shape[1] // aux_logits.shape[1]
    fw = labels.shape[2] // aux_logits.shape[2]
    if fh < 1 or fw < 1 or fh != fw or aux_logits.shape[1] * fh != labels.shape[1] \
            or aux_logits.shape[2] * fw != labels.shape[2]:
        raise ShapeError(
            f"aux logits {aux_logits.shape[1]}x{aux_logits.shape[2]} do not evenly "
            f"divide label size {labels.shape[1]}x{labels.shape[2]}")
    aux_labels = downsample_labels(labels, fh)
    aux_loss, g_aux = cross_entropy(aux_logits, aux_labels, ignore_index)
    return loss + aux_weight * aux_loss, grad_final, aux_weight * g_aux


# -- optimizer and schedule ---------------------------------------------------


@dataclass
class OptimizerState:
    """RMSprop accumulators: squared-gradient EMA and momentum buffers."""

    ms: dict = field(default_factory=dict)
    mom: dict = field(default_factory=dict)
    rho: float = 0.9
    momentum: float = 0.9
    eps: float = 1.0


def rmsprop_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """One in-place RMSprop-with-momentum update over the given gradients.

    ms <- rho*ms + (1-rho)*g^2; mom <- momentum*mom + lr*g/sqrt(ms + eps);
    w <- w - mom.  Raises NumericsError on any non-finite gradient.
    """
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for {key!r}")
        ms = state.ms.get(key)
        if ms is None:
            ms = state.ms[key] = np.zeros_like(g)
            state.mom[key] = np.zeros_like(g)
        mom = state.mom[key]
        ms *= state.rho
        ms += (1.0 - state.rho) * g * g
        mom *= state.momentum
        mom += lr * g / np.sqrt(ms + state.eps)
        params[key] -= mom


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.98) -> float:
    """Polynomial decay from base_lr to zero over max_iter steps."""
    if max_iter <= 0:
        raise ShapeError(f"max_iter must be positive, got {max_iter}")
    frac = min(max(iteration / max_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


# -- finite-difference validation --------------------------------------------


def grad_check(graph: GraphSpec, params: dict, x: np.ndarray, *,
               out_roles: Optional[tuple] = None, eps: float = 1e-5,
               seed: int = 0, max_entries: int = 48) -> dict:
    """Compare analytic gradients against central differences in float64.

    The objective is the inner product of each requested output activation
    with a fixed random cotangent.  Large tensors are spot-checked on a
    seeded random subset of max_entries entries.  The reported error per
    parameter is the worst entrywise |analytic - numeric| / max(1e-8,
    |numeric|).  Returns a report with per-parameter errors, the input error
    and the overall max.
    """
    roles = tuple(out_roles) if out_roles is not None else tuple(graph.outputs)
    out_names = [graph.outputs[r] for r in roles]
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    x64 = x.astype(np.float64)
    rng = np.random.default_rng(seed)
    drop_seed = int(rng.integers(2 ** 31))

    probe = forward(graph, {k: v.copy() for k, v in p64.items()}, x64,
                    training=True, rng=np.random.default_rng(drop_seed))
    cots = {n: rng.standard_normal(probe.values[n].shape) for n in out_names}

    def objective(pstore, xin) -> float:
        t = forward(graph, pstore, xin, training=True,
                    rng=np.random.default_rng(drop_seed))
        return float(sum((cots[n] * t.values[n]).sum() for n in out_names))

    run_params = {k: v.copy() for k, v in p64.items()}
    tape = forward(graph, run_params, x64, training=True,
                   rng=np.random.default_rng(drop_seed))
    pgrads, input_grad = backward(graph, run_params, tape,
                                  {n: cots[n] for n in out_names})

    def tensor_err(analytic, numeric_at, arr) -> float:
        flat = arr.reshape(-1)
        total = flat.size
        if total > max_entries:
            idx = rng.choice(total, size=max_entries, replace=False)
        else:
            idx = np.arange(total)
        a_vals, n_vals = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = numeric_at()
            flat[i] = old - eps
            fm = numeric_at()
            flat[i] = old
            n_vals.append((fp - fm) / (2.0 * eps))
            a_vals.append(float(analytic.reshape(-1)[i]))
        a_vals = np.array(a_vals)
        n_vals = np.array(n_vals)
        rel = np.abs(a_vals - n_vals) / np.maximum(1e-8, np.abs(n_vals))
        return float(rel.max(initial=0.0))

    report: dict = {"per_param": {}}
    scratch = {k: v.copy() for k, v in p64.items()}
    for key in graph.trainable_keys():
        analytic = pgrads.get(key)
        if analytic is None:
            analytic = np.zeros_like(scratch[key])
        err = tensor_err(analytic, lambda: objective(
            {k: (v if k == key else v.copy()) for k, v in scratch.items()}, x64),
            scratch[key])
        report["per_param"][key] = err
    if input_grad is None:
        input_grad = np.zeros_like(x64)
    report["input"] = tensor_err(
        input_grad, lambda: objective({k: v.copy() for k, v in scratch.items()}, x64), x64)
    report["max_rel_err"] = max([report["input"], *report["per_param"].values()])
    return report
