"""Structural filter pruning by l1 norm.

Pruning removes whole output filters from convolutions and propagates the
removal through the graph: BN vectors shrink with their conv, depthwise
layers follow whatever feeds them, consumers lose the matching input-channel
slices, and convolutions whose outputs meet at a residual add are forced to
share one keep-set so shapes stay consistent.

The progressive schedule goes wide-to-narrow: train at 2.0x the target
widths, then prune to 1.5x, 1.25x and finally 1.0x, fine-tuning between
stages.  Stage targets come from a reference builder so the final graph has
exactly the widths of a natively built narrow model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, GraphError
from .graphdef import GraphSpec, LayerSpec, ParamSpec, validate_graph


@dataclass(frozen=True)
class FilterRank:
    """Per-output-filter l1 norms of one layer, with the ascending order."""

    layer: str
    norms: np.ndarray
    order: np.ndarray


@dataclass(frozen=True)
class PruneSchedule:
    """Width multipliers, widest first, ending at the target 1.0."""

    multipliers: tuple = (2.0, 1.5, 1.25, 1.0)
    finetune_epochs: int = 20

    def validate(self) -> None:
        m = self.multipliers
        if len(m) < 2:
            raise ConfigError("schedule needs at least two multipliers")
        if any(b >= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"multipliers must strictly decrease, got {m}")
        if m[-1] != 1.0:
            raise ConfigError(f"schedule must end at 1.0, got {m[-1]}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")


def rank_filters_l1(kernel: np.ndarray, layer: str = "") -> FilterRank:
    """Rank output filters by the sum of absolute weights, lowest first.

    Ties break toward the lower index (stable sort), so an all-zero filter at
    position 0 is always the first pruning candidate.
    """
    if kernel.ndim != 4:
        raise GraphError(f"rank_filters_l1 expects a 4-D kernel, got {kernel.shape}")
    norms = np.abs(kernel).sum(axis=(0, 1, 2))
    order = np.argsort(norms, kind="stable")
    return FilterRank(layer=layer, norms=norms, order=order)


# -- channel bookkeeping ------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        p = self.parent.setdefault(a, a)
        if p != a:
            p = self.parent[a] = self.find(p)
        return p

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


_PASSTHROUGH = ("batch_norm", "relu6", "dropout", "softmax", "upsample",
                "resize", "pool_down", "pool_bins", "depthwise")


def _channel_sources(graph: GraphSpec) -> tuple[dict, _UnionFind]:
    """For every layer, the conv (or input/concat) its channels come from."""
    uf = _UnionFind()
    source: dict = {}
    for layer in graph.layers:
        if layer.kind == "input":
            source[layer.name] = "input"
        elif layer.kind == "conv":
            source[layer.name] = layer.name
        elif layer.kind in _PASSTHROUGH:
            source[layer.name] = source[layer.inputs[0]]
        elif layer.kind == "add":
            a = source[layer.inputs[0]]
            b = source[layer.inputs[1]]
            if isinstance(a, tuple) or isinstance(b, tuple):
                raise GraphError(
                    f"layer {layer.name!r}: cannot couple a residual add "
                    f"through a concat")
            uf.union(a, b)
            source[layer.name] = a
        elif layer.kind == "concat":
            source[layer.name] = tuple(source[s] for s in layer.inputs)
        else:
            raise GraphError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
    return source, uf


def coupling_groups(graph: GraphSpec) -> list[list[str]]:
    """Sets of conv layers that must share a keep-set, in topological order.

    The group containing the graph input is omitted: those channels are the
    image itself and cannot be pruned.
    """
    source, uf = _channel_sources(graph)
    groups: dict = {}
    order: dict = {l.name: i for i, l in enumerate(graph.layers)}
    for layer in graph.layers:
        if layer.kind == "conv":
            groups.setdefault(uf.find(layer.name), []).append(layer.name)
    root_of_input = uf.find("input")
    out = []
    for root, members in groups.items():
        if root == root_of_input:
            continue
        out.append(sorted(members, key=lambda n: order[n]))
    out.sort(key=lambda g: order[g[0]])
    return out


def _keep_from_norms(norms: np.ndarray, target: int) -> list[int]:
    """Indices of the target highest-norm filters, pruning ties low-index-first."""
    order = np.argsort(norms, kind="stable")
    drop = set(int(i) for i in order[:len(norms) - target])
    return [i for i in range(len(norms)) if i not in drop]


def prune_filters(graph: GraphSpec, params: dict, layer: str, keep
                  ) -> tuple[GraphSpec, dict]:
    """Remove the output filters of `layer` that are not in `keep`.

    The same keep-set is applied to every conv residually coupled with
    `layer`, and input-channel slices of all consumers are dropped to match.
    Returns a new (graph, params); the inputs are unchanged.
    """
    target_layer = graph.layer(layer)
    if target_layer.kind != "conv":
        raise GraphError(f"prune_filters targets conv layers, {layer!r} is "
                         f"{target_layer.kind}")
    c_out = target_layer.out_shape[2]
    keep = sorted(set(int(i) for i in keep))
    if not keep:
        raise GraphError(f"prune_filters: keep set for {layer!r} is empty")
    if keep[0] < 0 or keep[-1] >= c_out:
        raise GraphError(
            f"prune_filters: keep indices for {layer!r} outside [0, {c_out})")

    group = None
    for g in coupling_groups(graph):
        if layer in g:
            group = g
            break
    if group is None:
        raise GraphError(f"prune_filters: {layer!r} is not prunable (its "
                         f"channels are the graph input)")
    for member in group:
        mc = graph.layer(member).out_shape[2]
        if mc != c_out:
            raise GraphError(
                f"prune_filters: coupled layers {layer!r} and {member!r} have "
                f"widths {c_out} vs {mc}")

    keep_arr = np.asarray(keep, dtype=np.int64)
    group_set = set(group)

    # per-layer output channel selection, walked topologically
    sel: dict = {}
    new_layers = []
    new_params = dict(params)
    for ly in graph.layers:
        if ly.kind == "input":
            sel[ly.name] = np.arange(ly.out_shape[2])
            new_layers.append(ly)
            continue
        in_sel = sel[ly.inputs[0]]
        h, w, _ = ly.out_shape
        if ly.kind == "conv":
            out_sel = keep_arr if ly.name in group_set else np.arange(ly.out_shape[2])
            kkey = ly.param_key("kernel")
            kernel = params[kkey][:, :, in_sel, :][:, :, :, out_sel]
            new_params[kkey] = np.ascontiguousarray(kernel)
            pspecs = [ParamSpec("kernel", kernel.shape, decay=ly.params[0].decay)]
            if any(p.name == "bias" for p in ly.params):
                bkey = ly.param_key("bias")
                new_params[bkey] = np.ascontiguousarray(params[bkey][out_sel])
                pspecs.append(ParamSpec("bias", (len(out_sel),)))
            new_layers.append(replace(ly, out_shape=(h, w, len(out_sel)),
                                      params=tuple(pspecs)))
            sel[ly.name] = out_sel
        elif ly.kind == "depthwise":
            kkey = ly.param_key("kernel")
            kernel = params[kkey][:, :, in_sel, :]
            new_params[kkey] = np.ascontiguousarray(kernel)
            pspecs = [ParamSpec("kernel", kernel.shape)]
            if any(p.name == "bias" for p in ly.params):
                bkey = ly.param_key("bias")
                new_params[bkey] = np.ascontiguousarray(params[bkey][in_sel])
                pspecs.append(ParamSpec("bias", (len(in_sel),)))
            new_layers.append(replace(ly, out_shape=(h, w, len(in_sel)),
                                      params=tuple(pspecs)))
            sel[ly.name] = in_sel
        elif ly.kind == "batch_norm":
            pspecs = []
            for p in ly.params:
                key = ly.param_key(p.name)
                new_params[key] = np.ascontiguousarray(params[key][in_sel])
                pspecs.append(replace(p, shape=(len(in_sel),)))
            new_layers.append(replace(ly, out_shape=(h, w, len(in_sel)),
                                      params=tuple(pspecs)))
            sel[ly.name] = in_sel
        elif ly.kind == "add":
            other = sel[ly.inputs[1]]
            if len(in_sel) != len(other) or not np.array_equal(in_sel, other):
                raise GraphError(
                    f"layer {ly.name!r}: residual inputs were pruned with "
                    f"different keep-sets")
            new_layers.append(replace(ly, out_shape=(h, w, len(in_sel))))
            sel[ly.name] = in_sel
        elif ly.kind == "concat":
            parts = []
            off = 0
            for s in ly.inputs:
                parts.append(sel[s] + off)
                off += graph.layer(s).out_shape[2]
            cat = np.concatenate(parts)
            new_layers.append(replace(ly, out_shape=(h, w, len(cat))))
            sel[ly.name] = cat
        else:
            new_layers.append(replace(ly, out_shape=(h, w, len(in_sel))))
            sel[ly.name] = in_sel

    pruned = GraphSpec(graph.input_shape, tuple(new_layers), dict(graph.outputs))
    validate_graph(pruned)
    final_params = {key: new_params[key] for key, _, _ in pruned.param_items()}
    return pruned, final_params


@dataclass
class StageReport:
    """What one pruning stage did to each coupled group."""

    multiplier: float
    params_after: int
    kept: dict = field(default_factory=dict)  # group head -> (kept, had)
    finetune_metric: Optional[float] = None


def _group_width(graph: GraphSpec, group: list[str]) -> int:
    return graph.layer(group[0]).out_shape[2]


def progressive_prune(graph: GraphSpec, params: dict, schedule: PruneSchedule,
                      reference: Callable[[float], GraphSpec],
                      finetune: Optional[Callable] = None
                      ) -> tuple[GraphSpec, dict, list[StageReport]]:
    """Walk the schedule wide-to-narrow, pruning every group to its target.

    reference(multiplier) must build the same architecture at that width so
    stage targets (and the final widths) are exact.  finetune, when given, is
    called as finetune(graph, params, stage_index, multiplier) after each
    stage and may return a metric to record.  Classifier-width groups whose
    reference width never changes are left untouched by construction.
    """
    from .architecture import count_params  # local import to avoid a cycle

    schedule.validate()
    start_ref = reference(schedule.multipliers[0])
    for g in coupling_groups(graph):
        want = _group_width(start_ref, g)
        got = _group_width(graph, g)
        if want != got:
            raise ConfigError(
                f"graph width {got} at {g[0]!r} does not match the schedule's "
                f"first multiplier {schedule.multipliers[0]} (expected {want})")

    reports: list[StageReport] = []
    for stage_index, mult in enumerate(schedule.multipliers[1:]):
        ref = reference(mult)
        plans = []
        for group in coupling_groups(graph):
            current = _group_width(graph, group)
            targets = {ref.layer(n).out_shape[2] for n in group}
            if len(targets) != 1:
                raise ConfigError(
                    f"reference at {mult}x gives conflicting widths {targets} "
                    f"for coupled group {group}")
            target = targets.pop()
            if target > current:
                raise ConfigError(
                    f"reference width {target} at {group[0]!r} exceeds current "
                    f"{current}; schedule and graph widths mismatch")
            if target == current:
                continue
            norms = np.zeros(current)
            for member in group:
                norms += rank_filters_l1(params[graph.layer(member).param_key(
                    "kernel")], member).norms
            plans.append((group[0], _keep_from_norms(norms, target),
                          current, target))
        for layer, keep, _, _ in plans:
            graph, params = prune_filters(graph, params, layer, keep)
        report = StageReport(
            multiplier=mult, params_after=count_params(graph),
            kept={layer: (target, current) for layer, _, current, target in plans})
        if finetune is not None:
            report.finetune_metric = finetune(graph, params, stage_index, mult)
        reports.append(report)

    final_ref = reference(schedule.multipliers[-1])
    for g in coupling_groups(graph):
        if _group_width(graph, g) != _group_width(final_ref, g):
            raise ConfigError(
                f"final width at {g[0]!r} does not match the 1.0x reference")
    return graph, params, reports


def format_prune_report(reports: list[StageReport]) -> str:
    """Human-readable summary of a progressive pruning run."""
    lines = []
    for r in reports:
        lines.append(f"stage -> {r.multiplier}x: {r.params_after} params"
                     + (f", finetune metric {r.finetune_metric:.4f}"
                        if r.finetune_metric is not None else ""))
        for layer, (kept, had) in sorted(r.kept.items()):
            lines.append(f"  {layer}: kept {kept}/{had} filters")
    return "\n".join(lines)
