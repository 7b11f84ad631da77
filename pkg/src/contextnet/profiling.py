"""Per-layer runtime, parameter and MAC reporting.

Wall-clock numbers are the median over repeated forward passes, taken after
warm-up runs and with BLAS thread pools pinned to a single thread so the
figures are stable and comparable across machines.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .architecture import per_layer_macs, per_layer_params
from .autodiff import _forward_layer
from .errors import ConfigError
from .graphdef import GraphSpec

CSV_FIELDS = ("layer", "kind", "params", "macs", "ms")


@dataclass(frozen=True)
class LayerProfile:
    layer: str
    kind: str
    params: int
    macs: int
    ms: float


@dataclass(frozen=True)
class ProfileResult:
    rows: tuple
    total_params: int
    total_macs: int
    total_ms: float
    reps: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.layer, r.kind, r.params, r.macs, f"{r.ms:.4f}"])
        w.writerow(["total", "", self.total_params, self.total_macs,
                    f"{self.total_ms:.4f}"])
        return buf.getvalue()

    def format_table(self) -> str:
        name_w = max(5, max((len(r.layer) for r in self.rows), default=5))
        lines = [f"{'layer':<{name_w}}  {'kind':<10}  {'params':>9}  "
                 f"{'MACs':>12}  {'ms':>8}"]
        for r in self.rows:
            lines.append(f"{r.layer:<{name_w}}  {r.kind:<10}  {r.params:>9}  "
                         f"{r.macs:>12}  {r.ms:>8.4f}")
        lines.append(f"{'total':<{name_w}}  {'':<10}  {self.total_params:>9}  "
                     f"{self.total_macs:>12}  {self.total_ms:>8.4f}")
        lines.append(f"median of {self.reps} repetitions, single thread")
        return "\n".join(lines)


def profile_forward(graph: GraphSpec, params: dict, *, batch: int = 1,
                    reps: int = 10, warmup: int = 2, seed: int = 0
                    ) -> ProfileResult:
    """Time every layer of an inference forward pass.

    Each repetition runs the whole graph once, timing layers individually;
    per-layer medians are reported so one slow outlier run does not skew a
    single layer.  Dropout is inactive (inference mode).
    """
    if reps < 1:
        raise ConfigError("profiling needs at least one repetition")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch,) + tuple(graph.input_shape),
                            dtype=np.float32)
    pcounts = per_layer_params(graph)
    macs = per_layer_macs(graph)
    timings = {layer.name: [] for layer in graph.layers}
    with threadpool_limits(limits=1):
        for rep in range(warmup + reps):
            values: dict = {}
            for layer in graph.layers:
                t0 = time.perf_counter()
                value, _ = _forward_layer(layer, params, values, x,
                                          False, None)
                elapsed = time.perf_counter() - t0
                values[layer.name] = value
                if rep >= warmup:
                    timings[layer.name].append(elapsed)
    rows = tuple(
        LayerProfile(layer=ly.name, kind=ly.kind, params=pcounts[ly.name],
                     macs=macs[ly.name],
                     ms=float(np.median(timings[ly.name])) * 1e3)
        for ly in graph.layers)
    return ProfileResult(rows=rows,
                         total_params=sum(r.params for r in rows),
                         total_macs=sum(r.macs for r in rows),
                         total_ms=sum(r.ms for r in rows),
                         reps=reps)
