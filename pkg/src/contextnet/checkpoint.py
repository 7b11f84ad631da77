"""Checkpoint serialization.

Format: ASCII header line `CTXN1`, one manifest line per tensor of the form
`name shape dtype byte-offset` (shape as comma-separated dims, offsets into
the data section), a blank line, then the raw little-endian float32 blobs at
their stated offsets.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import CheckpointError
from .graphdef import GraphSpec

MAGIC = b"CTXN1"


def save_checkpoint(path: str, params: dict, order: Optional[list] = None) -> None:
    """Write a parameter dict; order defaults to sorted names."""
    names = list(order) if order is not None else sorted(params)
    if set(names) != set(params):
        raise CheckpointError("save order does not cover the parameter dict")
    lines = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.ndim < 1:
            arr = arr.reshape(1)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} {shape} float32 {offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(("\n".join(lines) + "\n\n").encode())
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint back into {name: float32 array}."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if not data.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    try:
        header_end = data.index(b"\n\n", len(MAGIC))
    except ValueError:
        raise CheckpointError(f"{path}: missing blank line after manifest") from None
    manifest = data[len(MAGIC) + 1:header_end].decode("ascii", errors="replace")
    base = header_end + 2
    params: dict = {}
    for ln, line in enumerate(manifest.splitlines(), 2):
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(
                f"{path}:{ln}: manifest line needs 'name shape dtype offset', "
                f"got {line!r}")
        name, shape_s, dtype_s, off_s = parts
        if name in params:
            raise CheckpointError(f"{path}:{ln}: duplicate tensor {name!r}")
        if dtype_s != "float32":
            raise CheckpointError(f"{path}:{ln}: unsupported dtype {dtype_s!r}")
        try:
            shape = tuple(int(d) for d in shape_s.split(","))
            off = int(off_s)
        except ValueError:
            raise CheckpointError(f"{path}:{ln}: bad shape or offset in {line!r}") from None
        if any(d < 1 for d in shape) or off < 0:
            raise CheckpointError(f"{path}:{ln}: bad shape or offset in {line!r}")
        nbytes = int(np.prod(shape)) * 4
        blob = data[base + off: base + off + nbytes]
        if len(blob) < nbytes:
            raise CheckpointError(
                f"{path}: truncated data for {name!r}, need {nbytes} bytes at "
                f"offset {off}")
        params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    if not params:
        raise CheckpointError(f"{path}: checkpoint holds no tensors")
    return params


def check_params_match(graph: GraphSpec, params: dict, context: str = "checkpoint"
                       ) -> None:
    """Raise CheckpointError unless params exactly covers the graph's tensors."""
    want = graph.param_shapes()
    missing = sorted(set(want) - set(params))
    extra = sorted(set(params) - set(want))
    if missing or extra:
        bits = []
        if missing:
            bits.append(f"missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
        if extra:
            bits.append(f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}")
        raise CheckpointError(f"{context} does not match the graph: " + "; ".join(bits))
    for name, shape in want.items():
        got = tuple(params[name].shape)
        if got != tuple(shape):
            raise CheckpointError(
                f"{context}: tensor {name!r} has shape {got}, graph expects {tuple(shape)}")


def save_graph_params(path: str, graph: GraphSpec, params: dict) -> None:
    """Save in graph topological order after validating coverage."""
    check_params_match(graph, params, context="parameter store")
    save_checkpoint(path, params, order=[key for key, _, _ in graph.param_items()])
