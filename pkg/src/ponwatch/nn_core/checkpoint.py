"""Plain-text checkpoints with hex-encoded float64 parameter blocks.

Layout::

    PONWATCH-CHECKPOINT 1
    kind <model kind>
    meta <key> <value>          (zero or more, written in insertion order)
    layer <name> <type> <dims>  (manifest, one per layer)
    param <name> <shape> <n>    followed by hex lines, 32 values per line
    end
"""
from __future__ import annotations

import numpy as np

HEADER = "PONWATCH-CHECKPOINT"
VERSION = 1
VALUES_PER_LINE = 32


class CheckpointError(ValueError):
    pass


def format_checkpoint(kind: str, manifest: list, params: dict, meta: dict | None = None) -> str:
    lines = [f"{HEADER} {VERSION}", f"kind {kind}"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in f"{k}{v}"):
            raise CheckpointError(f"meta entry {k!r} contains whitespace")
        lines.append(f"meta {k} {v}")
    for name, ltype, dims in manifest:
        lines.append(f"layer {name} {ltype} {','.join(str(d) for d in dims)}")
    for name, arr in params.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {shape} {flat.size}")
        for i in range(0, flat.size, VALUES_PER_LINE):
            lines.append(flat[i:i + VALUES_PER_LINE].tobytes().hex())
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str):
    lines = text.splitlines()
    if not lines or lines[0] != f"{HEADER} {VERSION}":
        raise CheckpointError("not a version-1 checkpoint")
    kind, meta, manifest, params = None, {}, [], {}
    i = 1
    while i < len(lines):
        tag, _, rest = lines[i].partition(" ")
        i += 1
        if tag == "kind":
            kind = rest
        elif tag == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif tag == "layer":
            name, ltype, dims = rest.split(" ")
            manifest.append((name, ltype, tuple(int(d) for d in dims.split(",") if d)))
        elif tag == "param":
            name, shape, n = rest.split(" ")
            n = int(n)
            shape = tuple(int(d) for d in shape.split(",") if d)
            n_lines = -(-n // VALUES_PER_LINE)
            raw = bytes.fromhex("".join(lines[i:i + n_lines]))
            i += n_lines
            if len(raw) != 8 * n:
                raise CheckpointError(f"parameter {name}: expected {n} values")
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        elif tag == "end":
            break
        else:
            raise CheckpointError(f"unexpected line {lines[i - 1][:40]!r}")
    else:
        raise CheckpointError("missing end marker")
    if kind is None:
        raise CheckpointError("missing kind")
    return kind, manifest, params, meta


def save_checkpoint(path, kind, manifest, params, meta=None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_checkpoint(kind, manifest, params, meta))


def load_checkpoint(path):
    with open(path) as fh:
        return parse_checkpoint(fh.read())
