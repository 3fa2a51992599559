"""Binary checkpoint container.

Layout: the ASCII magic ``CSPCKPT1`` and a newline, a text manifest of
``key=value`` lines, a blank line, then the raw tensor blobs. Tensors are
declared in the manifest as ``tensor.<i>=<name>:<d0>x<d1>x...`` and their
blobs follow in index order as row-major little-endian float64. Everything
about the file is a pure function of its contents, so identical state always
serializes to identical bytes.
"""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import numpy as np

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"CSPCKPT1"


class CheckpointError(ValueError):
    pass


def _shape_str(shape: tuple) -> str:
    if not shape:
        return "1"  # scalars are stored as length-1 vectors
    return "x".join(str(int(d)) for d in shape)


def save_checkpoint(path: str, manifest: Mapping[str, str],
                    tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    lines = [MAGIC.decode()]
    for key, value in manifest.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"manifest entry not serializable: {key!r}")
        if key.startswith("tensor."):
            raise CheckpointError("manifest keys may not shadow tensor entries")
        lines.append(f"{key}={value}")
    blobs = []
    for i, (name, arr) in enumerate(tensors):
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"tensor.{i}={name}:{_shape_str(arr.shape)}")
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = ("\n".join(lines) + "\n\n").encode() + b"".join(blobs)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError(
            f"{path}: not a checkpoint (expected magic {MAGIC.decode()!r})")
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(
            f"{path}: truncated {MAGIC.decode()} checkpoint (no manifest end)")
    manifest: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in raw[len(MAGIC) + 1:sep].decode().splitlines():
        key, eq, value = line.partition("=")
        if not eq:
            raise CheckpointError(
                f"{path}: malformed {MAGIC.decode()} manifest line {line!r}")
        if key.startswith("tensor."):
            name, colon, shape_s = value.partition(":")
            if not colon:
                raise CheckpointError(
                    f"{path}: malformed tensor declaration {line!r}")
            specs.append((name, tuple(int(d) for d in shape_s.split("x"))))
        else:
            manifest[key] = value
    tensors: dict[str, np.ndarray] = {}
    offset = sep + 2
    for name, shape in specs:
        n = 1
        for d in shape:
            n *= d
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(
                f"{path}: truncated {MAGIC.decode()} checkpoint "
                f"(tensor {name!r} incomplete)")
        tensors[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(
            f"{path}: {len(raw) - offset} trailing bytes after declared tensors")
    return manifest, tensors
