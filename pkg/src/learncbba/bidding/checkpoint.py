"""Checkpoint files: a JSON manifest plus a sibling raw float32 blob.

The manifest lists the architecture, hyperparameters, feature names and, per
parameter, its shape and byte offset into the ``.bin`` file.  Values are
stored little-endian float32, so in-memory parameters should be kept on the
float32 grid (see :func:`quantize`) for save/load to round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes, atomic_write_text

FORMAT = "learncbba-params/1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def quantize(arrays: dict[str, np.ndarray]) -> None:
    """Round every array in place onto the float32 grid (kept as float64)."""
    for v in arrays.values():
        v[...] = v.astype(DTYPE).astype(np.float64)


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = dict(header)
    manifest.update({"format": FORMAT, "data_file": bin_path.name, "data_bytes": offset, "params": entries})
    atomic_write_bytes(bin_path, b"".join(chunks))
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    bin_path = path.parent / manifest["data_file"]
    try:
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read parameter data {bin_path}: {exc}") from exc
    if len(blob) != manifest["data_bytes"]:
        raise CheckpointError(f"{bin_path}: expected {manifest['data_bytes']} bytes, found {len(blob)}")
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, stop = entry["offset"], entry["offset"] + n * DTYPE.itemsize
        if start < 0 or stop > len(blob):
            raise CheckpointError(f"{path}: parameter {entry['name']} runs past the data file")
        arrays[entry["name"]] = np.frombuffer(blob[start:stop], dtype=DTYPE).astype(np.float64).reshape(shape)
    header = {k: v for k, v in manifest.items() if k not in {"format", "data_file", "data_bytes", "params"}}
    return header, arrays


def save_policy(path, policy) -> None:
    header = {"arch": policy.arch, "hyper": policy.hyper, "feature_spec": list(policy.feature_spec)}
    save_arrays(path, header, policy.params)


def load_policy(path):
    from .policy import PolicyParameters

    header, arrays = load_arrays(path)
    try:
        return PolicyParameters(header["arch"], arrays, header["hyper"], tuple(header["feature_spec"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
