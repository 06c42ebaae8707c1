"""Checkpoint persistence.

Layout per checkpoint directory:
    weights.bin   concatenated little-endian parameter tensors, manifest order
    weights.json  ordered names, shapes, byte offsets, dtype, architecture
                  config, role tag and RNG seed
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Parameter


def save_checkpoint(directory, named_params: list[tuple[str, Parameter]],
                    config: dict, role: str, seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, p in named_params:
        raw = np.ascontiguousarray(p.data).astype(f"<{p.data.dtype.char}{p.data.dtype.itemsize}", copy=False)
        blob = raw.tobytes()
        entries.append({
            "name": name,
            "shape": list(p.data.shape),
            "dtype": str(p.data.dtype),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"role": role, "config": config, "seed": seed, "params": entries}
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    with open(directory / "weights.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (manifest, name -> array)."""
    directory = Path(directory)
    with open(directory / "weights.json") as fh:
        manifest = json.load(fh)
    raw = (directory / "weights.bin").read_bytes()
    arrays = {}
    for entry in manifest["params"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
                            offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return manifest, arrays
