"""Checkpoint files: ``<stem>.json`` manifest + ``<stem>.bin`` float64 blob.

The blob is the concatenation, in manifest order, of every array flattened in
C order and written as little-endian IEEE-754 float64 (``<f8``). Each manifest
entry records ``name``, ``shape``, ``offset`` (in elements) and ``count``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "tirtrack-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(stem, state: dict[str, np.ndarray], config: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.array(state[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "float64", "byte_order": "little",
                "blob": stem.name + ".bin", "total": offset, "tensors": entries, "config": config or {}}
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    try:
        blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob for {path}: {exc}") from exc
    if blob.size != manifest["total"]:
        raise CheckpointError(f"blob holds {blob.size} values, manifest expects {manifest['total']}")
    state = {}
    for e in manifest["tensors"]:
        seg = blob[e["offset"]:e["offset"] + e["count"]]
        state[e["name"]] = seg.astype(np.float64).reshape(e["shape"])
    return state, manifest.get("config", {})
