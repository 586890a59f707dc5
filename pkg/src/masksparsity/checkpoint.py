"""Checkpoint container: a JSON manifest followed by raw little-endian float32 blobs.

Layout::

    8 bytes   magic b"MSKSPCK\\n"
    8 bytes   manifest length, unsigned little-endian
    N bytes   UTF-8 JSON manifest
    ...       tensor blobs, back to back; offsets are relative to the first blob

The manifest records ``format_version``, the payload ``kind`` ("model" or
"dataset"), the layer table for models, and for every tensor its name,
shape, byte offset, byte length and SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .compute import BatchNormState
from .data import Dataset
from .model import LayerSpec, ModelGraph

MAGIC = b"MSKSPCK\n"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, kind: str, tensors: dict[str, np.ndarray],
                    extra: dict | None = None) -> str:
    """Write tensors plus manifest fields; returns the SHA-256 of the whole file."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({
            "name": name,
            "shape": list(np.shape(arr)),
            "offset": offset,
            "nbytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "dtype": "float32",
                "byte_order": "little", **(extra or {}), "tensors": entries}
    head = json.dumps(manifest, sort_keys=True).encode()
    payload = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (size,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + size])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    base = 16 + size
    tensors = {}
    for t in manifest["tensors"]:
        blob = raw[base + t["offset"] : base + t["offset"] + t["nbytes"]]
        if len(blob) != t["nbytes"]:
            raise CheckpointError(f"{path}: tensor {t['name']} truncated at byte {base + t['offset']}")
        if hashlib.sha256(blob).hexdigest() != t["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(blob, dtype=_LE_F32).astype(np.float32).reshape(t["shape"])
    return manifest, tensors


def save_model(graph: ModelGraph, path: str | Path, meta: dict | None = None) -> str:
    tensors = dict(graph.weights)
    bn_meta = {}
    for name in graph.bn_names:
        s = graph.bn[name]
        for field in ("gamma", "beta", "running_mean", "running_var"):
            tensors[f"{name}.{field}"] = getattr(s, field)
        bn_meta[name] = {"momentum": s.momentum, "eps": s.eps}
    extra = {"layers": graph.topology(), "bn": bn_meta, "meta": meta or {}}
    return write_container(path, "model", tensors, extra)


def load_model(path: str | Path) -> ModelGraph:
    manifest, tensors = read_container(path)
    if manifest["kind"] != "model":
        raise CheckpointError(f"{path}: holds a {manifest['kind']}, not a model")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    bn = {
        name: BatchNormState(
            tensors.pop(f"{name}.gamma"), tensors.pop(f"{name}.beta"),
            tensors.pop(f"{name}.running_mean"), tensors.pop(f"{name}.running_var"),
            cfg["momentum"], cfg["eps"],
        )
        for name, cfg in manifest["bn"].items()
    }
    return ModelGraph(layers, tensors, bn)


def model_meta(path: str | Path) -> dict:
    return read_container(path)[0].get("meta", {})


def save_dataset(dataset: Dataset, path: str | Path) -> str:
    extra = {"meta": {"mean": list(dataset.mean), "std": list(dataset.std),
                      "num_classes": dataset.num_classes}}
    tensors = {"images": dataset.images, "labels": dataset.labels.astype(np.float32)}
    return write_container(path, "dataset", tensors, extra)


def load_dataset(path: str | Path) -> Dataset:
    manifest, tensors = read_container(path)
    if manifest["kind"] != "dataset":
        raise CheckpointError(f"{path}: holds a {manifest['kind']}, not a dataset")
    meta = manifest["meta"]
    return Dataset(tensors["images"], tensors["labels"].astype(np.int64), tuple(meta["mean"]),
                   tuple(meta["std"]), meta["num_classes"])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
