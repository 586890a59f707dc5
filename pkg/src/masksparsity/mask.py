"""Pruning masks: thresholding, uniform ratios, imports, coupling resolution, persistence.

A mask entry of 1 marks a channel for pruning (and for masked regularization),
0 marks it kept.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelGraph

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PROVENANCES = ("threshold", "uniform", "imported")


class MaskError(ValueError):
    pass


@dataclass
class ChannelMask:
    layers: dict[str, np.ndarray]
    provenance: str = "threshold"
    param: float | None = None
    warnings: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise MaskError(f"unknown provenance {self.provenance!r}")
        self.layers = {k: np.asarray(v, dtype=np.uint8) for k, v in self.layers.items()}
        for name, v in self.layers.items():
            if v.ndim != 1 or np.any(v > 1):
                raise MaskError(f"layer {name}: mask must be a binary vector")

    def check(self, graph: ModelGraph, strict: bool = True) -> None:
        """Raise MaskError listing every per-layer mismatch against the graph.

        With ``strict`` the kept-channel and coupling invariants are checked too.
        """
        counts = graph.channel_counts()
        problems = []
        for name in counts.keys() | self.layers.keys():
            want = counts.get(name)
            got = len(self.layers[name]) if name in self.layers else None
            if want != got:
                problems.append(f"{name}: model has {want}, mask has {got}")
        if problems:
            raise MaskError("mask does not match model: " + "; ".join(sorted(problems)))
        if not strict:
            return
        for name, v in self.layers.items():
            if v.all():
                raise MaskError(f"layer {name}: mask prunes every channel")
        for group in graph.coupling_groups:
            ref = self.layers[group[0]]
            for name in group[1:]:
                if not np.array_equal(ref, self.layers[name]):
                    raise MaskError(f"coupled layers {group[0]} and {name} have different masks")

    def prune_fraction(self) -> float:
        total = sum(v.size for v in self.layers.values())
        return sum(int(v.sum()) for v in self.layers.values()) / total if total else 0.0

    def pruned_counts(self) -> dict[str, int]:
        return {k: int(v.sum()) for k, v in self.layers.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelMask):
            return NotImplemented
        return self.layers.keys() == other.layers.keys() and all(
            np.array_equal(v, other.layers[k]) for k, v in self.layers.items()
        )

    def to_dict(self, graph: ModelGraph) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_fingerprint": graph.fingerprint(),
            "provenance": self.provenance,
            "param": self.param,
            "layers": [
                {"name": name, "total": int(v.size), "prune": np.flatnonzero(v).tolist()}
                for name, v in self.layers.items()
            ],
        }


def _warn(mask_warnings: list, record: dict) -> None:
    mask_warnings.append(record)
    log.warning("mask: %s", record["message"])
    warnings.warn(record["message"], RuntimeWarning, stacklevel=3)


def resolve_constraints(mask: ChannelMask, graph: ModelGraph) -> ChannelMask:
    """AND prune decisions across each coupling group, then keep >= 1 channel per layer.

    When a layer (or group) would lose every channel, the channel with the
    largest |gamma| (summed over the group) is kept.
    """
    mask.check(graph, strict=False)
    layers = {k: v.copy() for k, v in mask.layers.items()}
    notes = list(mask.warnings)
    grouped = set()
    units = []
    for group in graph.coupling_groups:
        joint = np.logical_and.reduce([layers[n].astype(bool) for n in group]).astype(np.uint8)
        for n in group:
            layers[n] = joint.copy()
        grouped.update(group)
        units.append(group)
    units += [[n] for n in graph.bn_names if n not in grouped]
    for unit in units:
        if layers[unit[0]].all():
            score = sum(np.abs(graph.bn[n].gamma.astype(np.float64)) for n in unit)
            keep = int(np.argmax(score))
            for n in unit:
                layers[n][keep] = 0
            _warn(notes, {
                "layer": unit[0],
                "kept_channel": keep,
                "message": f"every channel of {', '.join(unit)} was marked; keeping channel {keep}",
            })
    return ChannelMask(layers, mask.provenance, mask.param, notes)


def threshold_mask(graph: ModelGraph, theta: float, resolve: bool = True) -> ChannelMask:
    """Mark channels with |gamma| < theta."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    layers = {n: (np.abs(g) < theta).astype(np.uint8) for n, g in graph.gammas().items()}
    mask = ChannelMask(layers, "threshold", float(theta))
    return resolve_constraints(mask, graph) if resolve else mask


def uniform_mask(graph: ModelGraph, ratio: float, resolve: bool = True) -> ChannelMask:
    """Mark floor(ratio * N) smallest-|gamma| channels of every layer; ties go to lower indices."""
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    layers = {}
    for name, gamma in graph.gammas().items():
        m = np.zeros(gamma.size, dtype=np.uint8)
        count = int(np.floor(ratio * gamma.size))
        m[np.argsort(np.abs(gamma), kind="stable")[:count]] = 1
        layers[name] = m
    mask = ChannelMask(layers, "uniform", float(ratio))
    return resolve_constraints(mask, graph) if resolve else mask


def mask_from_dict(doc: dict, graph: ModelGraph | None = None, provenance: str | None = None) -> ChannelMask:
    if doc.get("format_version") != FORMAT_VERSION:
        raise MaskError(f"unsupported mask format_version {doc.get('format_version')!r}")
    layers = {}
    for entry in doc["layers"]:
        prune = list(entry["prune"])
        if any(b <= a for a, b in zip(prune, prune[1:])):
            raise MaskError(f"layer {entry['name']}: prune indices must be strictly increasing")
        if prune and (prune[0] < 0 or prune[-1] >= entry["total"]):
            raise MaskError(f"layer {entry['name']}: prune index out of range")
        v = np.zeros(entry["total"], dtype=np.uint8)
        v[prune] = 1
        layers[entry["name"]] = v
    mask = ChannelMask(layers, provenance or doc.get("provenance", "imported"), doc.get("param"))
    if graph is not None:
        mask.check(graph)
    return mask


def save_mask(mask: ChannelMask, path: str | Path, graph: ModelGraph) -> None:
    Path(path).write_text(json.dumps(mask.to_dict(graph), indent=1) + "\n")


def load_mask(path: str | Path, graph: ModelGraph, imported: bool = False) -> ChannelMask:
    """Read a mask file and verify it against ``graph`` layer by layer.

    Masks produced by other tools carry no fingerprint guarantee, so only
    layer names and channel counts are compared.
    """
    doc = json.loads(Path(path).read_text())
    return mask_from_dict(doc, graph, "imported" if imported else None)
