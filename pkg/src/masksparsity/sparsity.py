"""Sparse penalties on BN scaling factors and filters, and scaling-factor telemetry.

Penalties return ``(loss, grads)`` where ``grads`` maps parameter names (as in
``ModelGraph.parameters()``) to subgradients that the trainer adds to the
task-loss gradients before the optimizer step.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .model import ModelGraph

if TYPE_CHECKING:
    from .mask import ChannelMask

MODES = ("off", "global", "masked", "group_lasso")
NORMS = ("L1", "L2")


@dataclass
class SparsityConfig:
    mode: str = "off"
    norm: str = "L1"
    lam: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"sparsity mode must be one of {MODES}, got {self.mode!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "norm": self.norm, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityConfig":
        return cls(d.get("mode", "off"), d.get("norm", "L1"), float(d.get("lambda", 0.0)))


def _norm_terms(gamma: np.ndarray, lam: float, norm: str) -> tuple[float, np.ndarray]:
    g64 = gamma.astype(np.float64)
    if norm == "L1":
        return lam * float(np.abs(g64).sum()), (lam * np.sign(gamma)).astype(gamma.dtype)
    return lam * float((g64 * g64).sum()), (2 * lam * gamma).astype(gamma.dtype)


def global_penalty(graph: ModelGraph, lam: float, norm: str = "L1") -> tuple[float, dict]:
    """lam * sum over every BN channel of |gamma| (L1) or gamma^2 (L2)."""
    if not graph.bn_names:
        raise ValueError("graph has no BN layers")
    loss, grads = 0.0, {}
    for name, gamma in graph.gammas().items():
        part, grad = _norm_terms(gamma, lam, norm)
        loss += part
        grads[f"{name}.gamma"] = grad
    return loss, grads


def masked_penalty(graph: ModelGraph, mask: "ChannelMask", lam: float,
                   norm: str = "L1") -> tuple[float, dict]:
    """The global penalty restricted to channels the mask marks for pruning.

    Only shapes are checked: a regularization mask may cover whole layers.
    """
    mask.check(graph, strict=False)
    loss, grads = 0.0, {}
    for name, gamma in graph.gammas().items():
        m = mask.layers[name].astype(bool)
        part, grad = _norm_terms(np.where(m, gamma, 0).astype(gamma.dtype), lam, norm)
        grad[~m] = 0
        loss += part
        grads[f"{name}.gamma"] = grad
    return loss, grads


def group_lasso_penalty(graph: ModelGraph, lam: float) -> tuple[float, dict]:
    """lam * sum of per-filter Euclidean norms over all conv layers."""
    loss, grads = 0.0, {}
    for layer in graph.layers:
        if layer.kind != "conv":
            continue
        key = f"{layer.name}.weight"
        w = graph.weights[key]
        norms = np.sqrt(np.sum(w.astype(np.float64) ** 2, axis=(1, 2, 3)))
        loss += lam * float(norms.sum())
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, lam / safe, 0.0).reshape(-1, 1, 1, 1)
        grads[key] = (w * scale).astype(w.dtype)
    return loss, grads


def penalty(graph: ModelGraph, config: SparsityConfig, mask: "ChannelMask | None" = None):
    """Dispatch on ``config.mode``; 'off' yields zero loss and no gradients."""
    if config.mode == "off" or config.lam == 0:
        return 0.0, {}
    if config.mode == "global":
        return global_penalty(graph, config.lam, config.norm)
    if config.mode == "masked":
        if mask is None:
            raise ValueError("masked sparsity requires a ChannelMask")
        return masked_penalty(graph, mask, config.lam, config.norm)
    return group_lasso_penalty(graph, config.lam)


@dataclass
class GammaSnapshot:
    stage: str
    epoch: int
    values: dict[str, np.ndarray]

    def __post_init__(self):
        self.values = {k: np.abs(np.asarray(v, dtype=np.float64)) for k, v in self.values.items()}

    @classmethod
    def take(cls, graph: ModelGraph, stage: str = "", epoch: int = 0) -> "GammaSnapshot":
        return cls(stage, epoch, {k: v.copy() for k, v in graph.gammas().items()})

    def all_values(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate(list(self.values.values()))

    def records(self) -> list[dict]:
        return [
            {"stage": self.stage, "epoch": self.epoch, "layer": name, "values": v.tolist()}
            for name, v in self.values.items()
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "GammaSnapshot":
        if not records:
            raise ValueError("no snapshot records")
        first = records[0]
        return cls(first["stage"], first["epoch"], {r["layer"]: r["values"] for r in records})


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray  # len(edges) - 1 regular bins followed by one overflow bin

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def gamma_histogram(snapshot: GammaSnapshot, num_bins: int = 100,
                    value_range: tuple[float, float] = (0.0, 1.0)) -> Histogram:
    """Counts of |gamma| over fixed-width bins; values above the range go to an overflow bin."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    lo, hi = value_range
    values = snapshot.all_values()
    edges = np.linspace(lo, hi, num_bins + 1)
    inside, _ = np.histogram(values[values <= hi], bins=edges)
    return Histogram(edges, np.append(inside, np.sum(values > hi)))


def bimodality_index(values: np.ndarray, low: float = 1e-2, high: float = 1e-1) -> float:
    """Fraction of |gamma| that sit clearly in one of the two peaks."""
    values = np.abs(np.asarray(values))
    if values.size == 0:
        return 0.0
    return float(np.mean((values < low) | (values > high)))


def histogram_records(snapshot: GammaSnapshot, hist: Histogram) -> list[dict]:
    return [{
        "stage": snapshot.stage,
        "epoch": snapshot.epoch,
        "layer": "*",
        "bins": hist.counts.tolist(),
        "edges": hist.edges.tolist(),
    }]


@dataclass
class GradientNormLog:
    """Per-iteration |dL_total/d gamma| for a fixed set of (bn layer, channel) ids."""

    graph: ModelGraph
    channels: list[tuple[str, int]]
    window: int | None = None
    series: dict[tuple[str, int], deque] = field(init=False)

    def __post_init__(self):
        counts = self.graph.channel_counts()
        for layer, idx in self.channels:
            if layer not in counts or not 0 <= idx < counts[layer]:
                raise KeyError(f"unknown channel {layer}[{idx}]")
        self.series = {tuple(c): deque(maxlen=self.window) for c in self.channels}

    def record(self, grads: dict[str, np.ndarray]) -> None:
        for layer, idx in self.series:
            self.series[(layer, idx)].append(abs(float(grads[f"{layer}.gamma"][idx])))

    def __len__(self) -> int:
        return len(next(iter(self.series.values()))) if self.series else 0

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"layer": layer, "channel": idx, "grad_norms": list(values)})
            for (layer, idx), values in self.series.items()
        ]
        return "\n".join(lines) + ("\n" if lines else "")
