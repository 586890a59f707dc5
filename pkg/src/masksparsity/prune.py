"""Structural channel removal, the zeroed-reference equivalence check, and reports."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .compute import BatchNormState
from .mask import ChannelMask
from .model import ModelGraph, flops_count, forward, input_bns, param_count


def _kept(mask: ChannelMask) -> dict[str, np.ndarray]:
    return {name: np.flatnonzero(v == 0) for name, v in mask.layers.items()}


def apply_surgery(graph: ModelGraph, mask: ChannelMask) -> ModelGraph:
    """Return a new, physically smaller graph with every masked channel removed.

    The mask is validated before anything is built, so a bad mask leaves no
    partial result. Running statistics of kept channels are carried over.
    """
    mask.check(graph)
    keep = _kept(mask)
    layers = [copy.copy(layer) for layer in graph.layers]
    weights = {}
    bn = {}
    for i, layer in enumerate(layers):
        if layer.kind == "bn":
            k = keep[layer.name]
            s = graph.bn[layer.name]
            bn[layer.name] = BatchNormState(
                s.gamma[k].copy(), s.beta[k].copy(), s.running_mean[k].copy(),
                s.running_var[k].copy(), s.momentum, s.eps,
            )
            continue
        if layer.kind not in ("conv", "linear"):
            continue
        w = graph.weights[f"{layer.name}.weight"]
        sources = input_bns(graph, i)
        if sources:
            w = w[:, keep[sources[0]]]
            layer.in_channels = w.shape[1]
        if layer.kind == "conv":
            out_keep = keep[graph.layers[i + 1].name]
            w = w[out_keep]
            layer.out_channels = len(out_keep)
        else:
            weights[f"{layer.name}.bias"] = graph.weights[f"{layer.name}.bias"].copy()
        weights[f"{layer.name}.weight"] = np.ascontiguousarray(w)
    return ModelGraph(layers, weights, bn)


def zeroed_reference(graph: ModelGraph, mask: ChannelMask, zero_beta: bool = True) -> ModelGraph:
    """Copy of ``graph`` with gamma (and beta) of every masked channel set to zero."""
    ref = graph.copy()
    for name, v in mask.layers.items():
        m = v.astype(bool)
        ref.bn[name].gamma[m] = 0
        if zero_beta:
            ref.bn[name].beta[m] = 0
    return ref


def equivalence_check(graph: ModelGraph, mask: ChannelMask, probe_inputs: np.ndarray,
                      zero_beta: bool = True) -> float:
    """Max |logit difference| between the zeroed reference and the pruned model (eval mode).

    A channel with gamma = beta = 0 emits exact zeros, so a correct surgery
    keeps the difference at rounding level. ``zero_beta=False`` leaves the
    constant beta contribution in the reference to expose what pruning drops.
    """
    pruned = apply_surgery(graph, mask)
    ref = zeroed_reference(graph, mask, zero_beta)
    a = forward(ref, probe_inputs, training=False).astype(np.float64)
    b = forward(pruned, probe_inputs, training=False).astype(np.float64)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _pct(before: int, after: int) -> float:
    return round(100.0 * (before - after) / before, 2) if before else 0.0


@dataclass
class PruneReport:
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    per_layer: dict[str, tuple[int, int]]  # bn layer -> (kept, total)

    def __post_init__(self):
        if self.flops_after > self.flops_before or self.params_after > self.params_before:
            raise ValueError("a pruned model cannot be larger than its source")

    @property
    def flops_reduction(self) -> float:
        return _pct(self.flops_before, self.flops_after)

    @property
    def params_reduction(self) -> float:
        return _pct(self.params_before, self.params_after)

    def to_dict(self) -> dict:
        return {
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_reduction_pct": f"{self.flops_reduction:.2f}",
            "params_reduction_pct": f"{self.params_reduction:.2f}",
            "per_layer": [
                {"layer": name, "kept": kept, "total": total}
                for name, (kept, total) in self.per_layer.items()
            ],
        }

    def summary(self) -> str:
        return (
            f"FLOPs {self.flops_before:,} -> {self.flops_after:,} ({self.flops_reduction:.2f}% fewer); "
            f"params {self.params_before:,} -> {self.params_after:,} ({self.params_reduction:.2f}% fewer)"
        )


def report(before: ModelGraph, after: ModelGraph, input_hw: tuple[int, int] = (32, 32)) -> PruneReport:
    after_counts = after.channel_counts()
    per_layer = {
        name: (after_counts.get(name, 0), total) for name, total in before.channel_counts().items()
    }
    return PruneReport(
        flops_count(before, input_hw), flops_count(after, input_hw),
        param_count(before), param_count(after), per_layer,
    )
