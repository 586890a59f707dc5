"""Central finite-difference checks for every analytic backward pass.

Each check builds random float64 instances, contracts the op's output with a
random tensor R to get a scalar L = sum(out * R), and compares the analytic
gradient of L against (L(x + h e_i) - L(x - h e_i)) / 2h. The error of one
instance is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import compute as C

H = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Gradient of the scalar ``f()`` with respect to ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class CheckResult:
    op: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"op": self.op, "instances": self.instances,
                "max_rel_error": self.max_rel_error, "ok": self.ok}


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _conv(rng):
    b, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    hw = int(rng.integers(k, 6))
    x = rng.standard_normal((b, c, hw, hw))
    w = rng.standard_normal((o, c, k, k))
    out = C.conv2d_forward(x, w, stride, pad)
    r = rng.standard_normal(out.shape)
    gx, gw = C.conv2d_backward(r, x, w, stride, pad)
    f = lambda: float(np.sum(C.conv2d_forward(x, w, stride, pad) * r))  # noqa: E731
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)))


def _batchnorm(rng):
    # Two values per channel normalize to +-1 whatever x is, so that degenerate case is skipped.
    b, c, hw = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
    x = rng.standard_normal((b, c, hw, hw)) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
    state = C.BatchNormState(rng.standard_normal(c), rng.standard_normal(c), np.zeros(c), np.ones(c))
    out, cache = C.batchnorm_forward(x, state, training=True)
    r = rng.standard_normal(out.shape)
    gx, gg, gb = C.batchnorm_backward(r, cache)

    def f():
        s = C.BatchNormState(state.gamma, state.beta, np.zeros(c), np.ones(c))
        return float(np.sum(C.batchnorm_forward(x, s, training=True)[0] * r))

    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gg, numeric_grad(f, state.gamma)),
               rel_error(gb, numeric_grad(f, state.beta)))


def _relu(rng):
    x = _away_from_zero(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 6))))
    r = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(C.relu_forward(x) * r))  # noqa: E731
    return rel_error(C.relu_backward(r, x), numeric_grad(f, x))


def _linear(rng):
    b, i, o = (int(v) for v in rng.integers(1, 6, size=3))
    x, w, bias = rng.standard_normal((b, i)), rng.standard_normal((o, i)), rng.standard_normal(o)
    r = rng.standard_normal((b, o))
    gx, gw, gb = C.linear_backward(r, x, w)
    f = lambda: float(np.sum(C.linear_forward(x, w, bias) * r))  # noqa: E731
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)),
               rel_error(gb, numeric_grad(f, bias)))


def _avgpool(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, int(rng.integers(1, 4))))
    r = rng.standard_normal(x.shape[:2])
    f = lambda: float(np.sum(C.global_avgpool_forward(x) * r))  # noqa: E731
    return rel_error(C.global_avgpool_backward(r, x.shape), numeric_grad(f, x))


def _cross_entropy(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = rng.standard_normal((b, k)) * 3
    labels = rng.integers(0, k, size=b)
    _, g = C.softmax_cross_entropy(logits, labels)
    f = lambda: C.softmax_cross_entropy(logits, labels)[0]  # noqa: E731
    return rel_error(g, numeric_grad(f, logits))


def _model(rng):
    from .model import backward, build_plain_cnn, forward

    g = build_plain_cnn([int(rng.integers(1, 4)), int(rng.integers(1, 4))], int(rng.integers(2, 4)),
                        2, seed=int(rng.integers(1 << 30))).astype(np.float64)
    x = rng.standard_normal((3, 2, 4, 4))
    labels = rng.integers(0, g.num_classes, size=3)
    for s in g.bn.values():
        s.gamma[:] = rng.standard_normal(s.gamma.shape)
        s.beta[:] = rng.standard_normal(s.beta.shape)
    _, gl = C.softmax_cross_entropy(forward(g, x, training=True), labels)
    grads = backward(g, gl)
    f = lambda: C.softmax_cross_entropy(forward(g, x, training=True), labels)[0]  # noqa: E731
    return max(rel_error(grads[k], numeric_grad(f, p)) for k, p in g.parameters().items())


CHECKS: dict[str, Callable] = {
    "conv2d": _conv,
    "batchnorm": _batchnorm,
    "relu": _relu,
    "linear": _linear,
    "global_avgpool": _avgpool,
    "softmax_cross_entropy": _cross_entropy,
    "model": _model,
}


def run_checks(instances: int = 20, seed: int = 0, tolerance: float = 1e-5,
               ops: list[str] | None = None) -> list[CheckResult]:
    """Run every registered check on ``instances`` random float64 instances."""
    results = []
    for i, name in enumerate(ops or CHECKS):
        rng = np.random.default_rng([seed, i])
        worst = max(CHECKS[name](rng) for _ in range(instances))
        results.append(CheckResult(name, instances, worst, tolerance))
    return results
