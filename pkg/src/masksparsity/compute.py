"""Numerical kernels with hand-written adjoints, plus the SGD optimizer.

Every kernel is a pure function over numpy arrays and preserves the dtype of
its inputs: training runs in float32, gradient checks pass float64 arrays.
Convolutions are cross-correlations without bias, lowered to a single GEMM
through an im2col buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    # Floor semantics: trailing rows a strided window cannot reach are dropped.
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} does not fit input of size {size} with pad {pad}")
    return span // stride + 1


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)


def _check_conv(x: Tensor, weight: Tensor, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input channels of {tuple(x.shape)} do not match weight {tuple(weight.shape)}"
        )
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"square kernels only, got {tuple(weight.shape)}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    return conv_output_hw(x.shape[2], x.shape[3], weight.shape[2], stride, pad)


def _im2col(x: Tensor, k: int, stride: int, pad: int, oh: int, ow: int) -> Tensor:
    """Patch matrix of shape (B*oh*ow, C*k*k), column order (c, i, j)."""
    b, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, oh, ow, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * k * k)


def conv2d_forward(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    oh, ow = _check_conv(x, weight, stride, pad)
    n, _, k, _ = weight.shape
    cols = _im2col(x, k, stride, pad, oh, ow)
    out = cols @ weight.reshape(n, -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, n).transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: Tensor, x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0
) -> tuple[Tensor, Tensor]:
    oh, ow = _check_conv(x, weight, stride, pad)
    b, c, h, w = x.shape
    n, _, k, _ = weight.shape
    if grad_out.shape != (b, n, oh, ow):
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} does not match conv output {(b, n, oh, ow)}"
        )
    g = grad_out.transpose(0, 2, 3, 1).reshape(b * oh * ow, n)
    grad_weight = (g.T @ _im2col(x, k, stride, pad, oh, ow)).reshape(weight.shape)

    dcols = (g @ weight.reshape(n, -1)).reshape(b, oh, ow, c, k, k)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_input = padded[:, :, pad : pad + h, pad : pad + w] if pad else padded
    return np.ascontiguousarray(grad_input), grad_weight


def conv2d_grad_weight(
    grad_out: Tensor, x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0
) -> Tensor:
    """Weight half of :func:`conv2d_backward`, for layers whose input needs no gradient."""
    oh, ow = _check_conv(x, weight, stride, pad)
    n, _, k, _ = weight.shape
    if grad_out.shape != (x.shape[0], n, oh, ow):
        raise ShapeError(f"grad_out shape {tuple(grad_out.shape)} does not match conv output")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, n)
    return (g.T @ _im2col(x, k, stride, pad, oh, ow)).reshape(weight.shape)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"BatchNormState.{name} has length {len(getattr(self, name))}, expected {n}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def astype(self, dtype) -> "BatchNormState":
        return BatchNormState(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.momentum,
            self.eps,
        )


@dataclass
class BatchNormCache:
    training: bool
    xhat: Tensor | None = None
    inv_std: Tensor | None = None
    gamma: Tensor | None = None


def batchnorm_forward(
    x: Tensor, state: BatchNormState, training: bool
) -> tuple[Tensor, BatchNormCache]:
    """Normalize per channel; in training mode also update the running statistics."""
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"input {tuple(x.shape)} does not match BN with {state.channels} channels")
    shape = (1, -1, 1, 1)
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (state.gamma * inv_std).astype(x.dtype)
        shift = (state.beta - state.running_mean * state.gamma * inv_std).astype(x.dtype)
        return x * scale.reshape(shape) + shift.reshape(shape), BatchNormCache(training=False)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError("training-mode batch norm needs more than one value per channel")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = np.mean(centered * centered, axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * state.gamma.reshape(shape) + state.beta.reshape(shape)

    mom = state.momentum
    state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    return out, BatchNormCache(True, xhat, inv_std, state.gamma.copy())


def batchnorm_backward(grad_out: Tensor, cache: BatchNormCache) -> tuple[Tensor, Tensor, Tensor]:
    if not cache.training:
        raise ValueError("batchnorm_backward requires a cache from a training-mode forward")
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out {tuple(grad_out.shape)} != activation {tuple(cache.xhat.shape)}")
    shape = (1, -1, 1, 1)
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = np.sum(grad_out * cache.xhat, axis=(0, 2, 3))
    grad_input = (cache.gamma * cache.inv_std / m).reshape(shape) * (
        m * grad_out - grad_beta.reshape(shape) - cache.xhat * grad_gamma.reshape(shape)
    )
    return grad_input, grad_gamma, grad_beta


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0)


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x W^T + b with weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    return x @ weight.T + bias


def linear_backward(grad_out: Tensor, x: Tensor, weight: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_out {tuple(grad_out.shape)} does not match linear output")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def global_avgpool_forward(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects NCHW, got {tuple(x.shape)}")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad_out: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    b, c, h, w = input_shape
    if grad_out.shape != (b, c):
        raise ShapeError(f"grad_out {tuple(grad_out.shape)} does not match pooled shape {(b, c)}")
    g = grad_out / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], input_shape))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x K, got {tuple(logits.shape)}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels {labels.shape} do not match batch size {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(b)
    loss = -float(log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    return loss, grad / b


@dataclass
class OptimizerState:
    """SGD hyperparameters plus one momentum buffer per parameter name."""

    lr: float
    momentum_coeff: float = 0.0
    weight_decay: float = 0.0
    nesterov: bool = False
    dampening: float = 0.0
    buffers: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum_coeff < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum_coeff}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.dampening < 1:
            raise ValueError(f"dampening must lie in [0, 1), got {self.dampening}")
        if self.nesterov and (self.momentum_coeff <= 0 or self.dampening != 0):
            raise ValueError("Nesterov momentum requires momentum > 0 and zero dampening")


def sgd_update(params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState) -> None:
    """In-place SGD step with coupled (L2-gradient) weight decay.

    The first step initializes each momentum buffer to the raw gradient, as
    in the reference torch.optim.SGD recurrence.
    """
    mu, damp = state.momentum_coeff, state.dampening
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if mu:
            buf = state.buffers.get(name)
            if buf is None:
                buf = state.buffers[name] = np.array(g, dtype=p.dtype, copy=True)
            else:
                if buf.shape != p.shape:
                    raise ShapeError(f"momentum buffer for {name} has stale shape {buf.shape}")
                buf *= mu
                buf += (1 - damp) * g
            g = g + mu * buf if state.nesterov else buf
        p -= (state.lr * g).astype(p.dtype, copy=False)
