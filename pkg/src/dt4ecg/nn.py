"""Layers and functional ops for 1D convolutional networks.

Functional ops take and return :class:`~dt4ecg.autodiff.Tensor`; the layer
classes own parameters and running statistics and expose them by name for
the optimizer and the checkpoint writer.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import ShapeError, Tensor, _make


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def conv_out_len(T: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (T + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, T) with ``weight`` (C_out, C_in, K)."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (B, C, T) input, got {x.shape}")
    B, C, T = x.shape
    O, Cw, K = weight.shape
    if C != Cw:
        raise ShapeError(f"conv1d: input channels (axis 1) = {C} but weight expects {Cw}")
    T_out = conv_out_len(T, K, stride, padding)
    if T_out < 1:
        raise ShapeError(f"conv1d: time axis {T} too short for kernel {K} (padding {padding}, stride {stride})")

    # channels-last im2col: cols[b, t, k, c] = xpad[b, c, t*stride + k]
    Tp = T + 2 * padding
    xpt = np.zeros((B, Tp, C), dtype=x.dtype)
    xpt[:, padding : padding + T, :] = x.data.transpose(0, 2, 1)
    span = stride * (T_out - 1) + 1
    cols = np.empty((B, T_out, K, C), dtype=x.dtype)
    for k in range(K):
        cols[:, :, k, :] = xpt[:, k : k + span : stride, :]
    cols = cols.reshape(B * T_out, K * C)
    w2 = np.ascontiguousarray(weight.data.transpose(0, 2, 1)).reshape(O, K * C)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, T_out, O).transpose(0, 2, 1))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * T_out, O)
        gw = (g2.T @ cols).reshape(O, K, C).transpose(0, 2, 1) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, T_out, K, C)
            gxp = np.zeros((B, Tp, C), dtype=g.dtype)
            for k in range(K):
                gxp[:, k : k + span : stride, :] += gcols[:, :, k, :]
            gx = np.ascontiguousarray(gxp[:, padding : padding + T, :].transpose(0, 2, 1))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv1d", inputs, bw)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (B, C, T).

    In training mode the batch statistics are used and the running buffers are
    updated in place (the running variance uses the unbiased batch variance).
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d: expected (B, C, T) input, got {x.shape}")
    B, C, T = x.shape
    if gamma.shape != (C,):
        raise ShapeError(f"batchnorm1d: channels (axis 1) = {C} but layer has {gamma.shape[0]}")
    n = B * T
    if training:
        if n < 2:
            raise ShapeError(f"batchnorm1d: training mode needs B*T >= 2 per channel, got {n}")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                gx = (inv[None, :, None] / n) * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _make(out, "batchnorm1d", (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features (last axis) = {x.shape[-1]} but weight expects {weight.shape[1]}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", inputs, bw)


def _mean_axis(x: Tensor, axis: int, keepdims: bool, op: str) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected (B, C, T) input, got {x.shape}")
    n = x.shape[axis]
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(x.dtype),)

    return _make(out, op, (x,), bw)


def avg_pool_time(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, C, 1)."""
    return _mean_axis(x, 2, True, "avg_pool_time")


def avg_pool_channel(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, 1, T)."""
    return _mean_axis(x, 1, True, "avg_pool_channel")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, C)."""
    return _mean_axis(x, 2, False, "global_avg_pool")


def _check_logits(logits: Tensor, op: str) -> None:
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"{op}: expected (B, K) logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError(f"{op}: non-finite logits")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    _check_logits(logits, "softmax")
    p = np.exp(_log_softmax(logits.data))

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", (logits,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy, fused with log-softmax."""
    _check_logits(logits, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    loss = np.asarray(-logp[np.arange(B), labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return _make(loss, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Module:
    """Tiny container base: named parameters, buffers and a train/eval flag."""

    training = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{k}.{i}", item

    def _own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def _own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, p) for n, p in self._own_parameters()]
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, b) for n, b in self._own_buffers()]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng=None, dtype=np.float32):
        if stride < 1 or padding < 0 or kernel_size < 1:
            raise ValueError("conv1d: kernel_size/stride must be positive and padding non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size
        self.weight = Tensor(_kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def _own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def out_len(self, T: int) -> int:
        return conv_out_len(T, self.kernel_size, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(_kaiming_uniform(rng, (out_features, in_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def _own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ResidualBlock1d(Module):
    """Two conv-BN stages plus a shortcut, ReLU after the addition.

    The shortcut is the identity when shapes agree and a 1x1 strided
    convolution followed by batch norm otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, kernel_size: int = 3,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        pad = kernel_size // 2
        self.conv1 = Conv1d(in_channels, out_channels, kernel_size, stride, pad, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(out_channels, dtype=dtype)
        self.conv2 = Conv1d(out_channels, out_channels, kernel_size, 1, pad, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv1d(in_channels, out_channels, 1, stride, 0, rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm1d(out_channels, dtype=dtype)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def out_len(self, T: int) -> int:
        return self.conv2.out_len(self.conv1.out_len(T))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.shortcut_conv is None:
            return x
        return self.shortcut_bn(self.shortcut_conv(x))

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = self.shortcut(x)
        if h.shape != s.shape:
            raise ShapeError(f"residual_block: main path {h.shape} vs shortcut {s.shape}")
        return relu(h + s)


def residual_block(x: Tensor, block: ResidualBlock1d) -> Tensor:
    return block(x)
