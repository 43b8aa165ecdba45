"""Sequence-channel attention: a channel gate followed by a time-step gate.

The channel gate squeezes time by averaging, runs a pointwise bottleneck
(C -> C/r -> C with ReLU between) and squashes with a sigmoid.  The time gate
averages the channel-gated map over channels, applies one fully connected
T -> T layer and a sigmoid.  The output is ``x * alpha * beta`` where
``beta`` is computed from the channel-gated map.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor
from .nn import Conv1d, Linear, Module, avg_pool_channel, avg_pool_time, relu, sigmoid


class ScaModule(Module):
    def __init__(self, channels: int, expected_T: int, reduction: int = 4, rng=None, dtype=np.float32):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
        if expected_T < 1:
            raise ValueError("expected_T must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.expected_T, self.reduction = channels, expected_T, reduction
        self.channel_conv1 = Conv1d(channels, channels // reduction, 1, rng=rng, dtype=dtype)
        self.channel_conv2 = Conv1d(channels // reduction, channels, 1, rng=rng, dtype=dtype)
        self.seq_fc = Linear(expected_T, expected_T, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return sca_forward(x, self)


def _check(x: Tensor, m: ScaModule) -> None:
    if x.ndim != 3:
        raise ShapeError(f"sca: expected (B, C, T) input, got {x.shape}")
    if x.shape[1] != m.channels:
        raise ShapeError(f"sca: input channels (axis 1) = {x.shape[1]} but module has {m.channels}")


def channel_attention(x: Tensor, m: ScaModule) -> Tensor:
    """Channel gate alpha, shape (B, C, 1), entries in (0, 1)."""
    _check(x, m)
    z = m.channel_conv2(relu(m.channel_conv1(avg_pool_time(x))))
    return sigmoid(z)


def sequence_attention(x: Tensor, m: ScaModule) -> Tensor:
    """Time gate beta, shape (B, 1, T), entries in (0, 1)."""
    _check(x, m)
    if x.shape[2] != m.expected_T:
        raise ShapeError(f"sca: time axis (axis 2) = {x.shape[2]} but seq_fc expects {m.expected_T}")
    return sigmoid(m.seq_fc(avg_pool_channel(x)))


def sca_forward(x: Tensor, m: ScaModule) -> Tensor:
    x1 = x * channel_attention(x, m)
    return x1 * sequence_attention(x1, m)
