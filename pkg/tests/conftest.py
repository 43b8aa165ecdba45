import numpy as np
import pytest


def naive_conv1d(x, w, b, stride, padding):
    """Nested-loop cross-correlation, the reference for conv1d."""
    B, C, T = x.shape
    O, _, K = w.shape
    xp = np.zeros((B, C, T + 2 * padding))
    xp[:, :, padding : padding + T] = x
    T_out = (T + 2 * padding - K) // stride + 1
    out = np.zeros((B, O, T_out))
    for bi in range(B):
        for o in range(O):
            for t in range(T_out):
                acc = 0.0 if b is None else b[o]
                for c in range(C):
                    for k in range(K):
                        acc += w[o, c, k] * xp[bi, c, t * stride + k]
                out[bi, o, t] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
