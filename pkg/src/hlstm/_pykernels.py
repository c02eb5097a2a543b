"""Pure-numpy pointwise kernels.

Reference implementation of the hot per-step kernels. ``_ckernels.pyx``
implements the same functions in Cython; ``hlstm.kernels`` picks one at
import time.

Gate pre-activations are laid out as ``[f | i | o | g]`` blocks of width
``n`` along the last axis.
"""
import numpy as np

SIGMOID, TANH, RELU, LEAKY_RELU = 0, 1, 2, 3


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def act_forward(kind, x, slope):
    if kind == SIGMOID:
        return sigmoid(x)
    if kind == TANH:
        return np.tanh(x)
    if kind == RELU:
        return np.maximum(x, 0.0)
    if kind == LEAKY_RELU:
        return np.where(x >= 0, x, slope * x)
    raise ValueError(f"unknown activation code {kind}")


def act_backward(kind, x, y, dy, slope):
    if kind == SIGMOID:
        return dy * y * (1.0 - y)
    if kind == TANH:
        return dy * (1.0 - y * y)
    if kind == RELU:
        return np.where(x > 0, dy, 0.0)
    if kind == LEAKY_RELU:
        return np.where(x >= 0, dy, slope * dy)
    raise ValueError(f"unknown activation code {kind}")


def lstm_pointwise_forward(pre, c_prev):
    """Return ``(gates, c, tanh_c, h)`` from stacked gate pre-activations."""
    n = c_prev.shape[1]
    gates = np.empty_like(pre)
    gates[:, : 3 * n] = sigmoid(pre[:, : 3 * n])
    gates[:, 3 * n :] = np.tanh(pre[:, 3 * n :])
    f = gates[:, :n]
    i = gates[:, n : 2 * n]
    o = gates[:, 2 * n : 3 * n]
    g = gates[:, 3 * n :]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return gates, c, tanh_c, h


def lstm_pointwise_backward(dc, dh, gates, c_prev, tanh_c):
    """Return ``(dpre, dc_prev)``; ``dc``/``dh`` may be ``None`` for zero."""
    n = c_prev.shape[1]
    f = gates[:, :n]
    i = gates[:, n : 2 * n]
    o = gates[:, 2 * n : 3 * n]
    g = gates[:, 3 * n :]
    dc_total = np.zeros_like(c_prev) if dc is None else dc.copy()
    dpre = np.empty_like(gates)
    if dh is not None:
        dc_total += dh * o * (1.0 - tanh_c * tanh_c)
        dpre[:, 2 * n : 3 * n] = dh * tanh_c * o * (1.0 - o)
    else:
        dpre[:, 2 * n : 3 * n] = 0.0
    dpre[:, :n] = dc_total * c_prev * f * (1.0 - f)
    dpre[:, n : 2 * n] = dc_total * g * i * (1.0 - i)
    dpre[:, 3 * n :] = dc_total * i * (1.0 - g * g)
    dc_prev = dc_total * f
    return dpre, dc_prev
