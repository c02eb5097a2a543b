"""Backend selection for the pointwise kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``HLSTM_KERNELS=python`` to force the fallback.
"""
import os

from hlstm import _pykernels

SIGMOID = _pykernels.SIGMOID
TANH = _pykernels.TANH
RELU = _pykernels.RELU
LEAKY_RELU = _pykernels.LEAKY_RELU

ACTIVATION_CODES = {
    "sigmoid": SIGMOID,
    "tanh": TANH,
    "relu": RELU,
    "leaky_relu": LEAKY_RELU,
}


def _load(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from hlstm import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        _load("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    return _load(name)


def use_backend(name):
    """Route every kernel call through backend ``name``; returns the previous name."""
    global BACKEND, sigmoid, act_forward, act_backward, lstm_pointwise_forward, lstm_pointwise_backward
    impl = _load(name)
    previous = globals().get("BACKEND")
    BACKEND = name
    sigmoid = impl.sigmoid
    act_forward = impl.act_forward
    act_backward = impl.act_backward
    lstm_pointwise_forward = impl.lstm_pointwise_forward
    lstm_pointwise_backward = impl.lstm_pointwise_backward
    return previous


_requested = os.environ.get("HLSTM_KERNELS", "").strip().lower()
use_backend("python" if _requested == "python" else available_backends()[0])
