"""Backend selection for the row kernels.

The compiled extension ``aoaslu._ckernels`` is used when it imports; the
numpy implementation in ``aoaslu._pykernels`` is the fallback. Set
``AOASLU_KERNELS=python`` to force the fallback at import time, or call
:func:`use_backend` at runtime.

Wrappers here flatten leading axes so kernels always see 2-D contiguous rows.
"""

import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _initial_backend():
    requested = os.environ.get("AOASLU_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(f"kernel backend {requested!r} unavailable; have {available_backends()}")
        return requested
    return "cython" if "cython" in _BACKENDS else "python"


BACKEND = _initial_backend()
_impl = _BACKENDS[BACKEND]


def set_backend(name):
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    BACKEND = name
    _impl = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax_forward(x, mask=None):
    shape = x.shape
    m = None
    if mask is not None:
        m = _rows(np.broadcast_to(mask, shape))
    return _impl.softmax_forward(_rows(x), m).reshape(shape)


def softmax_backward(y, gy):
    return _impl.softmax_backward(_rows(y), _rows(gy)).reshape(y.shape)


def layer_norm_forward(x, gamma, beta, eps):
    y, xhat, rstd = _impl.layer_norm_forward(
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), float(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layer_norm_backward(gy, xhat, rstd, gamma):
    gx, gg, gb = _impl.layer_norm_backward(_rows(gy), xhat, rstd, np.ascontiguousarray(gamma))
    return gx.reshape(gy.shape), gg, gb


def gelu_forward(x):
    return _impl.gelu_forward(_rows(x)).reshape(x.shape)


def gelu_backward(x, gy):
    return _impl.gelu_backward(_rows(x), _rows(gy)).reshape(x.shape)
