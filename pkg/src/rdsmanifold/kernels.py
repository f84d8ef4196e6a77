"""Exponential-kernel convolution scans used by the Perron solvers.

The compiled recurrences in ``_recur`` are used when the extension is built;
otherwise the pure-Python loops in ``_recur_py`` are selected at import.
Set ``RDSMANIFOLD_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _recur_py

try:
    from . import _recur as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _recur_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

if _compiled is not None and not os.environ.get("RDSMANIFOLD_PURE_PYTHON"):
    BACKEND, _backend = "cython", _compiled
else:
    BACKEND, _backend = "python", _recur_py


def get_backend(name):
    """Backend module by name (``"python"`` or ``"cython"``)."""
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def _as3(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return np.ascontiguousarray(arr.reshape(arr.shape[0], arr.shape[1], -1))


def recur_forward(a, x, y0=None, backend=None):
    """Solve ``y[i+1] = a[i] y[i] + x[i]`` from ``y[0] = y0``.

    ``a`` has shape (N, m); ``x`` has shape (N, m, ...) and the trailing
    axes are carried through as independent columns.
    """
    be = backend or _backend
    a = np.ascontiguousarray(a, dtype=np.float64)
    x3 = _as3(x)
    if y0 is None:
        y0 = np.zeros(x3.shape[1:])
    y0 = np.ascontiguousarray(np.broadcast_to(np.asarray(y0, float).reshape(x3.shape[1], -1), x3.shape[1:]))
    y = be.recur_forward(a, x3, y0)
    return np.asarray(y).reshape((a.shape[0] + 1,) + np.shape(x)[1:])


def recur_backward(a, x, yn=None, backend=None):
    """Solve ``y[i] = a[i] y[i+1] + x[i]`` from ``y[N] = yn``."""
    be = backend or _backend
    a = np.ascontiguousarray(a, dtype=np.float64)
    x3 = _as3(x)
    if yn is None:
        yn = np.zeros(x3.shape[1:])
    yn = np.ascontiguousarray(np.broadcast_to(np.asarray(yn, float).reshape(x3.shape[1], -1), x3.shape[1:]))
    y = be.recur_backward(a, x3, yn)
    return np.asarray(y).reshape((a.shape[0] + 1,) + np.shape(x)[1:])


def _bcast(a, g):
    return a.reshape(a.shape + (1,) * (g.ndim - 2))


def conv_forward(logfac, g, h, backend=None):
    """Trapezoid rule for ``y(t_i) = int_{t_0}^{t_i} k(t_i, s) g(s) ds``.

    The kernel is the exact exponential ``k(t_{i+1}, t_i) = exp(logfac[i])``
    per mode, so ``y[i+1] = E_i (y[i] + h/2 g[i]) + h/2 g[i+1]``.
    """
    g = np.asarray(g, dtype=np.float64)
    e = np.exp(logfac)
    eb = _bcast(e, g)
    x = 0.5 * h * (eb * g[:-1] + g[1:])
    return recur_forward(e, x, backend=backend)


def conv_backward(logfac, g, h, backend=None):
    """Trapezoid rule for ``y(t_i) = int_{t_N}^{t_i} k(t_i, s) g(s) ds``.

    Oriented integral from the right end, so the result is minus the
    integral over ``[t_i, t_N]``.
    """
    g = np.asarray(g, dtype=np.float64)
    e = np.exp(-np.asarray(logfac))
    eb = _bcast(e, g)
    x = -0.5 * h * (g[:-1] + eb * g[1:])
    return recur_backward(e, x, backend=backend)
