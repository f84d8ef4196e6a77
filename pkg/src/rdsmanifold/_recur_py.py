"""Pure-Python fallback for the compiled recurrences in ``_recur.pyx``."""
import numpy as np


def recur_forward(a, x, y0):
    """y[0] = y0, y[i+1] = a[i] * y[i] + x[i]."""
    n = a.shape[0]
    y = np.empty((n + 1,) + x.shape[1:])
    y[0] = y0
    a3 = a[:, :, None]
    for i in range(n):
        y[i + 1] = a3[i] * y[i] + x[i]
    return y


def recur_backward(a, x, yn):
    """y[n] = yn, y[i] = a[i] * y[i+1] + x[i]."""
    n = a.shape[0]
    y = np.empty((n + 1,) + x.shape[1:])
    y[n] = yn
    a3 = a[:, :, None]
    for i in range(n - 1, -1, -1):
        y[i] = a3[i] * y[i + 1] + x[i]
    return y
