"""Pathwise integrators for the conjugated random PDE and the reference SDEs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, InsufficientPathError
from .stochastics import TimeGrid, _steps, write_columns_csv

EXPONENTIAL_MILD = "exponential_mild"
STRATONOVICH_HEUN = "stratonovich_heun"
ADDITIVE_HEUN = "additive_heun"


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on ``grid`` (t_min = 0); ``states`` has shape (size, ..., n).

    ``t0`` is the noise anchor, i.e. the trajectory is driven by
    ``theta_{t0} w``. ``error_estimate`` (if computed) is a step-doubling
    estimate of the global error at every grid point.
    """

    grid: TimeGrid
    states: np.ndarray
    method_order: float
    scheme: str
    t0: float = 0.0
    error_estimate: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.times

    @property
    def final(self):
        return self.states[-1]

    def at(self, t):
        return self.states[self.grid.index(t)]

    def to_csv(self, fname):
        st = self.states.reshape(self.grid.size, -1)
        header = ["t"] + [f"u_{j + 1}" for j in range(st.shape[1])]
        write_columns_csv(fname, header, np.column_stack([self.times, st]))


def _n_steps(horizon, step):
    n = _steps(horizon, step, "horizon")
    if n < 0:
        raise AlignmentError("horizon must be non-negative")
    return n


def _mild_run(system, x0, i0, n, stride, lam):
    h = system.step * stride
    ou = system.ou.values
    u = np.array(x0, dtype=float)
    out = np.empty((n + 1,) + u.shape)
    out[0] = u
    for k in range(n):
        a = i0 + k * stride
        b = a + stride
        zbar = 0.5 * (ou[a] + ou[b])
        expo = (lam + zbar) * h
        e_full = np.exp(expo)
        e_half = np.exp(0.5 * expo)
        c_mid = system.coef_mid(a) if stride == 1 else system.coef(a + stride // 2)
        u_half = e_half * u
        u = e_full * u + h * e_half * system.G(u_half, c_mid)
        out[k + 1] = u
    return out


def integrate_mild(system, x0, horizon, t0=0.0, error_estimate=False):
    """Exponential midpoint rule for ``du/dt = Au + z u + G(theta_t w, u)``.

    One step: ``u <- E u + h E^{1/2} G(theta_{t+h/2} w, E^{1/2} u)`` with
    ``E = exp((lam + zbar) h)`` and ``zbar`` the trapezoid mean of z on the
    step. The linear part is exact; the scheme is first order overall.
    ``x0`` may be a single state (n,) or a batch (m, n).
    """
    g = system.grid
    h = g.step
    n = _n_steps(horizon, h)
    i0 = g.index(t0)
    if i0 + n >= g.size:
        raise InsufficientPathError(
            f"OU sample ends at {g.t_max}, integration needs {t0 + horizon}")
    lam = system.model.eigenvalues
    states = _mild_run(system, x0, i0, n, 1, lam)
    est = None
    if error_estimate:
        if n % 2:
            raise AlignmentError("step-doubling estimate needs an even number of steps")
        coarse = _mild_run(system, x0, i0, n // 2, 2, lam)
        diff = np.linalg.norm((states[::2] - coarse).reshape(n // 2 + 1, -1, len(lam)), axis=-1)
        diff = diff.max(axis=-1)
        est = np.repeat(diff, 2)[: n + 1]
    return Trajectory(TimeGrid(0, n, h), states, 1.0, EXPONENTIAL_MILD, t0=float(t0),
                      error_estimate=est)


def cocycle_check(system, x0, s, t, t0=0.0, shifted_system=None):
    """Defect ``|u(t+s, w, x0) - u(t, theta_s w, u(s, w, x0))|``.

    Without ``shifted_system`` the second leg reuses the same OU sample from
    anchor ``t0 + s``. Otherwise ``shifted_system`` must carry noise data
    recomputed for ``theta_s w`` (its time 0 is ``w``'s time ``t0 + s``).
    """
    whole = integrate_mild(system, x0, s + t, t0=t0).final
    first = integrate_mild(system, x0, s, t0=t0).final
    if shifted_system is None:
        second = integrate_mild(system, first, t, t0=t0 + s).final
    else:
        second = integrate_mild(shifted_system, first, t, t0=0.0).final
    return float(np.linalg.norm(whole - second))


def _path_increments(path, t0, n, channel, stride=1):
    g = path.grid
    i0 = g.index(t0)
    if i0 + n * stride >= g.size:
        raise InsufficientPathError(
            f"path ends at {g.t_max}, integration needs {t0 + n * stride * g.step}")
    w = path.values[i0:i0 + n * stride + 1:stride]
    return np.diff(w[:, channel] if channel is not None else w, axis=0)


def integrate_stratonovich(model, F, path, x0, horizon, t0=0.0, channel=0, stride=1):
    """Heun scheme for ``du = (Au + F(u)) dt + u o dW`` (scalar noise).

    Heun's predictor-corrector converges to the Stratonovich solution,
    equivalently the Ito equation with the extra ``u/2`` drift.
    ``stride`` coarsens the path by using every ``stride``-th sample.
    """
    h = path.grid.step * stride
    n = _n_steps(horizon, h)
    dW = _path_increments(path, t0, n, channel, stride)
    lam = model.eigenvalues
    u = np.array(x0, dtype=float)
    out = np.empty((n + 1,) + u.shape)
    out[0] = u

    def drift(v):
        return lam * v + F(v)

    for k in range(n):
        f0 = drift(u)
        pred = u + f0 * h + u * dW[k]
        u = u + 0.5 * (f0 + drift(pred)) * h + 0.5 * (u + pred) * dW[k]
        out[k + 1] = u
    return Trajectory(TimeGrid(0, n, h), out, 0.5, STRATONOVICH_HEUN, t0=float(t0))


def integrate_additive(model, F, path, x0, horizon, t0=0.0, stride=1):
    """Heun scheme for ``du = (Au + F(u)) dt + dW`` with one channel per mode."""
    h = path.grid.step * stride
    n = _n_steps(horizon, h)
    dW = _path_increments(path, t0, n, None, stride)[:, : model.n]
    lam = model.eigenvalues
    u = np.array(x0, dtype=float)
    out = np.empty((n + 1,) + u.shape)
    out[0] = u

    def drift(v):
        return lam * v + F(v)

    for k in range(n):
        f0 = drift(u)
        pred = u + f0 * h + dW[k]
        u = u + 0.5 * (f0 + drift(pred)) * h + dW[k]
        out[k + 1] = u
    return Trajectory(TimeGrid(0, n, h), out, 1.0, ADDITIVE_HEUN, t0=float(t0))
