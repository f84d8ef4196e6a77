"""Random coordinate changes that remove the stochastic differential.

Multiplicative noise ``du = (Au + F(u)) dt + u o dW`` is conjugated through
``T(w, x) = x e^{-z(w)}`` to the random PDE

    du/dt = A u + z(theta_t w) u + G(theta_t w, u),
    G(w, u) = e^{-z(w)} F(e^{z(w)} u).

Additive noise ``du = (Au + F(u)) dt + dW`` is conjugated through
``T(w, x) = x - u*(w)`` with ``G(w, u) = F(u + u*(w)) - F(u*(w))`` and z = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InsufficientPathError
from .kernels import recur_backward, recur_forward
from .model import Nonlinearity, SpectralModel
from .stochastics import OUSample, TimeGrid, _steps, zero_ou

MULTIPLICATIVE, ADDITIVE = "multiplicative", "additive"
FORWARD, INVERSE = "forward", "inverse"


@dataclass(frozen=True, eq=False)
class StationarySample:
    """Samples ``u*(theta_{t_i} w)`` with shape (grid.size, n)."""

    grid: TimeGrid
    values: np.ndarray
    truncation_bound: float = 0.0

    def at(self, t):
        return self.values[self.grid.index(t)]


@dataclass(frozen=True, eq=False)
class ConjugatedSystem:
    """A model, its nonlinearity and the noise sample that fixes ``w``.

    ``exponent_sign`` selects ``G(w, u) = e^{s z} F(e^{-s z} u)``. The default
    ``s = -1`` is the choice under which ``T^{-1}(theta_t w, u(t))`` solves the
    Stratonovich equation; ``s = +1`` is kept for comparison experiments.
    """

    model: SpectralModel
    F: Nonlinearity
    noise_kind: str = MULTIPLICATIVE
    ou: OUSample | None = None
    stationary: StationarySample | None = None
    exponent_sign: int = -1

    def __post_init__(self):
        if self.noise_kind == MULTIPLICATIVE:
            if self.ou is None:
                raise ConfigurationError("multiplicative system needs an OU sample")
        elif self.noise_kind == ADDITIVE:
            if self.stationary is None:
                raise ConfigurationError("additive system needs stationary samples u*")
            if self.ou is None:
                object.__setattr__(self, "ou", zero_ou(self.stationary.grid))
        else:
            raise ConfigurationError(f"unknown noise kind {self.noise_kind!r}")

    @property
    def grid(self):
        return self.ou.grid

    @property
    def step(self):
        return self.grid.step

    @property
    def lip(self):
        return self.F.lip

    # --- noise coefficient lookup -------------------------------------
    def coef(self, idx):
        """z values (multiplicative) or u* rows (additive) at grid indices."""
        if self.noise_kind == MULTIPLICATIVE:
            return self.ou.values[idx]
        return self.stationary.values[idx]

    def coef_mid(self, i):
        """Noise coefficient at the midpoint of step ``[i, i+1]``."""
        return 0.5 * (self.coef(i) + self.coef(i + 1))

    def z(self, idx):
        return self.ou.values[idx]

    # --- G and its derivatives -----------------------------------------
    def G(self, u, c):
        """Evaluate ``G`` at state(s) ``u`` for noise coefficient(s) ``c``.

        ``u`` has shape (..., n); ``c`` broadcasts against ``u[..., 0]``
        (multiplicative) or ``u`` (additive).
        """
        u = np.asarray(u, dtype=float)
        if self.noise_kind == MULTIPLICATIVE:
            e = np.exp(self.exponent_sign * np.asarray(c))[..., None]
            return e * self.F(u / e)
        c = np.asarray(c, dtype=float)
        return self.F(u + c) - self.F(c + 0.0 * u)

    def DG(self, order, u, c, *vs):
        """``D^order_u G(u)[v_1, ..., v_order]`` at noise coefficient ``c``."""
        u = np.asarray(u, dtype=float)
        if self.noise_kind == MULTIPLICATIVE:
            e = np.exp(self.exponent_sign * np.asarray(c))[..., None]
            return e ** (1 - order) * self.F.derivative(order, u / e, *vs)
        return self.F.derivative(order, u + np.asarray(c), *vs)

    def noise_index(self, t):
        return self.grid.index(t)


def transform(system, t, x, direction=FORWARD):
    """``T(theta_t w, x)`` (forward) or its inverse."""
    i = system.noise_index(t)
    x = np.asarray(x, dtype=float)
    if system.noise_kind == MULTIPLICATIVE:
        z = system.ou.values[i]
        if direction == FORWARD:
            return x * math.exp(-z)
        if direction == INVERSE:
            return x * math.exp(z)
    else:
        us = system.stationary.values[i]
        if direction == FORWARD:
            return x - us
        if direction == INVERSE:
            return x + us
    raise ConfigurationError(f"unknown direction {direction!r}")


def conjugated_G(system, t, u):
    """``G(theta_t w, u)`` at grid time ``t``."""
    return system.G(u, system.coef(system.noise_index(t)))


def linear_stationary_solution(model, path, out_grid, truncation=40.0):
    """Stationary solution of ``du = A u dt + dW`` mode by mode.

    Stable modes integrate ``int_{-inf}^t e^{lam (t-s)} dw_j(s)`` forward from
    ``t_min - S``; unstable modes integrate ``-int_t^{inf} e^{lam (t-s)} dw_j(s)``
    backward from ``t_max + S``. Weights are exact for the piecewise-linear
    interpolant of the path.
    """
    lam = model.eigenvalues
    n = model.n
    g = path.grid
    h = g.step
    if path.channels < n:
        raise ConfigurationError(f"need {n} noise channels, path has {path.channels}")
    if abs(out_grid.step - h) > 1e-9 * h:
        raise ConfigurationError("output grid step must equal the path step")
    plus, minus = model.plus_mask, model.minus_mask
    if np.any(lam[minus] >= 0) or np.any(lam[plus] <= 0):
        raise ConfigurationError("stationary solution needs stable < 0 < unstable eigenvalues")
    lo = out_grid.t_min - (truncation if minus.any() else 0.0)
    hi = out_grid.t_max + (truncation if plus.any() else 0.0)
    if not g.covers(lo, hi):
        raise InsufficientPathError(
            f"path covers [{g.t_min}, {g.t_max}], stationary solution needs [{lo}, {hi}]")
    m = _steps(truncation, h, "truncation")
    i_lo, i_hi = g.index(out_grid.t_min), g.index(out_grid.t_max)
    w = path.values[:, :n]
    out = np.zeros((out_grid.size, n))
    bounds = []
    if minus.any():
        idx = np.flatnonzero(minus)
        lm = lam[idx]
        a = np.exp(lm * h)
        wt = np.expm1(lm * h) / (lm * h)
        seg = w[i_lo - m:i_hi + 1, idx]
        dw = np.diff(seg, axis=0)
        y = recur_forward(np.tile(a, (len(dw), 1)), wt * dw)
        out[:, idx] = y[m:]
        bounds.append(np.max(np.exp(lm * truncation) * 3.0 / np.sqrt(-2.0 * lm)))
    if plus.any():
        idx = np.flatnonzero(plus)
        lp = lam[idx]
        a = np.exp(-lp * h)
        wt = -np.expm1(-lp * h) / (lp * h)
        seg = w[i_lo:i_hi + m + 1, idx]
        dw = np.diff(seg, axis=0)
        y = recur_backward(np.tile(a, (len(dw), 1)), -wt * dw)
        out[:, idx] = y[:out_grid.size]
        bounds.append(np.max(np.exp(-lp * truncation) * 3.0 / np.sqrt(2.0 * lp)))
    return StationarySample(out_grid, out, truncation_bound=float(max(bounds)))
