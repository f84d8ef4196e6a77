"""Diagonal generators with an exponential dichotomy, nonlinearities and gap checks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from .errors import (
    ConfigurationError,
    DichotomyViolationError,
    InvalidModelError,
)

PLUS, MINUS, FULL = "plus", "minus", "full"


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Real diagonal generator ``A = diag(eigenvalues)`` split into H+ and H-.

    ``unstable`` holds 0-based mode indices. ``alpha``/``beta`` default to the
    smallest unstable and the largest stable eigenvalue.
    """

    eigenvalues: np.ndarray
    unstable: tuple
    K: float = 1.0
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).ravel()
        object.__setattr__(self, "eigenvalues", lam)
        n = lam.size
        unstable = tuple(sorted({int(i) for i in self.unstable}))
        if any(i < 0 or i >= n for i in unstable):
            raise InvalidModelError(f"unstable indices {unstable} out of range for n={n}")
        object.__setattr__(self, "unstable", unstable)
        if self.K < 1:
            raise InvalidModelError("dichotomy constant K must be >= 1")
        mask = np.zeros(n, dtype=bool)
        mask[list(unstable)] = True
        object.__setattr__(self, "plus_mask", mask)
        object.__setattr__(self, "minus_mask", ~mask)
        alpha = self.alpha if self.alpha is not None else (
            float(lam[mask].min()) if mask.any() else math.inf)
        beta = self.beta if self.beta is not None else (
            float(lam[~mask].max()) if (~mask).any() else -math.inf)
        if not alpha > beta:
            raise InvalidModelError(f"need alpha > beta, got alpha={alpha}, beta={beta}")
        if mask.any() and lam[mask].min() < alpha:
            raise InvalidModelError("an unstable eigenvalue lies below alpha")
        if (~mask).any() and lam[~mask].max() > beta:
            raise InvalidModelError("a stable eigenvalue lies above beta")
        object.__setattr__(self, "alpha", float(alpha))
        object.__setattr__(self, "beta", float(beta))

    @property
    def n(self):
        return self.eigenvalues.size

    @property
    def plus_index(self):
        return np.flatnonzero(self.plus_mask)

    @property
    def minus_index(self):
        return np.flatnonzero(self.minus_mask)


def _check_dim(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n:
        raise ConfigurationError(f"state dimension {x.shape[-1]} != model dimension {model.n}")
    return x


def project(model, x, sign):
    """Coordinate projection onto H+ (``"plus"``) or H- (``"minus"``)."""
    x = _check_dim(model, x)
    if sign == PLUS:
        return np.where(model.plus_mask, x, 0.0)
    if sign == MINUS:
        return np.where(model.minus_mask, x, 0.0)
    raise ConfigurationError(f"unknown projection {sign!r}")


def semigroup_apply(model, t, x, part=FULL):
    """Apply ``e^{At}`` to the selected part of ``x``.

    Negative times are only defined on H+; asking for them on H- raises
    :class:`DichotomyViolationError`.
    """
    x = _check_dim(model, x)
    if part == FULL:
        if t < 0 and np.any(x[..., model.minus_mask] != 0):
            raise DichotomyViolationError("e^{At} with t < 0 is undefined on H-")
        sel = x
    elif part in (PLUS, MINUS):
        if part == MINUS and t < 0:
            raise DichotomyViolationError("e^{At} with t < 0 is undefined on H-")
        sel = project(model, x, part)
    else:
        raise ConfigurationError(f"unknown part {part!r}")
    return np.exp(model.eigenvalues * t) * sel


@dataclass
class GapReport:
    eta: float
    order: int
    K: float
    lip: float
    alpha: float
    beta: float
    per_order_values: list
    admissible: bool
    eta_window: tuple | None
    optimal_eta: float
    failing: list = field(default_factory=list)

    @property
    def rho(self):
        return self.per_order_values[0]

    def to_dict(self):
        d = asdict(self)
        d["per_order_values"] = [_json_float(g) for g in self.per_order_values]
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _json_float(x):
    return x if math.isfinite(x) else str(x)


def gap_value(K, lip, alpha, beta, eta):
    """``K lip (1/(eta - beta) + 1/(alpha - eta))``; inf outside ``(beta, alpha)``."""
    if not beta < eta < alpha:
        return math.inf
    return K * lip * (1.0 / (eta - beta) + 1.0 / (alpha - eta))


def check_gap(model, lip, eta, order=1):
    """Evaluate the gap inequalities up to ``order`` at ``eta``."""
    if not model.alpha > model.beta:
        raise InvalidModelError("alpha must exceed beta")
    if lip < 0:
        raise ConfigurationError("lip must be non-negative")
    if order < 1:
        raise ConfigurationError("order must be >= 1")
    a, b, K = model.alpha, model.beta, model.K
    g = [gap_value(K, lip, a, b, i * eta) for i in range(1, order + 1)]
    failing = []
    if not b < order * eta < a:
        failing.append(f"beta < {order}*eta < alpha fails: {order}*eta = {order * eta!r}")
    for i, gi in enumerate(g, start=1):
        if not gi < 1:
            failing.append(f"order {i}: K*lip*(1/({i}eta-beta)+1/(alpha-{i}eta)) = {gi!r} >= 1")
    admissible = not failing

    window, best = None, None
    if math.isfinite(a) and math.isfinite(b):
        res = 1e-3 * (a - b)
        etas = b + res * np.arange(1, int(round((a - b) / res)))
        ok = []
        for e in etas:
            vals = [gap_value(K, lip, a, b, i * e) for i in range(1, order + 1)]
            if b < order * e < a and max(vals) < 1:
                ok.append((e, max(vals)))
        if ok:
            window = (float(ok[0][0]), float(ok[-1][0]))
            best = float(min(ok, key=lambda p: p[1])[0])
        optimal = 0.5 * (a + b) if order == 1 else (best if best is not None else 0.5 * (a + b))
    else:
        optimal = 0.5 * (a + b) if math.isfinite(a + b) else eta
    return GapReport(
        eta=float(eta), order=order, K=K, lip=float(lip), alpha=a, beta=b,
        per_order_values=g, admissible=admissible, eta_window=window,
        optimal_eta=float(optimal), failing=failing,
    )


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Vectorised map ``F`` acting on the last axis of its argument.

    ``derivative_fn(order, u, *vs)`` returns ``D^order F(u)[v_1, ..., v_order]``
    with broadcasting over leading axes.
    """

    evaluate_fn: Callable
    lip: float
    smoothness_order: int = 0
    fixes_origin: bool = True
    derivative_fn: Callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, u):
        return self.evaluate_fn(np.asarray(u, dtype=float))

    def evaluate(self, u):
        return self(u)

    def derivative(self, order, u, *vs):
        if order == 0:
            return self(u)
        if order > self.smoothness_order or self.derivative_fn is None:
            raise ConfigurationError(
                f"{self.name} nonlinearity has no derivative of order {order}")
        if len(vs) != order:
            raise ConfigurationError(f"order-{order} derivative needs {order} directions")
        return self.derivative_fn(order, np.asarray(u, dtype=float), *vs)

    def jacobian(self, u):
        """Dense ``DF(u)`` with shape ``u.shape + (n,)``."""
        u = np.asarray(u, dtype=float)
        n = u.shape[-1]
        eye = np.eye(n)
        cols = [self.derivative(1, u, np.broadcast_to(eye[j], u.shape)) for j in range(n)]
        return np.stack(cols, axis=-1)


def zero_nonlinearity(n):
    return Nonlinearity(
        lambda u: np.zeros_like(u), lip=0.0, smoothness_order=10**6,
        derivative_fn=lambda k, u, *vs: np.zeros(np.broadcast_shapes(u.shape, *(np.shape(v) for v in vs))),
        name="zero", params={"n": n},
    )


def linear_nonlinearity(B, eps=1.0):
    """``F(u) = eps * B u`` with ``lip = eps * ||B||_2``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    M = eps * B

    def deriv(k, u, *vs):
        if k == 1:
            return np.einsum("ij,...j->...i", M, vs[0]) + 0.0 * u
        return np.zeros(np.broadcast_shapes(u.shape, *(np.shape(v) for v in vs)))

    return Nonlinearity(
        lambda u: np.einsum("ij,...j->...i", M, u),
        lip=float(abs(eps) * np.linalg.norm(B, 2)), smoothness_order=10**6,
        derivative_fn=deriv, name="linear", params={"eps": eps, "B": B.tolist()},
    )


def _componentwise(name, eps, B, radius, derivs, lip_profile, order, params):
    """``F_j(u) = eps * r * f((B u)_j / r)`` for a scalar profile ``f``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    r = float(radius)

    def ev(u):
        s = np.einsum("ij,...j->...i", B, u) / r
        return eps * r * derivs[0](s)

    def deriv(k, u, *vs):
        s = np.einsum("ij,...j->...i", B, u) / r
        out = eps * r ** (1 - k) * derivs[k](s)
        for v in vs:
            out = out * np.einsum("ij,...j->...i", B, v)
        return out

    return Nonlinearity(
        ev, lip=float(abs(eps) * lip_profile * np.linalg.norm(B, 2)),
        smoothness_order=order, derivative_fn=deriv, name=name,
        params={"eps": eps, "B": B.tolist(), "radius": r, **params},
    )


def sine_nonlinearity(n, eps, B=None):
    """Componentwise ``eps * sin(B u)``; ``lip = eps * ||B||_2`` since ``|cos| <= 1``."""
    B = np.eye(n) if B is None else B
    derivs = [np.sin, np.cos, lambda s: -np.sin(s), lambda s: -np.cos(s), np.sin]
    return _componentwise("sine", eps, B, 1.0, derivs, 1.0, 4, {})


def _bump_cubic_profile():
    # s^3 (1 - s^2)^4 on [-1, 1], zero outside: C^3 with compact support.
    p = Polynomial([0, 0, 0, 1]) * Polynomial([1, 0, -1]) ** 4
    polys = [p, p.deriv(1), p.deriv(2), p.deriv(3)]

    def make(q):
        return lambda s: np.where(np.abs(s) <= 1.0, q(np.clip(s, -1.0, 1.0)), 0.0)

    crit = [c.real for c in polys[2].roots() if abs(c.imag) < 1e-12 and -1 <= c.real <= 1]
    lip = max(abs(polys[1](c)) for c in crit + [-1.0, 0.0, 1.0])
    return [make(q) for q in polys], float(lip)


def cubic_nonlinearity(n, eps, B=None, radius=1.0):
    """Compactly supported cubic ``eps * r * phi((B u)_j / r)``, ``phi(s) = s^3 (1-s^2)^4``."""
    B = np.eye(n) if B is None else B
    derivs, lip = _bump_cubic_profile()
    return _componentwise("cubic", eps, B, radius, derivs, lip, 3, {})


def certify_lipschitz(nl, probes=1000, box=1.0, seed=0, n=None, return_flag=False):
    """Largest secant ``|F(x1) - F(x2)| / |x1 - x2|`` over random pairs in ``box``.

    ``box`` is a half-width (scalar or per-coordinate) of a box centred at 0.
    With ``return_flag`` also returns whether the declared ``lip`` is exceeded.
    """
    if probes < 2:
        raise ConfigurationError("probes must be >= 2")
    half = np.atleast_1d(np.asarray(box, dtype=float))
    dim = n if n is not None else half.size
    if half.size == 1:
        half = np.full(dim, half[0])
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(-half, half, size=(probes, dim))
    x2 = rng.uniform(-half, half, size=(probes, dim))
    # close pairs probe the local derivative bound
    x2[probes // 2:] = x1[probes // 2:] + 1e-4 * rng.standard_normal((probes - probes // 2, dim))
    num = np.linalg.norm(nl(x1) - nl(x2), axis=-1)
    den = np.linalg.norm(x1 - x2, axis=-1)
    measured = float(np.max(num / den))
    if return_flag:
        return measured, measured > nl.lip * (1 + 1e-6)
    return measured
