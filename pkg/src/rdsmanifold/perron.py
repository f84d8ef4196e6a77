"""Lyapunov-Perron operators on exponentially weighted path spaces.

A stable solve lives on ``[0, T_max]`` and an unstable solve on
``[-T_max, 0]`` (relative to a noise anchor ``t0``). Both use the same
discrete operator

    J(u)(t_i) = e^{A t_i + Z_i} xi
              + int_{t_0}^{t_i} k(t_i, s) P^- G(s, u(s)) ds
              + int_{t_N}^{t_i} k(t_i, s) P^+ G(s, u(s)) ds,

with ``k(t, s) = exp(A (t - s) + Z(t) - Z(s))`` and ``Z`` the trapezoid
running integral of z. Only the linear term and the anchor of ``Z`` differ
between the stable and unstable cases. Integrals use the exact exponential
kernel with trapezoid weights (see :mod:`rdsmanifold.kernels`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ConvergenceError,
    GapConditionError,
    InputError,
    InsufficientPathError,
)
from .kernels import conv_backward, conv_forward
from .model import check_gap
from .stochastics import TimeGrid, _steps, cumulative_integral, write_columns_csv

STABLE, UNSTABLE = "stable", "unstable"


@dataclass(frozen=True)
class PerronConfig:
    eta: float
    T_max: float
    step: float
    fixed_point_tol: float = 1e-12
    max_iterations: int = 200
    tail_tol: float = 1e-8

    @classmethod
    def for_model(cls, model, eta, step, tail_tol=1e-8, kinds=(STABLE, UNSTABLE), **kw):
        """Pick the shortest grid-aligned ``T_max`` meeting ``tail_tol``."""
        rates = []
        if STABLE in kinds:
            rates.append(model.alpha - eta)
        if UNSTABLE in kinds:
            rates.append(eta - model.beta)
        rate = min(r for r in rates if math.isfinite(r))
        T = math.log(1.0 / tail_tol) / rate
        T = math.ceil(T / step - 1e-9) * step
        return cls(eta=eta, T_max=T, step=step, tail_tol=tail_tol, **kw)

    def truncation_factor(self, model, kind):
        if kind == STABLE:
            return math.exp(-(model.alpha - self.eta) * self.T_max)
        return math.exp(-(self.eta - model.beta) * self.T_max)

    def validate(self, model, kind, lip):
        if not self.step > 0 or not self.T_max > 0:
            raise ConfigurationError("T_max and step must be positive")
        _steps(self.T_max, self.step, "T_max")
        gap = check_gap(model, lip, self.eta, 1)
        if not gap.admissible:
            raise GapConditionError(
                "contraction not certified: " + "; ".join(gap.failing),
                order=1, inequality=gap.failing[0])
        if kind in (STABLE, UNSTABLE):
            fac = self.truncation_factor(model, kind)
            if fac > self.tail_tol * (1 + 1e-9):
                raise ConfigurationError(
                    f"T_max={self.T_max} gives truncation factor {fac:.3e} > tail_tol={self.tail_tol:.1e}")
        return gap


@dataclass(frozen=True, eq=False)
class WeightedPath:
    """Path on ``grid`` with its ``C_eta`` weight data.

    ``states`` has shape (size, n) or (size, n, q) for q columns.
    ``log_weight[i] = eta * t_i + Z_i`` so the weighted magnitude is
    ``exp(-log_weight[i]) * |u_i|``.
    """

    grid: TimeGrid
    states: np.ndarray
    eta: float
    log_weight: np.ndarray
    t0: float = 0.0
    kind: str = STABLE

    @property
    def times(self):
        return self.grid.times

    def norm(self):
        return weighted_norm(self)


def _pointwise_norm(states):
    """Euclidean norm for vectors, spectral norm for (n, p) maps, Frobenius beyond."""
    s = np.asarray(states)
    if s.ndim == 2:
        return np.linalg.norm(s, axis=-1)
    if s.ndim == 3:
        if s.shape[2] == 1:
            return np.linalg.norm(s[:, :, 0], axis=-1)
        return np.linalg.norm(s, ord=2, axis=(1, 2))
    return np.linalg.norm(s.reshape(s.shape[0], -1), axis=-1)


def weighted_norm(u):
    """``sup_i exp(-eta t_i - Z_i) |u(t_i)|`` over the grid."""
    if len(u.log_weight) != u.states.shape[0]:
        raise ConfigurationError("weight data does not match the path grid")
    return float(np.max(np.exp(-u.log_weight) * _pointwise_norm(u.states)))


class PerronProblem:
    """Precomputed kernels for one (system, anchor, config, kind)."""

    def __init__(self, system, config, kind=STABLE, t0=0.0):
        if kind not in (STABLE, UNSTABLE):
            raise ConfigurationError(f"unknown manifold kind {kind!r}")
        model = system.model
        g = system.grid
        if abs(g.step - config.step) > 1e-9 * config.step:
            raise ConfigurationError(
                f"config step {config.step} differs from noise grid step {g.step}")
        self.system, self.config, self.kind, self.t0 = system, config, kind, float(t0)
        self.model = model
        h = config.step
        N = _steps(config.T_max, h, "T_max")
        self.N, self.h = N, h
        i_anchor = g.index(t0)
        lo = i_anchor if kind == STABLE else i_anchor - N
        if lo < 0 or lo + N >= g.size:
            raise InsufficientPathError(
                f"noise grid [{g.t_min}, {g.t_max}] does not cover the {kind} window "
                f"at anchor {t0} with T_max={config.T_max}")
        self.idx = np.arange(lo, lo + N + 1)
        rel = np.arange(N + 1) if kind == STABLE else np.arange(-N, 1)
        self.grid = TimeGrid(int(rel[0]), int(rel[-1]), h)
        self.t = rel * h
        z = system.z(self.idx)
        Z = cumulative_integral(z, h)
        if kind == UNSTABLE:
            Z = Z - Z[-1]
        self.Z = Z
        lam = model.eigenvalues
        self.lam = lam
        self.logfac = lam[None, :] * h + np.diff(Z)[:, None]
        self.lin = np.exp(lam[None, :] * self.t[:, None] + Z[:, None])
        self.minus = model.minus_index
        self.plus = model.plus_index
        self.coefs = system.coef(self.idx)
        self.lip = system.lip

    # the "own" subspace carries xi, the complementary one carries h(xi)
    @property
    def own(self):
        return self.minus if self.kind == STABLE else self.plus

    @property
    def other(self):
        return self.plus if self.kind == STABLE else self.minus

    @property
    def anchor_row(self):
        return 0 if self.kind == STABLE else self.N

    def log_weight(self, eta):
        return eta * self.t + self.Z

    def wrap(self, states, eta=None):
        eta = self.config.eta if eta is None else eta
        return WeightedPath(self.grid, states, eta, self.log_weight(eta), self.t0, self.kind)

    def _coef_b(self, ndim_extra):
        c = self.coefs
        if self.system.noise_kind == "multiplicative":
            return c.reshape(c.shape + (1,) * ndim_extra)
        return c.reshape((c.shape[0],) + (1,) * ndim_extra + (c.shape[1],))

    def G_path(self, U):
        """G along the path; ``U`` has shape (N+1, n, q) -> same shape."""
        Ut = np.moveaxis(U, 1, -1)
        out = self.system.G(Ut, self._coef_b(Ut.ndim - 2))
        return np.moveaxis(out, -1, 1)

    def DG_path(self, order, U, *Vs):
        """``D^order G(u(s))[V_1, ...]`` with u (N+1, n) and V_k (N+1, n, q)."""
        Vt = [np.moveaxis(V, 1, -1) for V in Vs]
        extra = Vt[0].ndim - 2 if Vt else 0
        Ub = U.reshape((U.shape[0],) + (1,) * extra + (U.shape[1],))
        out = self.system.DG(order, Ub, self._coef_b(extra), *Vt)
        return np.moveaxis(out, -1, 1)

    def integrate(self, g):
        """Both kernel integrals applied to forcing ``g`` of shape (N+1, n, ...)."""
        out = np.zeros_like(g)
        if self.minus.size:
            out[:, self.minus] = conv_forward(self.logfac[:, self.minus], g[:, self.minus], self.h)
        if self.plus.size:
            out[:, self.plus] = conv_backward(self.logfac[:, self.plus], g[:, self.plus], self.h)
        return out

    def linear_term(self, xi):
        """``e^{A t + Z} xi`` for xi of shape (n,) or (n, q)."""
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return self.lin * xi[None, :]
        return self.lin[:, :, None] * xi[None, :, :]

    def check_xi(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] != self.model.n:
            raise ConfigurationError(f"xi has dimension {xi.shape[0]}, model has {self.model.n}")
        if np.any(xi[self.other] != 0):
            sub = "H-" if self.kind == STABLE else "H+"
            raise InputError(f"xi must lie in {sub}; it has components outside it")
        return xi

    def tail_bound(self, unorm, eta=None):
        """Weighted bound on the dropped tail at every output time."""
        eta = self.config.eta if eta is None else eta
        m = self.model
        if self.kind == STABLE:
            r = m.alpha - eta
            dist = self.config.T_max - self.t
        else:
            r = eta - m.beta
            dist = self.t + self.config.T_max
        if not math.isfinite(r):
            return np.zeros_like(self.t)
        return m.K * self.lip * unorm * np.exp(-r * dist) / r


def apply_J(problem, u, xi):
    """One application of the Perron operator; ``u`` is (N+1, n[, q])."""
    U = u if u.ndim == 3 else u[:, :, None]
    xi_ = xi if np.ndim(xi) == 2 else np.asarray(xi)[:, None]
    out = problem.linear_term(xi_) + problem.integrate(problem.G_path(U))
    return out if u.ndim == 3 else out[:, :, 0]


def _wnorm_cols(problem, d, eta):
    """Weighted sup norm, maximised over columns when ``d`` is (N+1, n, q)."""
    w = np.exp(-problem.log_weight(eta))
    if d.ndim == 2:
        return float(np.max(w * np.linalg.norm(d, axis=1)))
    return float(np.max(w[:, None] * np.linalg.norm(d, axis=1)))


@dataclass(eq=False)
class PerronSolution:
    path: WeightedPath
    xi: np.ndarray
    iterations: int
    diffs: list
    ratios: list
    rho: float
    tail_bound: np.ndarray
    iteration_bound: float
    problem: PerronProblem = field(repr=False, default=None)

    @property
    def graph_value(self):
        """``P^+ u(0)`` (stable) or ``P^- u(0)`` (unstable) as a full vector."""
        p = self.problem
        row = self.path.states[p.anchor_row]
        out = np.zeros_like(row)
        out[p.other] = row[p.other]
        return out

    @property
    def residual_bound(self):
        return self.rho * self.diffs[-1] if self.diffs else 0.0


def _fixed_point(problem, u0, step_fn, tol, max_it, rho, eta):
    u = u0
    diffs, ratios = [], []
    first = None
    # ratios below this level measure rounding, not the contraction
    floor = 1e3 * np.finfo(float).eps * max(_wnorm_cols(problem, u0, eta), 1e-300)
    for it in range(1, max_it + 1):
        new = step_fn(u)
        d = _wnorm_cols(problem, new - u, eta)
        if diffs and diffs[-1] > floor:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        u = new
        if first is None:
            first = d
        if d < tol:
            return u, it, diffs, ratios, first
    measured = ratios[-1] if ratios else float("nan")
    raise ConvergenceError(
        f"no convergence after {max_it} iterations (last ratio {measured:.3g}, rho {rho:.3g})",
        measured_ratio=measured, iterations=max_it)


def _iteration_bound(first, tol, rho):
    if first is None or first < tol or rho <= 0:
        return 1.0
    return math.log(tol * (1 - rho) / first) / math.log(rho) + 1.0


def solve(problem, xi):
    """Fixed point of ``J(., xi)`` starting from the linear term.

    ``xi`` may be a single vector (n,) or a column block (n, q).
    """
    cfg = problem.config
    gap = cfg.validate(problem.model, problem.kind, problem.lip)
    rho = gap.rho
    xi = problem.check_xi(xi)
    u0 = problem.linear_term(xi)
    u, it, diffs, ratios, first = _fixed_point(
        problem, u0, lambda v: apply_J(problem, v, xi),
        cfg.fixed_point_tol, cfg.max_iterations, rho, cfg.eta)
    path = problem.wrap(u)
    unorm = _wnorm_cols(problem, u, cfg.eta)
    return PerronSolution(
        path=path, xi=xi, iterations=it, diffs=diffs, ratios=ratios, rho=rho,
        tail_bound=problem.tail_bound(unorm), iteration_bound=_iteration_bound(first, cfg.fixed_point_tol, rho),
        problem=problem,
    )


def apply_Js(u, xi, system, config, t0=0.0):
    """Stable Perron operator applied to the weighted path ``u``."""
    p = PerronProblem(system, config, STABLE, t0)
    config.validate(system.model, STABLE, system.lip)
    xi = p.check_xi(xi)
    states = u.states if isinstance(u, WeightedPath) else np.asarray(u, dtype=float)
    return p.wrap(apply_J(p, states, xi))


def apply_Ju(u, xi, system, config, t0=0.0):
    """Unstable Perron operator applied to the weighted path ``u``."""
    p = PerronProblem(system, config, UNSTABLE, t0)
    config.validate(system.model, UNSTABLE, system.lip)
    xi = p.check_xi(xi)
    states = u.states if isinstance(u, WeightedPath) else np.asarray(u, dtype=float)
    return p.wrap(apply_J(p, states, xi))


def solve_stable(xi, system, config, t0=0.0):
    return solve(PerronProblem(system, config, STABLE, t0), xi)


def solve_unstable(xi, system, config, t0=0.0):
    return solve(PerronProblem(system, config, UNSTABLE, t0), xi)


def graph_stable(xi, system, config, t0=0.0):
    """``h^s(xi, theta_{t0} w) = P^+ u(0; xi)``."""
    return solve_stable(xi, system, config, t0).graph_value


def graph_unstable(xi, system, config, t0=0.0):
    """``h^u(xi, theta_{t0} w) = P^- u(0; xi)``."""
    return solve_unstable(xi, system, config, t0).graph_value


def theoretical_lipschitz(model, lip, eta, kind=STABLE):
    """Graph Lipschitz bound ``K^2 lip / (gap (1 - rho))``."""
    rho = check_gap(model, lip, eta, 1).rho
    gap = (model.alpha - eta) if kind == STABLE else (eta - model.beta)
    if not rho < 1:
        return math.inf
    return model.K ** 2 * lip / (gap * (1 - rho))


def path_lipschitz_bound(model, lip, eta):
    """Bound ``K / (1 - rho)`` on ``|u(.; xi) - u(.; xi')| / |xi - xi'|``."""
    rho = check_gap(model, lip, eta, 1).rho
    return model.K / (1 - rho) if rho < 1 else math.inf


@dataclass(eq=False)
class ManifoldGraph:
    kind: str
    base_points: np.ndarray
    values: np.ndarray
    omega_seed: int | None
    measured_lipschitz: float
    theoretical_lipschitz: float
    meta: dict = field(default_factory=dict)

    def to_csv(self, fname, model):
        own = model.minus_index if self.kind == STABLE else model.plus_index
        other = model.plus_index if self.kind == STABLE else model.minus_index
        header = [f"xi_{j + 1}" for j in own] + [f"h_{j + 1}" for j in other]
        rows = np.column_stack([self.base_points[:, own], self.values[:, other]])
        write_columns_csv(fname, header, rows, comment="rdsmanifold graph v1")

    def sidecar(self):
        return {
            "schema_version": 1,
            "kind": self.kind,
            "omega_seed": self.omega_seed,
            "measured_lipschitz": self.measured_lipschitz,
            "theoretical_lipschitz": self.theoretical_lipschitz,
            **self.meta,
        }

    def write(self, stem, model):
        self.to_csv(f"{stem}.csv", model)
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def max_secant(points, values):
    """Largest ``|values_i - values_j| / |points_i - points_j|`` over all pairs."""
    P = np.asarray(points)
    V = np.asarray(values)
    best = 0.0
    for i in range(len(P) - 1):
        dp = np.linalg.norm(P[i + 1:] - P[i], axis=-1)
        dv = np.linalg.norm(V[i + 1:] - V[i], axis=-1)
        ok = dp > 0
        if ok.any():
            best = max(best, float(np.max(dv[ok] / dp[ok])))
    return best


def build_graph(kind, base_points, system, config, t0=0.0, seed=None, batch=16):
    """Sample ``h^s`` or ``h^u`` at ``base_points`` (rows are full n-vectors)."""
    problem = PerronProblem(system, config, kind, t0)
    pts = np.atleast_2d(np.asarray(base_points, dtype=float))
    values = np.zeros_like(pts)
    iters, max_ratio, tails, resid = [], 0.0, 0.0, 0.0
    for s in range(0, len(pts), batch):
        block = pts[s:s + batch].T
        sol = solve(problem, block)
        row = sol.path.states[problem.anchor_row]
        values[s:s + batch][:, problem.other] = row[problem.other].T
        iters.append(sol.iterations)
        if sol.ratios:
            max_ratio = max(max_ratio, max(sol.ratios))
        tails = max(tails, float(sol.tail_bound[problem.anchor_row]))
        resid = max(resid, sol.residual_bound)
    model = system.model
    theo = theoretical_lipschitz(model, system.lip, config.eta, kind)
    meta = {
        "rho": check_gap(model, system.lip, config.eta, 1).rho,
        "eta": config.eta,
        "T_max": config.T_max,
        "step": config.step,
        "t0": float(t0),
        "fixed_point_tol": config.fixed_point_tol,
        "tail_tol": config.tail_tol,
        "tail_bound": tails,
        "residual_bound": resid,
        "iterations": iters,
        "max_iteration_ratio": max_ratio,
        "z0": float(system.z(system.grid.index(t0))),
        "scale": 1.0,
    }
    return ManifoldGraph(kind, pts, values, seed, max_secant(pts, values), theo, meta)


def transformed_graph(graph, z0):
    """Graph of ``T^{-1}(w, M(w))``: ``xi -> e^{z0} h(e^{-z0} xi)``.

    Each sample ``(xi, h(xi))`` maps to ``(e^{z0} xi, e^{z0} h(xi))``.
    """
    s = math.exp(z0)
    meta = dict(graph.meta)
    meta["scale"] = meta.get("scale", 1.0) * s
    return ManifoldGraph(
        graph.kind, graph.base_points * s, graph.values * s, graph.omega_seed,
        graph.measured_lipschitz, graph.theoretical_lipschitz, meta,
    )


def transformed_graph_value(xi, kind, system, config, t0=0.0):
    """Evaluate ``e^{z} h(e^{-z} xi, theta_{t0} w)`` with ``z = z(theta_{t0} w)``."""
    z = float(system.z(system.grid.index(t0)))
    s = math.exp(z)
    xi = np.asarray(xi, dtype=float)
    if kind == STABLE:
        return s * graph_stable(xi / s, system, config, t0)
    return s * graph_unstable(xi / s, system, config, t0)
