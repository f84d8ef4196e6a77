"""Derivatives of the Perron fixed point and of the manifold graphs.

The k-th derivative ``V_k = D^k_xi u`` solves the linear equation

    V_k = S_k + T V_k + integral(R_k),

where ``T V = integral(D_u G(u) V)`` with the same kernels as the Perron
operator, ``S_1 = e^{A t + Z} P_own`` and ``S_k = 0`` for k >= 2, and the
forcing ``R_k`` collects every term of ``D^k_xi [G(u(xi))]`` except
``D_u G(u) V_k`` (Faa di Bruno over set partitions of the k directions).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GapConditionError
from .model import check_gap, gap_value
from .perron import (
    STABLE,
    PerronProblem,
    WeightedPath,
    _fixed_point,
    _wnorm_cols,
    solve,
)


def _set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


@dataclass(eq=False)
class DerivativePath:
    """``D^order_xi u`` along the Perron grid.

    ``jacobians`` has shape (N+1, n, p, ..., p) with ``order`` trailing
    axes indexed by the basis of the xi-subspace.
    """

    path: WeightedPath
    jacobians: np.ndarray
    order: int
    eta_shifted: float
    delta: float
    iterations: int
    ratios: list
    contraction_bound: float
    basis: np.ndarray
    problem: PerronProblem = field(repr=False, default=None)
    base: object = field(repr=False, default=None)


def select_delta(model, eta, kind=STABLE):
    """``delta = min(0.1 (alpha - eta), 0.1 (eta - beta))``."""
    return min(0.1 * (model.alpha - eta), 0.1 * (eta - model.beta))


def check_delta_margins(model, lip, eta, delta, kind=STABLE, samples=21):
    """Verify the margins used for the first derivative.

    Stable: ``beta < eta - 2 delta`` and the gap inequality at ``eta - g`` for
    ``g`` in ``[0, 2 delta]``; unstable mirrors this with ``eta + g``.
    Returns the contraction bound at the shifted weight.
    """
    a, b, K = model.alpha, model.beta, model.K
    sign = -1.0 if kind == STABLE else 1.0
    edge = eta + sign * 2 * delta
    if not b < edge < a:
        ineq = "beta < eta - 2*delta" if kind == STABLE else "eta + 2*delta < alpha"
        raise GapConditionError(f"margin fails: {ineq} (eta={eta}, delta={delta})",
                                order=1, inequality=ineq)
    for gam in np.linspace(0.0, 2 * delta, samples):
        val = gap_value(K, lip, a, b, eta + sign * gam)
        if not val < 1:
            raise GapConditionError(
                f"K*lip*(1/((eta{'-' if sign < 0 else '+'}{gam:.3g})-beta)+1/(alpha-(...))) = {val} >= 1",
                order=1, inequality="shifted gap")
    return gap_value(K, lip, a, b, eta + sign * delta)


def _require_order(system, order):
    if system.F.smoothness_order < order:
        raise ConfigurationError(
            f"nonlinearity '{system.F.name}' is only C^{system.F.smoothness_order}; order {order} requested")


def solve_derivative(xi, fixed_point, system, config, delta=None, t0=0.0, kind=STABLE):
    """First derivative ``D_xi u(.; xi)`` as a map from the xi-subspace.

    ``fixed_point`` is a :class:`PerronSolution` for ``xi`` (or None, in which
    case it is computed).
    """
    model = system.model
    _require_order(system, 1)
    problem = fixed_point.problem if fixed_point is not None else PerronProblem(system, config, kind, t0)
    kind = problem.kind
    eta = config.eta
    if delta is None:
        delta = select_delta(model, eta, kind)
    bound = check_delta_margins(model, system.lip, eta, delta, kind)
    if fixed_point is None:
        fixed_point = solve(problem, xi)
    u = fixed_point.path.states
    own = problem.own
    p = own.size
    basis = np.zeros((model.n, p))
    basis[own, np.arange(p)] = 1.0
    S = problem.linear_term(basis)
    eta_s = eta - delta if kind == STABLE else eta + delta

    def step(V):
        return S + problem.integrate(problem.DG_path(1, u, V))

    V, it, diffs, ratios, _ = _fixed_point(
        problem, S, step, config.fixed_point_tol, config.max_iterations, bound, eta_s)
    return DerivativePath(problem.wrap(V, eta_s), V, 1, eta_s, delta, it, ratios, bound,
                          basis, problem, fixed_point)


def graph_derivative(dpath):
    """Complementary-subspace rows of the anchor-time Jacobian (shape n x p...).

    Rows of the xi-subspace are zeroed so the result maps into H+ (stable)
    or H- (unstable) as a full n-row array.
    """
    p = dpath.problem
    J = np.array(dpath.jacobians[p.anchor_row])
    J[p.own] = 0.0
    return J


def _forcing(problem, u, lower, order):
    """``R_order`` on the grid: shape (N+1, n, p^order) flattened multi-index."""
    p = lower[1].shape[2]
    N1, n = u.shape
    idx_all = list(itertools.product(range(p), repeat=order))
    out = np.zeros((N1, n, len(idx_all)))
    parts = [pt for pt in _set_partitions(range(order)) if len(pt) >= 2]
    for col, multi in enumerate(idx_all):
        acc = np.zeros((N1, n, 1))
        for part in parts:
            vs = []
            for block in part:
                D = lower[len(block)]
                sub = tuple(multi[b] for b in sorted(block))
                vs.append(D[(slice(None), slice(None)) + sub][:, :, None])
            acc += problem.DG_path(len(part), u, *vs)
        out[:, :, col] = acc[:, :, 0]
    return out


def solve_higher_derivative(order, lower, system, config):
    """Order-``order`` derivative from the lower-order ones.

    ``lower`` is a list of :class:`DerivativePath` for orders 1..order-1
    (all from the same fixed point). Refuses if any gap inequality up to
    ``order`` fails.
    """
    if order < 2:
        raise ConfigurationError("use solve_derivative for order 1")
    if len(lower) != order - 1:
        raise ConfigurationError(f"need derivatives of orders 1..{order - 1}")
    model = system.model
    gap = check_gap(model, system.lip, config.eta, order)
    if not gap.admissible:
        failing = gap.failing[0]
        i = next((k for k, g in enumerate(gap.per_order_values, 1) if not g < 1), order)
        raise GapConditionError(f"order-{order} derivative refused: {failing}",
                                order=i, inequality=failing)
    _require_order(system, order)
    first = lower[0]
    problem = first.problem
    u = first.base.path.states
    tensors = {k + 1: d.jacobians for k, d in enumerate(lower)}
    p = first.jacobians.shape[2]
    R = _forcing(problem, u, tensors, order)
    forced = problem.integrate(R)
    eta_k = order * config.eta
    bound = gap.per_order_values[order - 1]

    def step(V):
        return forced + problem.integrate(problem.DG_path(1, u, V))

    V, it, diffs, ratios, _ = _fixed_point(
        problem, forced, step, config.fixed_point_tol, config.max_iterations, bound, eta_k)
    V = V.reshape((V.shape[0], V.shape[1]) + (p,) * order)
    return DerivativePath(problem.wrap(V, eta_k), V, order, eta_k, 0.0, it, ratios, bound,
                          first.basis, problem, first.base)


def derivative_stack(xi, system, config, order, t0=0.0, kind=STABLE):
    """Fixed point plus all derivatives up to ``order``."""
    problem = PerronProblem(system, config, kind, t0)
    if order >= 2:
        gap = check_gap(system.model, system.lip, config.eta, order)
        if not gap.admissible:
            raise GapConditionError("; ".join(gap.failing), order=order,
                                    inequality=gap.failing[0])
    sol = solve(problem, xi)
    stack = [solve_derivative(xi, sol, system, config)]
    for k in range(2, order + 1):
        stack.append(solve_higher_derivative(k, stack, system, config))
    return sol, stack


def operator_gap(d1, d2):
    """Weighted operator-norm distance between two first-derivative paths."""
    p = d1.problem
    return _wnorm_op(p, d1.jacobians - d2.jacobians, d1.eta_shifted)


def _wnorm_op(problem, D, eta):
    w = np.exp(-problem.log_weight(eta))
    return float(np.max(w * np.linalg.norm(D, ord=2, axis=(1, 2))))


def continuity_probe(xi0, radius, samples, system, config, t0=0.0, kind=STABLE,
                     halvings=4, seed=0):
    """Modulus of continuity of ``xi -> D_xi u`` around ``xi0``.

    Returns ``[(r, gap), ...]`` for ``r = radius, radius/2, ...``; ``gap`` is
    the largest weighted operator-norm difference over ``samples`` points on
    the sphere of radius ``r`` in the xi-subspace.
    """
    problem = PerronProblem(system, config, kind, t0)
    xi0 = problem.check_xi(xi0)
    base = solve_derivative(xi0, solve(problem, xi0), system, config)
    rng = np.random.default_rng(seed)
    own = problem.own
    dirs = rng.standard_normal((samples, own.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    table = []
    for k in range(halvings + 1):
        r = radius / 2 ** k
        worst = 0.0
        if r > 0:
            for d in dirs:
                xi = xi0.copy()
                xi[own] += r * d
                dk = solve_derivative(xi, solve(problem, xi), system, config)
                worst = max(worst, operator_gap(dk, base))
        table.append((r, worst))
    return table


def fd_graph_jacobian(graph_fn, xi, own, step=None):
    """Central finite differences of ``graph_fn`` in the ``own`` coordinates.

    Default step ``1e-5 |xi| + 1e-7``.
    """
    xi = np.asarray(xi, dtype=float)
    h = 1e-5 * np.linalg.norm(xi) + 1e-7 if step is None else step
    cols = []
    for j in own:
        e = np.zeros_like(xi)
        e[j] = h
        cols.append((graph_fn(xi + e) - graph_fn(xi - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_graph_hessian(graph_fn, xi, own, step):
    """Second central differences ``d^2 h / dxi_a dxi_b`` (shape n x p x p)."""
    xi = np.asarray(xi, dtype=float)
    p = len(own)
    out = np.zeros((xi.size, p, p))
    f0 = graph_fn(xi)
    for a, ja in enumerate(own):
        ea = np.zeros_like(xi)
        ea[ja] = step
        out[:, a, a] = (graph_fn(xi + ea) - 2 * f0 + graph_fn(xi - ea)) / step ** 2
        for b in range(a + 1, p):
            eb = np.zeros_like(xi)
            eb[own[b]] = step
            val = (graph_fn(xi + ea + eb) - graph_fn(xi + ea - eb)
                   - graph_fn(xi - ea + eb) + graph_fn(xi - ea - eb)) / (4 * step ** 2)
            out[:, a, b] = out[:, b, a] = val
    return out
