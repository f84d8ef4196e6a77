"""Acceptance criteria 1-9.

Each test appends one ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary. Run ``python tests/test_acceptance.py`` for the lines
alone.
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import ACCEPTANCE_LINES, MIX, noisy_system, quiet_system  # noqa: E402
from rdsmanifold.conjugation import ConjugatedSystem  # noqa: E402
from rdsmanifold.driver import (  # noqa: E402
    DEFAULTS,
    ExperimentConfig,
    check_conjugacy,
    run_experiment,
    run_seed,
)
from rdsmanifold.errors import GapConditionError  # noqa: E402
from rdsmanifold.integrator import cocycle_check, integrate_mild  # noqa: E402
from rdsmanifold.model import (  # noqa: E402
    SpectralModel,
    check_gap,
    cubic_nonlinearity,
    linear_nonlinearity,
    sine_nonlinearity,
    zero_nonlinearity,
)
from rdsmanifold.perron import (  # noqa: E402
    STABLE,
    UNSTABLE,
    PerronConfig,
    PerronProblem,
    graph_stable,
    graph_unstable,
    solve,
)
from rdsmanifold.smooth import (  # noqa: E402
    derivative_stack,
    fd_graph_hessian,
    fd_graph_jacobian,
    graph_derivative,
    solve_derivative,
    solve_higher_derivative,
)
from rdsmanifold.stochastics import (  # noqa: E402
    TimeGrid,
    birkhoff_average,
    ou_residual,
    ou_trajectory,
    ou_value,
    path_from_function,
    sample_wiener,
    shift,
    subsample,
)


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _base(**kw):
    d = {
        "model": {"eigenvalues": [1.0, -1.0, -2.0], "unstable_indices": [0]},
        "nonlinearity": {"family": "sine", "eps": 0.2, "B": MIX.tolist()},
        "noise_kind": "multiplicative",
        "perron": {"eta": 0.0, "step": 0.01},
        "xi_samples": {"mode": "random", "count": 6, "radius": 1.0, "seed": 0},
    }
    d.update(kw)
    return ExperimentConfig.from_dict(d)


# 1 -------------------------------------------------------------------------

def test_criterion_1_linear_null_case():
    cfg = _base(nonlinearity={"family": "zero"}, seeds=list(range(20)),
                verification={"horizon": 2.0, "taus": [1.0, 2.0], "checks": ["invariance"]})
    _, _, pcfg, _ = cfg.validate()
    hmax, dmax, worst_margin, ok = 0.0, 0.0, 0.0, True
    for seed in cfg.seeds:
        rec, art = run_seed(cfg, seed)
        ok &= rec["error"] is None
        for kind in (STABLE, UNSTABLE):
            hmax = max(hmax, float(np.max(np.abs(art[f"{kind}_graph"].values))))
        for c in rec["checks"]:
            dmax = max(dmax, c["value"])
            ok &= c["passed"]
    ok &= hmax <= pcfg.fixed_point_tol + pcfg.tail_tol
    ok &= dmax == 0.0
    verdict(1, ok, f"20 seeds, max|h| = {hmax:.1e} (limit {pcfg.fixed_point_tol + pcfg.tail_tol:.1e}), "
                   f"max invariance defect = {dmax:.1e}")


# 2 -------------------------------------------------------------------------

def test_criterion_2_linear_coupling_oracle():
    model = SpectralModel([1.0, -1.0], (0,))
    F = linear_nonlinearity(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.1)
    sys_ = quiet_system(model, F, step=1e-3, lo=26.0, hi=26.0)
    cfg = PerronConfig(0.0, 25.0, 1e-3)
    s = graph_stable(np.array([0.0, 1.0]), sys_, cfg)[0]
    u = graph_unstable(np.array([1.0, 0.0]), sys_, cfg)[1]
    exact = 0.1 / (1 + math.sqrt(1.01))
    es, eu = abs(s + exact), abs(u - exact)
    verdict(2, es < 1e-4 and eu < 1e-4,
            f"h^s slope {s:.8f} (err {es:.1e}), h^u slope {u:.8f} (err {eu:.1e}), oracle {exact:.8f}")


# 3, 4 ----------------------------------------------------------------------

def _random_instance(i):
    rng = np.random.default_rng(1000 + i)
    n = int(rng.integers(2, 7))
    p = int(rng.integers(1, n))
    alpha = rng.uniform(0.5, 2.0)
    beta = -rng.uniform(0.5, 2.0)
    lam = np.concatenate([alpha + rng.uniform(0, 2, p) * (np.arange(p) > 0),
                          beta - rng.uniform(0, 2, n - p) * (np.arange(n - p) > 0)])
    perm = rng.permutation(n)
    eig = np.empty(n)
    eig[perm] = lam
    unstable = sorted(int(perm[k]) for k in range(p))
    eta = 0.5 * (alpha + beta)
    limit = 1.0 / (1.0 / (eta - beta) + 1.0 / (alpha - eta))
    lip = 0.8 * limit * rng.uniform(0.2, 1.0)
    B = rng.standard_normal((n, n))
    B /= np.linalg.norm(B, 2)
    return {"eig": eig.tolist(), "unstable": unstable, "eta": eta, "lip": lip, "B": B.tolist(),
            "limit": limit}


def _instance_config(inst, seed, checks, count):
    return ExperimentConfig.from_dict({
        "model": {"eigenvalues": inst["eig"], "unstable_indices": inst["unstable"]},
        "nonlinearity": {"family": "sine", "eps": inst["lip"], "B": inst["B"]},
        "noise_kind": "multiplicative",
        "perron": {"eta": inst["eta"], "step": 0.01},
        "seeds": [seed],
        "xi_samples": {"mode": "random", "count": count, "radius": 1.5, "seed": seed},
        "verification": {"horizon": 0.0, "taus": [], "checks": checks, "lipschitz_pairs": 100},
    })


def test_criterion_3_contraction_certificate():
    worst_it, worst_op, ok, count = -1.0, -1.0, True, 0
    for i in range(50):
        inst = _random_instance(i)
        cfg = _instance_config(inst, i, ["contraction"], 4)
        rec, _ = run_seed(cfg, i)
        ok &= rec["error"] is None
        rho = rec["gap"]["per_order_values"][0]
        assert rho <= 0.8 + 1e-12
        for c in rec["checks"]:
            ok &= c["passed"]
            excess = c["value"] - c["detail"]["rho"]
            if c["name"] == "iteration_ratio":
                worst_it = max(worst_it, excess)
            else:
                worst_op = max(worst_op, excess)
            count += 1
    verdict(3, ok and count == 200,
            f"50 instances, max(iteration ratio - rho) = {worst_it:+.3f}, "
            f"max(J ratio - rho) = {worst_op:+.3f}, slack {DEFAULTS['contraction_slack']}")


def test_criterion_4_lipschitz_bounds():
    ok, worst_u, worst_h, pairs = True, 0.0, 0.0, 0
    for i in range(10):
        inst = _random_instance(i)
        cfg = _instance_config(inst, i, ["lipschitz"], 15)
        rec, _ = run_seed(cfg, i)
        ok &= rec["error"] is None
        for c in rec["checks"]:
            ok &= c["passed"]
            r = c["value"] / c["tolerance"] * (1 + DEFAULTS["lipschitz_slack"])
            if c["name"] == "path_lipschitz":
                worst_u = max(worst_u, r)
                pairs += 100
            else:
                worst_h = max(worst_h, r)
    verdict(4, ok and pairs == 10 * 2 * 100,
            f"10 instances x 100 pairs per manifold, max secant/bound: path {worst_u:.3f}, "
            f"graph {worst_h:.3f} (1% slack)")


# 5 -------------------------------------------------------------------------

def test_criterion_5_ou_process():
    S = 40.0
    # closed-form quadrature oracles
    g = TimeGrid.from_bounds(-S, 0.0, 1e-3)
    z0 = ou_value(path_from_function(g, lambda t: 0.0 * t), S)
    z1 = ou_value(path_from_function(g, lambda t: t), S)
    e_oracle = max(abs(z0), abs(z1 - (1 - math.exp(-S) * (S + 1))))
    ok = e_oracle < 1e-6
    # SDE residual: constant measured on the coarsest level, checked on finer ones
    worst = 0.0
    for seed in range(5):
        w = sample_wiener(TimeGrid.from_bounds(-48.0, 8.0, 0.005), 1, seed)
        C = None
        for f in (4, 2, 1):
            p = subsample(w, f)
            ou = ou_trajectory(p, TimeGrid.from_bounds(-8.0, 8.0, p.grid.step), S)
            r = float(np.max(np.abs(ou_residual(ou, p))))
            h = p.grid.step
            if C is None:
                C = r / h ** 2
                continue
            lim = 1.1 * C * h ** 2 + ou.truncation_bound
            worst = max(worst, r / lim)
            ok &= r <= lim
    # Birkhoff averages
    T = 200.0
    sig = math.sqrt((1 - (1 - math.exp(-T)) / T) / T)
    avgs = []
    for seed in range(100):
        w = sample_wiener(TimeGrid.from_bounds(-S, T, 0.01), 1, seed)
        avgs.append(birkhoff_average(ou_trajectory(w, TimeGrid.from_bounds(0.0, T, 0.01), S), T))
    avgs = np.array(avgs)
    outside = int(np.sum(np.abs(avgs) > 3 * sig))
    mean_z = abs(avgs.mean()) / (sig / math.sqrt(len(avgs)))
    ok &= outside == 0 and mean_z <= 3
    verdict(5, ok, f"oracle err {e_oracle:.1e}; residual/(1.1 C h^2 + trunc) max {worst:.2f}; "
                   f"Birkhoff: {outside}/100 outside 3 sigma, seed mean {mean_z:.2f} SE")


# 6 -------------------------------------------------------------------------

def test_criterion_6_cocycle_and_conjugacy():
    model = SpectralModel([1.0, -1.0, -2.0], (0,))
    F = sine_nonlinearity(3, 0.2, MIX)
    sys_, path = noisy_system(model, F, seed=8)
    x0 = np.array([0.3, -0.7, 0.4])
    s, t = 1.5, 2.0
    reuse = cocycle_check(sys_, x0, s, t)
    ou_s = ou_trajectory(shift(path, s), TimeGrid.from_bounds(0.0, t, sys_.step), 40.0)
    recomputed = cocycle_check(sys_, x0, s, t, shifted_system=ConjugatedSystem(model, F, ou=ou_s))
    dz = sys_.ou.quadrature_error_bound + ou_s.quadrature_error_bound
    umax = np.max(np.abs(integrate_mild(sys_, x0, s + t).states))
    budget = math.exp((1.0 + F.lip + np.max(np.abs(ou_s.values))) * t) * t * (1 + 2 * F.lip) * umax * dz
    ok = reuse == 0.0 and recomputed <= budget
    # geometric Brownian motion: A = 0, F = 0
    gbm = SpectralModel([0.0], ())
    F0 = zero_nonlinearity(1)
    orders = []
    for seed in range(10):
        w = sample_wiener(TimeGrid.from_bounds(-44.0, 4.0, 0.001), 1, seed)
        ou = ou_trajectory(w, TimeGrid.from_bounds(0.0, 4.0, 0.001), 40.0)
        orders.append(check_conjugacy(ConjugatedSystem(gbm, F0, ou=ou), w, np.array([1.0]), 4.0).order)
    ok &= min(orders) >= 0.5
    verdict(6, ok, f"cocycle reuse {reuse:.1e}, recomputed {recomputed:.1e} <= {budget:.1e}; "
                   f"conjugacy order min {min(orders):.2f} median {np.median(orders):.2f} (10 seeds)")


# 7 -------------------------------------------------------------------------

def test_criterion_7_stochastic_invariance():
    cfg = _base(seeds=list(range(20)), kinds=["stable"], workers=4,
                verification={"horizon": 5.0, "taus": [1.0, 2.0, 5.0],
                              "checks": ["invariance", "transformed"]})
    rep = run_experiment(cfg)
    inv = rep.checks("invariance", STABLE)
    tr = rep.checks("transformed_invariance", STABLE)
    ok = rep.all_passed and rep.audit() and len(inv) == 60 and len(tr) == 60
    m1 = rep.aggregates["invariance/stable"]["margin_quantiles"]["1.0"]
    m2 = rep.aggregates["transformed_invariance/stable"]["margin_quantiles"]["1.0"]
    verdict(7, ok, f"20 seeds x tau in {{1,2,5}}: M^s {sum(c['passed'] for c in inv)}/60, "
                   f"transformed {sum(c['passed'] for c in tr)}/60; worst defect/budget "
                   f"{m1:.2f} and {m2:.2f}")


# 8 -------------------------------------------------------------------------

def _fd_rel(system, cfg, kind, xi):
    p = PerronProblem(system, cfg, kind)
    d = solve_derivative(xi, None, system, cfg, kind=kind)
    D = graph_derivative(d)
    h = DEFAULTS["fd_step_abs"] + DEFAULTS["fd_step_rel"] * np.linalg.norm(xi)
    FD = fd_graph_jacobian(lambda x: solve(p, x).graph_value, xi, p.own, step=h)
    return np.linalg.norm(D - FD) / (1 + np.linalg.norm(D))


def test_criterion_8_smoothness():
    model = SpectralModel([2.0, -1.0, -2.0], (0,))
    fams = {
        "linear": linear_nonlinearity(MIX, 0.3),
        "sine": sine_nonlinearity(3, 0.3, MIX),
        "cubic": cubic_nonlinearity(3, 0.3, MIX, radius=1.0),
    }
    cfg = PerronConfig.for_model(model, 0.5, 0.005)
    worst1 = 0.0
    for F in fams.values():
        sys_, _ = noisy_system(model, F, seed=2, step=0.005, lo=15.0, hi=15.0)
        for kind, xi in ((STABLE, np.array([0.0, 0.4, -0.3])), (UNSTABLE, np.array([0.6, 0.0, 0.0]))):
            worst1 = max(worst1, _fd_rel(sys_, cfg, kind, xi))
    ok = worst1 < DEFAULTS["fd_relative_tol"]
    # order 2 on the compact-support cubic family
    F = fams["cubic"]
    assert check_gap(model, F.lip, cfg.eta, 2).admissible
    sys_, _ = noisy_system(model, F, seed=2, step=0.005, lo=15.0, hi=15.0)
    p = PerronProblem(sys_, cfg, STABLE)
    xi = np.array([0.0, 0.4, -0.3])
    _, stack = derivative_stack(xi, sys_, cfg, 2)
    H = np.array(stack[1].jacobians[p.anchor_row])
    H[p.own] = 0.0
    FD2 = fd_graph_hessian(lambda x: solve(p, x).graph_value, xi, p.own, DEFAULTS["fd2_step"])
    rel2 = np.linalg.norm(H - FD2) / (1 + np.linalg.norm(H))
    sym = np.linalg.norm(H - np.swapaxes(H, 1, 2)) / (1 + np.linalg.norm(H))
    ok &= rel2 < DEFAULTS["fd2_relative_tol"] and sym < DEFAULTS["symmetry_tol"]
    # refusal when k * eta >= alpha
    bad = PerronConfig(1.2, 12.0, 0.005, tail_tol=1e-4)
    lower = [solve_derivative(xi, None, sys_, bad)]
    try:
        solve_higher_derivative(2, lower, sys_, bad)
        refused = ""
    except GapConditionError as exc:
        refused = exc.inequality if exc.order == 2 else ""
    ok &= "2*eta" in refused
    verdict(8, ok, f"k=1 FD rel err max {worst1:.1e} (3 families, both manifolds); "
                   f"k=2 FD {rel2:.1e}, symmetry {sym:.1e}; refusal names '{refused.split(':')[0]}'")


# 9 -------------------------------------------------------------------------

# (K, lip, alpha, beta, eta, order, hand-evaluated g_1..g_order, admissible)
GAP_TABLE = [
    (1.0, 0.1, 1.0, -1.0, 0.0, 1, [0.2], True),
    (2.0, 0.05, 2.0, -2.0, 0.0, 1, [0.1], True),
    (1.0, 0.2, 3.0, -1.0, 1.0, 1, [0.2], True),
    (1.0, 0.1, 4.0, 0.0, 1.0, 2, [0.1333333333333333, 0.1], True),
    (1.5, 0.1, 2.0, -1.0, 0.5, 1, [0.2], True),
    (1.0, 0.3, 1.0, -3.0, -1.0, 1, [0.3], True),
    (1.0, 0.25, 5.0, -5.0, 1.0, 3, [0.1041666666666667, 0.1190476190476190, 0.15625], True),
    (1.0, 0.5, 1.0, -1.0, 0.0, 1, [1.0], False),
    (1.0, 0.1, 1.0, -1.0, 0.6, 2, [0.3125, math.inf], False),
    (3.0, 0.01, 0.5, -0.5, 0.25, 1, [0.16], True),
]


def test_criterion_9_gap_certification():
    worst, ok = 0.0, True
    for K, lip, a, b, eta, order, expect, adm in GAP_TABLE:
        m = SpectralModel([a, b], (0,), K=K)
        rep = check_gap(m, lip, eta, order)
        for got, want in zip(rep.per_order_values, expect):
            if math.isinf(want):
                ok &= math.isinf(got)
            else:
                worst = max(worst, abs(got - want))
        ok &= rep.admissible == adm
    ok &= worst < 1e-14
    opt_err = 0.0
    for K, lip, a, b, *_ in GAP_TABLE:
        m = SpectralModel([a, b], (0,), K=K)
        opt_err = max(opt_err, abs(check_gap(m, lip, 0.0).optimal_eta - 0.5 * (a + b)))
    ok &= opt_err == 0.0
    verdict(9, ok, f"10 tabulated sets, max |g_i - hand value| = {worst:.1e}; "
                   f"optimal eta error {opt_err:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
