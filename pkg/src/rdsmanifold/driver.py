"""Experiment configuration, Monte Carlo orchestration and verification checks.

Every pass/fail entry in a :class:`VerificationReport` compares a measured
value with a tolerance assembled from bounds that
the library modules report (tail, quadrature, fixed-point residual,
step-doubling estimates). The only fixed constants are the slacks listed
in :data:`DEFAULTS`.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from .conjugation import (
    ADDITIVE,
    MULTIPLICATIVE,
    ConjugatedSystem,
    StationarySample,
    linear_stationary_solution,
)
from .errors import ConfigurationError, GapConditionError, ManifoldError
from .integrator import integrate_additive, integrate_mild, integrate_stratonovich
from .model import (
    SpectralModel,
    check_gap,
    cubic_nonlinearity,
    linear_nonlinearity,
    sine_nonlinearity,
    zero_nonlinearity,
)
from .perron import (
    STABLE,
    UNSTABLE,
    PerronConfig,
    PerronProblem,
    _json_default,
    _wnorm_cols,
    apply_J,
    build_graph,
    path_lipschitz_bound,
    solve,
    theoretical_lipschitz,
)
from .smooth import derivative_stack, fd_graph_hessian, fd_graph_jacobian, graph_derivative
from .stochastics import (
    DEFAULT_TRUNCATION,
    TimeGrid,
    cumulative_integral,
    ou_trajectory,
    sample_wiener,
    subsample,
    zero_ou,
)

SCHEMA_VERSION = 1
NONE = "none"
FAMILIES = ("zero", "linear", "sine", "cubic")
CHECKS = ("contraction", "lipschitz", "invariance", "transformed", "decay", "conjugacy",
          "derivative")

DEFAULTS = {
    "ou_truncation": DEFAULT_TRUNCATION,
    "contraction_slack": 0.05,
    "lipschitz_slack": 0.01,
    "fd_relative_tol": 1e-3,
    "fd_step_rel": 1e-5,
    "fd_step_abs": 1e-7,
    "fd2_relative_tol": 1e-2,
    "fd2_step": 1e-3,
    "symmetry_tol": 1e-2,
    "conjugacy_min_order": 0.5,
}

# Grid extents are kept divisible by this many steps so that every
# coarsening used below (Richardson by 2, conjugacy levels by 2**k) is exact.
_ALIGN = 16


@dataclass
class ExperimentConfig:
    """All inputs of one experiment; see ``configs/example.yaml``."""

    eigenvalues: list
    unstable_indices: list
    K: float = 1.0
    family: str = "sine"
    family_params: dict = field(default_factory=dict)
    lip: float | None = None
    smoothness_order: int | None = None
    noise_kind: str = MULTIPLICATIVE
    eta: float | str | None = None
    step: float = 0.01
    T_max: float | None = None
    fixed_point_tol: float = 1e-12
    max_iterations: int = 200
    tail_tol: float = 1e-8
    seeds: list = field(default_factory=lambda: [0])
    xi_samples: dict = field(default_factory=lambda: {"mode": "random", "count": 8, "radius": 1.0, "seed": 0})
    horizon: float = 5.0
    taus: list = field(default_factory=lambda: [1.0, 2.0, 5.0])
    kinds: list = field(default_factory=lambda: [STABLE, UNSTABLE])
    checks: list = field(default_factory=lambda: list(CHECKS))
    derivative_order: int = 1
    derivative_points: int = 3
    conjugacy_levels: int = 4
    lipschitz_pairs: int = 100
    operator_pairs: int = 5
    workers: int = 1
    output_dir: str | None = None
    output_format: str = "csv"
    defaults: dict = field(default_factory=dict)

    # --- construction -------------------------------------------------
    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version}")
        model = d.pop("model", {})
        nl = d.pop("nonlinearity", {})
        perron = d.pop("perron", {})
        ver = d.pop("verification", {})
        out = d.pop("output", {})
        flat = {}
        flat.update({k: model[k] for k in ("eigenvalues", "unstable_indices", "K") if k in model})
        if "family" in nl:
            flat["family"] = nl["family"]
        for k in ("lip", "smoothness_order"):
            if k in nl:
                flat[k] = nl[k]
        params = {k: v for k, v in nl.items() if k not in ("family", "lip", "smoothness_order")}
        if params:
            flat["family_params"] = params
        flat.update(perron)
        flat.update(ver)
        if "directory" in out:
            flat["output_dir"] = out["directory"]
        if "format" in out:
            flat["output_format"] = out["format"]
        flat.update(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(flat) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "eigenvalues" not in flat or "unstable_indices" not in flat:
            raise ConfigurationError("config needs model.eigenvalues and model.unstable_indices")
        cfg = cls(**flat)
        cfg.defaults = {**DEFAULTS, **(cfg.defaults or {})}
        cfg._check_fields()
        return cfg

    @classmethod
    def from_yaml(cls, fname):
        with open(fname) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigurationError(f"{fname}: expected a mapping at top level")
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "model": {"eigenvalues": list(self.eigenvalues),
                      "unstable_indices": list(self.unstable_indices), "K": self.K},
            "nonlinearity": {"family": self.family, "lip": self.lip,
                             "smoothness_order": self.smoothness_order, **self.family_params},
            "noise_kind": self.noise_kind,
            "perron": {"eta": self.eta, "step": self.step, "T_max": self.T_max,
                       "fixed_point_tol": self.fixed_point_tol,
                       "max_iterations": self.max_iterations, "tail_tol": self.tail_tol},
            "seeds": list(self.seeds),
            "xi_samples": dict(self.xi_samples),
            "verification": {
                "horizon": self.horizon, "taus": list(self.taus), "kinds": list(self.kinds),
                "checks": list(self.checks), "derivative_order": self.derivative_order,
                "derivative_points": self.derivative_points,
                "conjugacy_levels": self.conjugacy_levels,
                "lipschitz_pairs": self.lipschitz_pairs, "operator_pairs": self.operator_pairs,
            },
            "workers": self.workers,
            "output": {"directory": self.output_dir, "format": self.output_format},
            "defaults": dict(self.defaults),
        }

    def _check_fields(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown nonlinearity family {self.family!r}; choose from {FAMILIES}")
        if self.noise_kind not in (MULTIPLICATIVE, ADDITIVE, NONE):
            raise ConfigurationError(f"unknown noise_kind {self.noise_kind!r}")
        if self.output_format not in ("csv", "json"):
            raise ConfigurationError("output format must be csv or json")
        bad = set(self.kinds) - {STABLE, UNSTABLE}
        if bad:
            raise ConfigurationError(f"unknown manifold kinds {sorted(bad)}")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise ConfigurationError(f"unknown checks {sorted(bad)}")
        if not self.seeds:
            raise ConfigurationError("seeds must be a non-empty list")
        if self.conjugacy_levels < 2:
            raise ConfigurationError("conjugacy needs at least two refinement levels")
        if self.conjugacy_levels > 4:
            raise ConfigurationError("at most 4 conjugacy levels are supported")
        if self.derivative_order < 0:
            raise ConfigurationError("derivative_order must be >= 0")

    # --- derived objects -------------------------------------------------
    def build_model(self):
        return SpectralModel(np.asarray(self.eigenvalues, float), tuple(self.unstable_indices), K=self.K)

    def build_nonlinearity(self):
        n = len(self.eigenvalues)
        p = dict(self.family_params)
        B = p.get("B")
        B = None if B is None else np.asarray(B, dtype=float)
        eps = float(p.get("eps", 0.0))
        if self.family == "zero":
            F = zero_nonlinearity(n)
        elif self.family == "linear":
            F = linear_nonlinearity(np.eye(n) if B is None else B, eps)
        elif self.family == "sine":
            F = sine_nonlinearity(n, eps, B)
        else:
            F = cubic_nonlinearity(n, eps, B, float(p.get("radius", 1.0)))
        updates = {}
        if self.lip is not None:
            if self.lip < F.lip * (1 - 1e-12):
                raise ConfigurationError(
                    f"declared lip {self.lip} is below the certified value {F.lip} for {self.family}")
            updates["lip"] = float(self.lip)
        if self.smoothness_order is not None:
            if self.smoothness_order > F.smoothness_order:
                raise ConfigurationError(
                    f"{self.family} family is only C^{F.smoothness_order}")
            updates["smoothness_order"] = int(self.smoothness_order)
        if updates:
            F = _replace(F, **updates)
        return F

    def resolved_eta(self, model=None, lip=None):
        model = model or self.build_model()
        if self.eta is None or self.eta == "optimal":
            lip = self.build_nonlinearity().lip if lip is None else lip
            return check_gap(model, lip, 0.0 if not math.isfinite(model.alpha + model.beta)
                             else 0.5 * (model.alpha + model.beta), 1).optimal_eta
        return float(self.eta)

    def perron_config(self, model=None, F=None):
        model = model or self.build_model()
        F = F or self.build_nonlinearity()
        eta = self.resolved_eta(model, F.lip)
        kinds = [k for k in self.kinds if _has_subspace(model, k)] or [STABLE]
        if self.T_max is None:
            cfg = PerronConfig.for_model(model, eta, self.step, self.tail_tol, kinds=kinds,
                                         fixed_point_tol=self.fixed_point_tol,
                                         max_iterations=self.max_iterations)
            T = _round_up(cfg.T_max, 2 * self.step)
            return PerronConfig(eta, T, self.step, self.fixed_point_tol, self.max_iterations,
                                self.tail_tol)
        return PerronConfig(eta, float(self.T_max), self.step, self.fixed_point_tol,
                            self.max_iterations, self.tail_tol)

    def validate(self):
        """Model validation and gap certification; returns (model, F, config, gap)."""
        self._check_fields()
        model = self.build_model()
        F = self.build_nonlinearity()
        cfg = self.perron_config(model, F)
        gap = check_gap(model, F.lip, cfg.eta, 1)
        if not gap.admissible:
            raise GapConditionError("configuration fails gap certification: " + "; ".join(gap.failing),
                                    order=1, inequality=gap.failing[0])
        for kind in self.kinds:
            if _has_subspace(model, kind):
                cfg.validate(model, kind, F.lip)
        if self.noise_kind == ADDITIVE:
            lam = model.eigenvalues
            if np.any(lam[model.minus_mask] >= 0) or np.any(lam[model.plus_mask] <= 0):
                raise ConfigurationError("additive noise needs stable < 0 < unstable eigenvalues")
        for tau in self.taus:
            if tau < 0 or tau > self.horizon + 1e-12:
                raise ConfigurationError(f"tau {tau} outside [0, horizon={self.horizon}]")
        return model, F, cfg, gap


def _replace(F, **kw):
    from dataclasses import replace
    return replace(F, **kw)


def _round_up(x, q):
    return math.ceil(x / q - 1e-9) * q


def _has_subspace(model, kind):
    return bool(model.minus_mask.any() if kind == STABLE else model.plus_mask.any())


# --- noise set-up -------------------------------------------------------------

@dataclass(eq=False)
class NoiseSetup:
    """Sampled path plus the conjugated system built from it for one seed."""

    seed: int
    path: object
    system: ConjugatedSystem
    truncation: float


def build_noise(config, seed, model=None, F=None, pcfg=None):
    """Sample the path for ``seed`` and the OU / stationary data on a grid
    covering every window the verification batteries use."""
    model = model or config.build_model()
    F = F or config.build_nonlinearity()
    pcfg = pcfg or config.perron_config(model, F)
    h = config.step
    S = float(config.defaults.get("ou_truncation", DEFAULT_TRUNCATION))
    q = _ALIGN * h
    lo = _round_up(pcfg.T_max, q)
    hi = _round_up(config.horizon + pcfg.T_max, q)
    ou_grid = TimeGrid.from_bounds(-lo, hi, h)
    if config.noise_kind == NONE:
        return NoiseSetup(seed, None, ConjugatedSystem(model, F, MULTIPLICATIVE, ou=zero_ou(ou_grid)), S)
    left = _round_up(lo + S, q)
    right = hi + (_round_up(S, q) if config.noise_kind == ADDITIVE else 0.0)
    path_grid = TimeGrid.from_bounds(-left, right, h)
    if config.noise_kind == MULTIPLICATIVE:
        path = sample_wiener(path_grid, 1, seed)
        ou = ou_trajectory(path, ou_grid, S)
        system = ConjugatedSystem(model, F, MULTIPLICATIVE, ou=ou)
    else:
        path = sample_wiener(path_grid, model.n, seed)
        ust = linear_stationary_solution(model, path, ou_grid, S)
        system = ConjugatedSystem(model, F, ADDITIVE, stationary=ust)
    return NoiseSetup(seed, path, system, S)


def coarsen_system(system, factor=2):
    """Same noise realisation sampled on every ``factor``-th grid point."""
    g = system.grid
    if g.i_min % factor or g.i_max % factor:
        raise ConfigurationError("noise grid extent is not divisible by the coarsening factor")
    cg = TimeGrid(g.i_min // factor, g.i_max // factor, g.step * factor)
    ou = system.ou
    cou = type(ou)(cg, ou.values[::factor], ou.truncation_horizon, ou.quadrature_error_bound,
                   ou.truncation_bound, dict(ou.meta))
    st = None
    if system.stationary is not None:
        s = system.stationary
        st = StationarySample(cg, s.values[::factor], s.truncation_bound)
    return ConjugatedSystem(system.model, system.F, system.noise_kind, ou=cou, stationary=st,
                            exponent_sign=system.exponent_sign)


def coarsen_config(pcfg, factor=2):
    h = pcfg.step * factor
    return PerronConfig(pcfg.eta, _round_up(pcfg.T_max, h), h, pcfg.fixed_point_tol,
                        pcfg.max_iterations, pcfg.tail_tol)


# --- base points ----------------------------------------------------------------

def sample_base_points(model, kind, sampling):
    """Points of the xi-subspace as full n-vectors (rows)."""
    own = model.minus_index if kind == STABLE else model.plus_index
    p = own.size
    mode = sampling.get("mode", "random")
    count = int(sampling.get("count", 8))
    r = float(sampling.get("radius", 1.0))
    if mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence(int(sampling.get("seed", 0)),
                                                           spawn_key=(0 if kind == STABLE else 1,)))
        d = rng.standard_normal((count, p))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = r * rng.uniform(0.0, 1.0, count) ** (1.0 / p)
        local = d * rad[:, None]
    elif mode == "grid":
        axis = np.linspace(-r, r, count)
        local = np.array(list(itertools.product(axis, repeat=p)))
    else:
        raise ConfigurationError(f"unknown xi sampling mode {mode!r}")
    pts = np.zeros((len(local), model.n))
    pts[:, own] = local
    return pts


# --- graph accuracy estimates --------------------------------------------------

@dataclass(eq=False)
class GraphEvaluator:
    """Solves the graph at any anchor, with a per-point error estimate.

    The estimate is ``|h_step - h_2step|`` (Richardson difference) plus the
    fixed-point a-posteriori bound ``rho/(1-rho) * last increment`` and the
    truncation tail bound at the anchor, from both resolutions.
    """

    system: ConjugatedSystem
    config: PerronConfig
    kind: str

    def __post_init__(self):
        self._coarse_system = coarsen_system(self.system, 2)
        self._coarse_config = coarsen_config(self.config, 2)

    def _solve(self, system, config, pts, t0):
        problem = PerronProblem(system, config, self.kind, t0)
        sol = solve(problem, np.asarray(pts, float).T)
        row = sol.path.states[problem.anchor_row]
        vals = np.zeros_like(row)
        vals[problem.other] = row[problem.other]
        rho = sol.rho
        fp = rho / (1 - rho) * sol.diffs[-1] if rho > 0 else sol.diffs[-1]
        return vals.T, sol, fp + float(sol.tail_bound[problem.anchor_row])

    def __call__(self, pts, t0=0.0):
        """Returns (values (m, n), error estimates (m,), fine solution)."""
        fine, sol, e_f = self._solve(self.system, self.config, pts, t0)
        coarse, _, e_c = self._solve(self._coarse_system, self._coarse_config, pts, t0)
        err = np.linalg.norm(fine - coarse, axis=1) + e_f + e_c
        return fine, err, sol


# --- checks ----------------------------------------------------------------------

@dataclass
class CheckRecord:
    """One comparison ``value <= tolerance`` (or ``>=`` for lower bounds)."""

    name: str
    kind: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<="
    detail: dict = field(default_factory=dict)

    @classmethod
    def make(cls, name, kind, value, tolerance, relation="<=", **detail):
        value, tolerance = float(value), float(tolerance)
        return cls(name, kind, value, tolerance, _compare(value, tolerance, relation), relation, detail)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "value": _jf(self.value),
                "tolerance": _jf(self.tolerance), "relation": self.relation,
                "passed": self.passed, "detail": self.detail}


def _compare(value, tolerance, relation):
    if relation == "<=":
        return bool(value <= tolerance)
    if relation == ">=":
        return bool(value >= tolerance)
    raise ConfigurationError(f"unknown relation {relation!r}")


def _jf(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _unjf(x):
    return float(x)


def _growth(system, t0, tau):
    """Gronwall factor ``exp((lam_max + K lip) tau + int z)`` for deviations."""
    model = system.model
    g = system.grid
    n = int(round(tau / g.step))
    i0 = g.index(t0)
    Z = cumulative_integral(system.z(np.arange(i0, i0 + n + 1)), g.step)
    rate = float(np.max(model.eigenvalues)) + model.K * system.lip
    return np.exp(rate * np.arange(n + 1) * g.step + Z)


def check_invariance(graph, tau, system, config=None, evaluator=None):
    """Invariance defects of a sampled manifold graph under the mild flow.

    For each base point the state ``xi + h(xi)`` is integrated to ``tau``
    and compared with the graph re-solved at ``theta_tau w``. Returns a list
    of ``(defect, budget)`` pairs, one per base point.
    """
    kind = graph.kind
    config = config or PerronConfig(graph.meta["eta"], graph.meta["T_max"], graph.meta["step"],
                                    graph.meta["fixed_point_tol"], tail_tol=graph.meta["tail_tol"])
    ev = evaluator or GraphEvaluator(system, config, kind)
    t0 = float(graph.meta.get("t0", 0.0))
    model = system.model
    own = model.minus_index if kind == STABLE else model.plus_index
    other = model.plus_index if kind == STABLE else model.minus_index
    pts = graph.base_points
    vals0, err0, _ = ev(pts, t0)
    x0 = pts + vals0
    n = int(round(tau / system.step))
    if n == 0:
        q = x0.copy()
        q[:, other] = 0.0
        vals, err, _ = ev(q, t0)
        defect = np.linalg.norm(x0[:, other] - vals[:, other], axis=1)
        return [(float(d), float(config.fixed_point_tol + e)) for d, e in zip(defect, err)]
    traj = integrate_mild(system, x0, tau, t0=t0, error_estimate=(n % 2 == 0))
    uT = traj.final
    q = np.zeros_like(uT)
    q[:, own] = uT[:, own]
    vals, err, _ = ev(q, t0 + tau)
    defect = np.linalg.norm(uT[:, other] - vals[:, other], axis=1)
    e_int = float(traj.error_estimate[-1]) if traj.error_estimate is not None else 0.0
    amp = float(_growth(system, t0, tau)[-1])
    L = theoretical_lipschitz(model, system.lip, config.eta, kind)
    budget = (1 + L) * (e_int + amp * err0) + err
    return [(float(d), float(b)) for d, b in zip(defect, budget)]


def check_transformed_invariance(graph, tau, system, path, config, evaluator=None):
    """Invariance of ``T^{-1}(w, M(w))`` under the Stratonovich flow.

    Points ``e^{z_0}(xi + h(xi))`` are integrated with the Heun reference
    scheme and compared with ``e^{z} h(e^{-z} ., theta_tau w)``.
    """
    if system.noise_kind != MULTIPLICATIVE or path is None:
        raise ConfigurationError("transformed invariance needs multiplicative noise and a path")
    kind = graph.kind
    ev = evaluator or GraphEvaluator(system, config, kind)
    model = system.model
    own = model.minus_index if kind == STABLE else model.plus_index
    other = model.plus_index if kind == STABLE else model.minus_index
    t0 = float(graph.meta.get("t0", 0.0))
    z0 = system.ou.at(t0)
    zt = system.ou.at(t0 + tau)
    vals0, err0, _ = ev(graph.base_points, t0)
    x0 = math.exp(z0) * (graph.base_points + vals0)
    fine = integrate_stratonovich(model, system.F, path, x0, tau, t0=t0, stride=1)
    coarse = integrate_stratonovich(model, system.F, path, x0, tau, t0=t0, stride=2)
    xT = fine.final
    e_int = float(np.max(np.linalg.norm(xT - coarse.final, axis=-1)))
    v = math.exp(-zt) * xT
    q = np.zeros_like(v)
    q[:, own] = v[:, own]
    vals, err, _ = ev(q, t0 + tau)
    defect = np.linalg.norm(xT[:, other] - math.exp(zt) * vals[:, other], axis=1)
    amp = float(_growth(system, t0, tau)[-1])
    L = theoretical_lipschitz(model, system.lip, config.eta, kind)
    # z-sample error rescales the state by at most exp(qbound) - 1
    qb = system.ou.quadrature_error_bound
    z_err = math.expm1(2 * qb) * np.linalg.norm(xT, axis=1)
    budget = (1 + L) * (e_int + math.exp(zt) * amp * err0 + z_err) + math.exp(zt) * err
    return [(float(d), float(b)) for d, b in zip(defect, budget)]


def check_decay(trajectory, eta, ou):
    """``sup_t e^{-eta t - int_0^t z} |u(t)| / |u(0)|`` (0 for the zero path).

    For a batch trajectory the maximum over the batch is returned.
    """
    g = trajectory.grid
    if abs(g.step - ou.grid.step) > 1e-9 * g.step:
        raise ConfigurationError("trajectory and OU sample must share the grid step")
    n = g.size - 1
    z = ou.window(trajectory.t0, n)
    Z = cumulative_integral(z, g.step)
    w = np.exp(-eta * g.times - Z)
    st = trajectory.states
    norms = np.linalg.norm(st, axis=-1)
    if norms.ndim == 1:
        norms = norms[:, None]
    n0 = norms[0]
    best = 0.0
    for j in range(norms.shape[1]):
        if n0[j] == 0.0:
            if np.any(norms[:, j] != 0.0):
                return math.inf
            continue
        best = max(best, float(np.max(w * norms[:, j]) / n0[j]))
    return best


@dataclass
class ConjugacyCurve:
    steps: list
    gaps: list
    order: float
    noise_kind: str

    def to_dict(self):
        return {"steps": self.steps, "gaps": self.gaps, "order": _jf(self.order),
                "noise_kind": self.noise_kind}


def _fit_order(steps, gaps):
    s, g = np.asarray(steps), np.asarray(gaps)
    ok = g > 0
    if ok.sum() < 2:
        return math.inf if np.all(g == 0) else math.nan
    return float(np.polyfit(np.log(s[ok]), np.log(g[ok]), 1)[0])


def check_conjugacy(system, path, x0, horizon, levels=4, t0=0.0, truncation=DEFAULT_TRUNCATION):
    """Gap between the conjugated mild solution mapped back and the SDE reference.

    Level ``k`` uses every ``2**k``-th path sample for both sides, with the
    OU sample (or ``u*``) recomputed from the coarsened path. Returns the
    gap per step size and the fitted empirical order.
    """
    model, F = system.model, system.F
    x0 = np.asarray(x0, dtype=float)
    steps, gaps = [], []
    base = path.grid.step
    for k in range(levels):
        f = 2 ** k
        h = base * f
        cp = subsample(path, f)
        grid = TimeGrid.from_bounds(min(0.0, t0), t0 + horizon, h)
        if system.noise_kind == MULTIPLICATIVE:
            ou = ou_trajectory(cp, grid, truncation)
            sysk = ConjugatedSystem(model, F, MULTIPLICATIVE, ou=ou, exponent_sign=system.exponent_sign)
            v0 = x0 * math.exp(-ou.at(t0))
            mild = integrate_mild(sysk, v0, horizon, t0=t0)
            i0 = grid.index(t0)
            zs = ou.values[i0:i0 + mild.grid.size]
            back = mild.states * np.exp(zs)[:, None]
            ref = integrate_stratonovich(model, F, path, x0, horizon, t0=t0, stride=f)
        else:
            ust = linear_stationary_solution(model, cp, grid, truncation)
            sysk = ConjugatedSystem(model, F, ADDITIVE, stationary=ust)
            v0 = x0 - ust.at(t0)
            mild = integrate_mild(sysk, v0, horizon, t0=t0)
            i0 = grid.index(t0)
            back = mild.states + ust.values[i0:i0 + mild.grid.size]
            ref = integrate_additive(model, F, path, x0, horizon, t0=t0, stride=f)
        steps.append(h)
        gaps.append(float(np.max(np.linalg.norm(back - ref.states, axis=-1))))
    return ConjugacyCurve(steps, gaps, _fit_order(steps, gaps), system.noise_kind)


# --- report ----------------------------------------------------------------------

@dataclass
class VerificationReport:
    config: dict
    records: list
    aggregates: dict = field(default_factory=dict)

    @property
    def passing_seeds(self):
        return [r["seed"] for r in self.records if _seed_passed(r)]

    @property
    def all_passed(self):
        return len(self.passing_seeds) == len(self.records)

    def checks(self, name=None, kind=None):
        out = []
        for r in self.records:
            for c in r["checks"]:
                if (name is None or c["name"] == name) and (kind is None or c["kind"] == kind):
                    out.append(c)
        return out

    def audit(self):
        """True when every stored flag matches the comparison recomputed from the numbers."""
        for c in self.checks():
            if c["passed"] != _compare(_unjf(c["value"]), _unjf(c["tolerance"]), c["relation"]):
                return False
        return True

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "config": self.config,
                "records": self.records, "aggregates": self.aggregates,
                "passing_seeds": self.passing_seeds, "audit": self.audit()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], d["records"], d.get("aggregates", {}))


def _seed_passed(rec):
    return rec["error"] is None and all(c["passed"] for c in rec["checks"])


def _aggregate(records):
    groups = {}
    for r in records:
        for c in r["checks"]:
            groups.setdefault((c["name"], c["kind"]), []).append(c)
    out = {}
    for (name, kind), cs in sorted(groups.items()):
        margins = []
        for c in cs:
            v, t = _unjf(c["value"]), _unjf(c["tolerance"])
            if c["relation"] == ">=":
                v, t = t, v
            margins.append(v / t if t > 0 else (0.0 if v <= t else math.inf))
        m = np.asarray(margins)
        out[f"{name}/{kind}"] = {
            "count": len(cs),
            "passed": sum(c["passed"] for c in cs),
            "margin_quantiles": {q: _jf(np.quantile(m, float(q))) for q in ("0.0", "0.5", "0.9", "1.0")},
        }
    return out


# --- one seed ---------------------------------------------------------------------

def _pairs(m, limit, seed):
    allp = [(i, j) for i in range(m) for j in range(i + 1, m)]
    if len(allp) <= limit:
        return allp
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(allp), limit, replace=False))
    return [allp[k] for k in keep]


def _rows(a):
    return [[float(x) for x in np.atleast_1d(r)] for r in a]


def _seed_checks(config, seed, model, F, pcfg):
    d = config.defaults
    checks, artifacts, notes = [], {}, {}
    noise = build_noise(config, seed, model, F, pcfg)
    system = noise.system
    gap = check_gap(model, F.lip, pcfg.eta, 1)
    rho = gap.rho
    kinds = [k for k in config.kinds if _has_subspace(model, k)]
    graphs = {}
    for kind in kinds:
        pts = sample_base_points(model, kind, config.xi_samples)
        graph = build_graph(kind, pts, system, pcfg, 0.0, seed)
        graphs[kind] = graph
        artifacts[f"{kind}_graph"] = graph
        notes[f"{kind}_iterations"] = graph.meta["iterations"]
        ev = GraphEvaluator(system, pcfg, kind)

        if "contraction" in config.checks:
            checks.append(CheckRecord.make(
                "iteration_ratio", kind, graph.meta["max_iteration_ratio"],
                rho + d["contraction_slack"], rho=rho))
            problem = PerronProblem(system, pcfg, kind, 0.0)
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
            worst = 0.0
            lw = np.exp(problem.log_weight(pcfg.eta))[:, None]
            radius = float(config.xi_samples.get("radius", 1.0))
            for _ in range(config.operator_pairs):
                xi = np.zeros(model.n)
                xi[problem.own] = radius * rng.standard_normal(problem.own.size)
                u1 = radius * rng.standard_normal((problem.N + 1, model.n)) * lw
                u2 = radius * rng.standard_normal((problem.N + 1, model.n)) * lw
                num = _wnorm_cols(problem, apply_J(problem, u1, xi) - apply_J(problem, u2, xi), pcfg.eta)
                den = _wnorm_cols(problem, u1 - u2, pcfg.eta)
                worst = max(worst, num / den)
            checks.append(CheckRecord.make("operator_ratio", kind, worst,
                                           rho + d["contraction_slack"], rho=rho))

        if "lipschitz" in config.checks and len(pts) > 1:
            problem = PerronProblem(system, pcfg, kind, 0.0)
            sol = solve(problem, pts.T)
            U = sol.path.states
            w = np.exp(-problem.log_weight(pcfg.eta))
            worst_u, worst_h = 0.0, 0.0
            for i, j in _pairs(len(pts), config.lipschitz_pairs, seed):
                dxi = np.linalg.norm(pts[i] - pts[j])
                du = float(np.max(w * np.linalg.norm(U[:, :, i] - U[:, :, j], axis=1)))
                dh = np.linalg.norm(graph.values[i] - graph.values[j])
                worst_u = max(worst_u, du / dxi)
                worst_h = max(worst_h, dh / dxi)
            slack = 1 + d["lipschitz_slack"]
            checks.append(CheckRecord.make("path_lipschitz", kind, worst_u,
                                           path_lipschitz_bound(model, F.lip, pcfg.eta) * slack))
            checks.append(CheckRecord.make("graph_lipschitz", kind, worst_h,
                                           graph.theoretical_lipschitz * slack))

        if "invariance" in config.checks:
            for tau in config.taus:
                res = check_invariance(graph, tau, system, pcfg, ev)
                dmax = max(r[0] for r in res)
                worst = max(res, key=lambda r: r[0] - r[1])
                checks.append(CheckRecord.make(
                    "invariance", kind, worst[0], worst[1], tau=float(tau), max_defect=dmax,
                    points=len(res)))
                artifacts.setdefault("invariance", []).extend(
                    [kind, float(tau), k, dfc, bud] for k, (dfc, bud) in enumerate(res))

        if ("transformed" in config.checks and system.noise_kind == MULTIPLICATIVE
                and noise.path is not None):
            for tau in config.taus:
                res = check_transformed_invariance(graph, tau, system, noise.path, pcfg, ev)
                worst = max(res, key=lambda r: r[0] - r[1])
                checks.append(CheckRecord.make("transformed_invariance", kind, worst[0], worst[1],
                                               tau=float(tau), points=len(res)))

        if "decay" in config.checks and kind == STABLE and config.horizon > 0:
            x0 = pts + graph.values
            traj = integrate_mild(system, x0, config.horizon, error_estimate=True)
            ratio = check_decay(traj, pcfg.eta, system.ou)
            # Bound: K/(1-rho) for exact manifold data, plus the weighted
            # integrator error and the growth of the starting-point error.
            _, err0, _ = ev(pts, 0.0)
            Z = cumulative_integral(system.ou.window(0.0, traj.grid.size - 1), system.step)
            wgt = np.exp(-pcfg.eta * traj.times - Z)
            amp = _growth(system, 0.0, config.horizon)
            n0 = np.linalg.norm(x0, axis=1)
            nz = n0 > 0
            extra = 0.0
            if nz.any():
                extra = float(np.max(wgt * (traj.error_estimate + amp * err0[nz].max())) / n0[nz].min())
            bound = path_lipschitz_bound(model, F.lip, pcfg.eta)
            checks.append(CheckRecord.make("decay", kind, ratio, bound + extra,
                                           constant=bound, horizon=config.horizon))

        if "derivative" in config.checks and config.derivative_order >= 1:
            _derivative_checks(config, system, pcfg, kind, pts, checks, notes)

    if "conjugacy" in config.checks and noise.path is not None:
        x0 = np.ones(model.n) * float(config.xi_samples.get("radius", 1.0)) / math.sqrt(model.n)
        q = config.step * 2 ** (config.conjugacy_levels - 1)
        horizon = math.floor(config.horizon / q + 1e-9) * q
        curve = check_conjugacy(system, noise.path, x0, horizon, config.conjugacy_levels,
                                truncation=noise.truncation)
        notes["conjugacy"] = curve.to_dict()
        order = curve.order if not math.isnan(curve.order) else -math.inf
        checks.append(CheckRecord.make("conjugacy_order", system.noise_kind, order,
                                       d["conjugacy_min_order"], ">=", gaps=curve.gaps,
                                       steps=curve.steps))
    return checks, artifacts, notes, gap


def _derivative_checks(config, system, pcfg, kind, pts, checks, notes):
    d = config.defaults
    model = system.model
    order = min(config.derivative_order, system.F.smoothness_order)
    if order < 1:
        notes[f"{kind}_derivative"] = "nonlinearity is not C^1"
        return
    own = model.minus_index if kind == STABLE else model.plus_index
    problem = PerronProblem(system, pcfg, kind, 0.0)

    def gfun(x):
        sol = solve(problem, x)
        return sol.graph_value

    for xi in pts[: config.derivative_points]:
        try:
            sol, stack = derivative_stack(xi, system, pcfg, order, kind=kind)
        except GapConditionError as exc:
            notes[f"{kind}_derivative"] = f"refused: {exc} (order {exc.order})"
            return
        notes.setdefault(f"{kind}_delta", stack[0].delta)
        D = graph_derivative(stack[0])
        h = d["fd_step_abs"] + d["fd_step_rel"] * np.linalg.norm(xi)
        FD = fd_graph_jacobian(gfun, xi, own, step=h)
        rel = np.linalg.norm(D - FD) / (1 + np.linalg.norm(D))
        checks.append(CheckRecord.make("derivative_fd", kind, rel, d["fd_relative_tol"],
                                       order=1, delta=stack[0].delta))
        checks.append(CheckRecord.make(
            "derivative_contraction", kind, max(stack[0].ratios, default=0.0),
            stack[0].contraction_bound + d["contraction_slack"], order=1))
        if order >= 2:
            H = np.array(stack[1].jacobians[problem.anchor_row])
            H[problem.own] = 0.0
            FD2 = fd_graph_hessian(gfun, xi, own, d["fd2_step"])
            rel2 = np.linalg.norm(H - FD2) / (1 + np.linalg.norm(H))
            sym = np.linalg.norm(H - np.swapaxes(H, 1, 2)) / (1 + np.linalg.norm(H))
            checks.append(CheckRecord.make("derivative_fd", kind, rel2, d["fd2_relative_tol"], order=2))
            checks.append(CheckRecord.make("derivative_symmetry", kind, sym, d["symmetry_tol"], order=2))


def run_seed(config, seed):
    """Run every enabled battery for one seed; errors are captured, not raised."""
    model, F, pcfg, _ = config.validate()
    rec = {"seed": int(seed), "error": None, "error_type": None, "checks": [], "notes": {},
           "gap": None}
    artifacts = {}
    try:
        checks, artifacts, notes, gap = _seed_checks(config, seed, model, F, pcfg)
        rec["checks"] = [c.to_dict() for c in checks]
        rec["notes"] = notes
        rec["gap"] = gap.to_dict()
    except ManifoldError as exc:
        rec["error"] = str(exc)
        rec["error_type"] = type(exc).__name__
    return rec, artifacts


def _run_seed_from_dict(args):
    cfg_dict, seed = args
    rec, artifacts = run_seed(ExperimentConfig.from_dict(cfg_dict), seed)
    return rec, _artifact_tables(artifacts, ExperimentConfig.from_dict(cfg_dict).build_model())


def _artifact_tables(artifacts, model):
    """Convert artifacts to picklable ``name -> (header, rows, meta)`` tables."""
    tables = {}
    for kind in (STABLE, UNSTABLE):
        g = artifacts.get(f"{kind}_graph")
        if g is None:
            continue
        own = model.minus_index if kind == STABLE else model.plus_index
        other = model.plus_index if kind == STABLE else model.minus_index
        header = [f"xi_{j + 1}" for j in own] + [f"h_{j + 1}" for j in other]
        rows = _rows(np.column_stack([g.base_points[:, own], g.values[:, other]]))
        tables[f"{kind}_graph"] = (header, rows, g.sidecar())
    if "invariance" in artifacts:
        tables["invariance"] = (["kind", "tau", "point", "defect", "budget"],
                                artifacts["invariance"], {})
    return tables


def write_table(fname_stem, name, header, rows, fmt="csv", meta=None):
    """Write one table as CSV (with a schema comment line) or JSON."""
    if fmt == "csv":
        with open(f"{fname_stem}.csv", "w", newline="") as fh:
            fh.write(f"# rdsmanifold {name} v{SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        if meta:
            with open(f"{fname_stem}.json", "w") as fh:
                json.dump({"schema_version": SCHEMA_VERSION, **meta}, fh, indent=2,
                          sort_keys=True, default=_json_default)
        return f"{fname_stem}.csv"
    doc = {"schema_version": SCHEMA_VERSION, "table": name, "columns": header, "rows": rows}
    if meta:
        doc["meta"] = meta
    with open(f"{fname_stem}.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
    return f"{fname_stem}.json"


def run_experiment(config, output_dir=None, workers=None):
    """Run all seeds and return the :class:`VerificationReport`.

    Seeds run in a process pool when ``workers > 1``; records are assembled
    in seed order, so the report and artifacts do not depend on scheduling.
    """
    config.validate()
    cfg_dict = config.to_dict()
    workers = config.workers if workers is None else workers
    out = output_dir if output_dir is not None else config.output_dir
    model = config.build_model()
    jobs = [(cfg_dict, int(s)) for s in config.seeds]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_from_dict, jobs))
    else:
        results = []
        for s in config.seeds:
            rec, art = run_seed(config, int(s))
            results.append((rec, _artifact_tables(art, model)))
    records = [r for r, _ in results]
    report = VerificationReport(cfg_dict, records, _aggregate(records))
    if out:
        os.makedirs(out, exist_ok=True)
        for rec, tables in results:
            for name, (header, rows, meta) in sorted(tables.items()):
                kind = "graph" if name.endswith("_graph") else name
                write_table(os.path.join(out, f"seed{rec['seed']}_{name}"), kind, header, rows,
                            config.output_format, meta)
        with open(os.path.join(out, "report.json"), "w") as fh:
            fh.write(report.to_json())
    return report


def load_config(fname, seed_override=None):
    cfg = ExperimentConfig.from_yaml(fname)
    if seed_override is not None:
        cfg = copy.deepcopy(cfg)
        cfg.seeds = list(seed_override)
    return cfg
