"""Command-line entry point ``rdsmanifold``."""
from __future__ import annotations

import json
import math
import os
import sys

import click
import numpy as np

from .conjugation import MULTIPLICATIVE
from .driver import (
    SCHEMA_VERSION,
    build_noise,
    load_config,
    run_experiment,
    sample_base_points,
    write_table,
)
from .errors import GapConditionError, ManifoldError
from .integrator import integrate_additive, integrate_mild, integrate_stratonovich
from .model import check_gap
from .perron import STABLE, UNSTABLE, PerronProblem, build_graph, solve
from .smooth import derivative_stack

MAX_CLI_ORDER = 3


def _seeds(value):
    if value is None:
        return None
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter("expected a comma-separated list of integers") from None


def _common(f):
    f = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None,
                     help="Array output format (default from config).")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                     help="Output directory (default from config).")(f)
    f = click.option("--seed-override", "seed_override", default=None,
                     help="Comma-separated seeds replacing the config list.")(f)
    f = click.argument("config", type=click.Path(exists=True, dir_okay=False))(f)
    return f


def _setup(config, seed_override, out, fmt):
    cfg = load_config(config, _seeds(seed_override))
    if out is not None:
        cfg.output_dir = out
    if fmt is not None:
        cfg.output_format = fmt
    return cfg


def _outdir(cfg):
    d = cfg.output_dir or "."
    os.makedirs(d, exist_ok=True)
    return d


def _fail(exc):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(2)


@click.group()
def main():
    """Random invariant manifolds of Galerkin-truncated stochastic evolution equations."""


@main.command("gap-check")
@_common
@click.option("--order", type=int, default=1, show_default=True)
def gap_check(config, seed_override, out, fmt, order):
    """Evaluate the gap inequalities for CONFIG."""
    try:
        cfg = _setup(config, seed_override, out, fmt)
        model = cfg.build_model()
        F = cfg.build_nonlinearity()
        rep = check_gap(model, F.lip, cfg.resolved_eta(model, F.lip), order)
    except ManifoldError as exc:
        _fail(exc)
    doc = {"schema_version": SCHEMA_VERSION, **rep.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True)
    click.echo(text)
    if out is not None or cfg.output_dir:
        with open(os.path.join(_outdir(cfg), "gap.json"), "w") as fh:
            fh.write(text + "\n")
    sys.exit(0 if rep.admissible else 1)


@main.command()
@_common
@click.option("--kind", type=click.Choice([STABLE, UNSTABLE]), default=STABLE, show_default=True)
def manifold(config, seed_override, out, fmt, kind):
    """Sample the stable or unstable manifold graph for each seed."""
    try:
        cfg = _setup(config, seed_override, out, fmt)
        model, F, pcfg, _ = cfg.validate()
        d = _outdir(cfg)
        pts = sample_base_points(model, kind, cfg.xi_samples)
        own = model.minus_index if kind == STABLE else model.plus_index
        other = model.plus_index if kind == STABLE else model.minus_index
        for seed in cfg.seeds:
            noise = build_noise(cfg, seed, model, F, pcfg)
            g = build_graph(kind, pts, noise.system, pcfg, 0.0, seed)
            header = [f"xi_{j + 1}" for j in own] + [f"h_{j + 1}" for j in other]
            rows = np.column_stack([g.base_points[:, own], g.values[:, other]]).tolist()
            path = write_table(os.path.join(d, f"seed{seed}_{kind}_graph"), "graph", header, rows,
                               cfg.output_format, g.sidecar())
            click.echo(f"seed {seed}: {len(pts)} points, measured Lip {g.measured_lipschitz:.4g} "
                       f"(bound {g.theoretical_lipschitz:.4g}) -> {path}")
    except ManifoldError as exc:
        _fail(exc)


@main.command()
@_common
@click.option("--kind", type=click.Choice([STABLE, UNSTABLE]), default=STABLE, show_default=True)
@click.option("--order", type=int, default=1, show_default=True,
              help=f"Highest derivative order (at most {MAX_CLI_ORDER}).")
def derivative(config, seed_override, out, fmt, kind, order):
    """Derivatives of the graph map at the sampled base points."""
    if not 1 <= order <= MAX_CLI_ORDER:
        raise click.BadParameter(f"order must be between 1 and {MAX_CLI_ORDER}")
    try:
        cfg = _setup(config, seed_override, out, fmt)
        model, F, pcfg, _ = cfg.validate()
        d = _outdir(cfg)
        pts = sample_base_points(model, kind, cfg.xi_samples)
        own = model.minus_index if kind == STABLE else model.plus_index
        other = model.plus_index if kind == STABLE else model.minus_index
        for seed in cfg.seeds:
            noise = build_noise(cfg, seed, model, F, pcfg)
            tables = {k: [] for k in range(1, order + 1)}
            for xi in pts:
                _, stack = derivative_stack(xi, noise.system, pcfg, order, kind=kind)
                for k, dp in enumerate(stack, start=1):
                    row = dp.problem.anchor_row
                    T = dp.jacobians[row][other]
                    tables[k].append(list(xi[own]) + T.ravel().tolist())
            for k, rows in tables.items():
                layout = ",".join(["i"] + [f"a{m}" for m in range(1, k + 1)])
                header = [f"xi_{j + 1}" for j in own] + [
                    "d_" + "_".join(str(v) for v in idx)
                    for idx in np.ndindex(*((len(other),) + (len(own),) * k))]
                meta = {"order": k, "kind": kind, "layout": f"row-major [{layout}]",
                        "rows_index": [int(j) for j in other], "cols_index": [int(j) for j in own]}
                path = write_table(os.path.join(d, f"seed{seed}_{kind}_d{k}"), f"derivative{k}",
                                   header, rows, cfg.output_format, meta)
                click.echo(f"seed {seed}: order {k} -> {path}")
    except GapConditionError as exc:
        click.echo(f"refused: {exc} (order {exc.order}, inequality: {exc.inequality})", err=True)
        sys.exit(1)
    except ManifoldError as exc:
        _fail(exc)


@main.command()
@_common
@click.option("--workers", type=int, default=None, help="Worker processes (default from config).")
def verify(config, seed_override, out, fmt, workers):
    """Run the verification batteries and write report.json."""
    try:
        cfg = _setup(config, seed_override, out, fmt)
        rep = run_experiment(cfg, output_dir=_outdir(cfg), workers=workers)
    except ManifoldError as exc:
        _fail(exc)
    for key, agg in rep.aggregates.items():
        worst = agg["margin_quantiles"]["1.0"]
        click.echo(f"{key:40s} {agg['passed']:4d}/{agg['count']:<4d} worst value/tolerance {worst}")
    for r in rep.records:
        if r["error"]:
            click.echo(f"seed {r['seed']}: {r['error_type']}: {r['error']}")
    click.echo(f"passing seeds: {len(rep.passing_seeds)}/{len(rep.records)}; audit "
               f"{'ok' if rep.audit() else 'FAILED'}")
    sys.exit(0 if rep.all_passed and rep.audit() else 1)


@main.command()
@_common
@click.option("--x0", default=None, help="Comma-separated initial state (default: radius/sqrt(n) in every mode).")
def simulate(config, seed_override, out, fmt, x0):
    """Write the noise path, OU sample and both trajectories for each seed."""
    try:
        cfg = _setup(config, seed_override, out, fmt)
        model, F, pcfg, _ = cfg.validate()
        d = _outdir(cfg)
        if x0 is None:
            x = np.full(model.n, float(cfg.xi_samples.get("radius", 1.0)) / math.sqrt(model.n))
        else:
            x = np.array([float(v) for v in x0.split(",")])
            if x.size != model.n:
                raise click.BadParameter(f"x0 needs {model.n} entries")
        H = cfg.horizon
        for seed in cfg.seeds:
            noise = build_noise(cfg, seed, model, F, pcfg)
            system = noise.system
            stem = os.path.join(d, f"seed{seed}")
            if noise.path is not None:
                p = noise.path
                write_table(f"{stem}_path", "path", ["t"] + [f"channel_{j}" for j in range(p.channels)],
                            np.column_stack([p.grid.times, p.values]).tolist(), cfg.output_format)
            ou = system.ou
            write_table(f"{stem}_ou", "ou", ["t", "z"], np.column_stack([ou.grid.times, ou.values]).tolist(),
                        cfg.output_format, {"quadrature_error_bound": ou.quadrature_error_bound,
                                            "truncation_bound": ou.truncation_bound})
            if system.noise_kind == MULTIPLICATIVE:
                v0 = x * math.exp(-ou.at(0.0))
            else:
                v0 = x - system.stationary.at(0.0)
            mild = integrate_mild(system, v0, H)
            hdr = ["t"] + [f"u_{j + 1}" for j in range(model.n)]
            write_table(f"{stem}_mild", "trajectory", hdr,
                        np.column_stack([mild.times, mild.states]).tolist(), cfg.output_format,
                        {"scheme": mild.scheme, "coordinates": "conjugated"})
            if noise.path is not None:
                if system.noise_kind == MULTIPLICATIVE:
                    ref = integrate_stratonovich(model, F, noise.path, x, H)
                else:
                    ref = integrate_additive(model, F, noise.path, x, H)
                write_table(f"{stem}_sde", "trajectory", hdr,
                            np.column_stack([ref.times, ref.states]).tolist(), cfg.output_format,
                            {"scheme": ref.scheme, "coordinates": "original"})
            click.echo(f"seed {seed}: wrote {stem}_*")
    except ManifoldError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
