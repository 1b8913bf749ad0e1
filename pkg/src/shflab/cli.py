"""The `shflab` command.

Three subcommands: `nu` evaluates the Volterra special function, `kernel`
evaluates or tabulates the variance and semigroup kernels, and `check`
runs a named harness experiment.  Exit codes: 0 success, 1 a check failed,
2 usage, configuration, or domain error.  Parameter precedence for checks
is schema defaults, then the --config file, then flags.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from .errors import DomainError, SchemaError
from .harness import (CACHE_DIR_ENV, EXPERIMENT_SCHEMAS, ExperimentConfig,
                      get_kernel_grid, run_experiment)
from .kernels import build_kernel_grid, k_kernel, p_kernel
from .special_functions import volterra_eval


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(package_name="shflab", message="%(version)s")
def main():
    """Numerical laboratory for the critical 2d stochastic heat flow.

    The kernel table cache lives under ~/.cache/shflab unless the
    SHFLAB_CACHE_DIR environment variable points elsewhere.
    """


@main.command("nu")
@click.option("--a", "a", type=float, required=True,
              help="Argument of nu (dimensionless, 0 < a <= 700).")
@click.option("--prime", is_flag=True,
              help="Evaluate the derivative nu'(a) instead of nu(a).")
@click.option("--tol", type=float, default=1e-10, show_default=True,
              help="Largest acceptable relative error estimate "
                   "(dimensionless); exceeding it exits 1.")
def cmd_nu(a, prime, tol):
    """Print one CSV line `a,value,rel_err` for nu(a) or nu'(a)."""
    try:
        ev = volterra_eval(a, prime=prime)
    except (DomainError, OverflowError) as exc:
        _fail(2, str(exc))
    click.echo(f"{ev.argument!r},{ev.value!r},{ev.rel_error_estimate:.3e}")
    if ev.rel_error_estimate > tol:
        _fail(1, f"error estimate {ev.rel_error_estimate:.3e} exceeds --tol {tol:.3e}")


@main.command("kernel")
@click.option("--t", "t", type=float, required=True,
              help="Time separation t (time units, t > 0).")
@click.option("--theta", type=float, required=True,
              help="Disorder parameter theta (dimensionless).")
@click.option("--x", nargs=2, type=float, default=None,
              help="Source point x as two coordinates (space units).")
@click.option("--y", nargs=2, type=float, default=None,
              help="Target point y as two coordinates (space units).")
@click.option("--table", "table_path", type=click.Path(), default=None,
              help="Instead of a point evaluation, tabulate K_t on a "
                   "log-spaced radial grid and write <path>.npz plus a "
                   "versioned .json sidecar.")
@click.option("--r-min", type=float, default=None,
              help="Smallest tabulated radius for --table (space units; "
                   "default 1e-4).")
@click.option("--r-max", type=float, default=None,
              help="Largest tabulated radius for --table (space units; "
                   "default 4 sqrt(t)).")
@click.option("--n-radii", type=int, default=224, show_default=True,
              help="Number of tabulated radii for --table (dimensionless).")
def cmd_kernel(t, theta, x, y, table_path, r_min, r_max, n_radii):
    """Print one CSV line `K,P` at (t, theta, x, y), or write a table."""
    if table_path is not None and (x or y):
        _fail(2, "--table conflicts with --x/--y: a table tabulates radii, "
                 "a point evaluation needs both points; pass one or the other")
    try:
        if table_path is not None:
            spec = (r_min if r_min is not None else 1e-4,
                    r_max if r_max is not None else 4.0 * np.sqrt(t),
                    n_radii)
            grid = build_kernel_grid(t, theta, radii=spec)
            grid.save(table_path)
            click.echo(f"wrote {os.path.splitext(table_path)[0]}.npz and .json")
            return
        if not x or not y:
            _fail(2, "point evaluation needs both --x and --y "
                     "(or --table for tabulation)")
        kv = k_kernel(t, theta, x, y)
        pv = p_kernel(t, theta, x, y)
    except DomainError as exc:
        _fail(2, str(exc))
    click.echo(f"{kv!r},{pv!r}")


@main.command("check")
@click.argument("experiment", type=click.Choice(sorted(EXPERIMENT_SCHEMAS)))
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="Config file of `key = value` lines; flags override it.")
@click.option("--seed", type=int, default=None,
              help="Override the experiment seed (dimensionless).")
@click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
              help="Override one schema parameter (same units as the "
                   "schema; see `check --list`); repeatable, wins over "
                   "--config.")
@click.option("--list", "list_params", is_flag=True,
              help="List the experiment's parameters, defaults, and units, "
                   "then exit.")
@click.option("--output-dir", default="shflab-runs", show_default=True,
              help="Directory receiving append-only run directories.")
@click.option("--threads", type=int, default=None,
              help="Worker threads (dimensionless; default: available cores). "
                   "Results are identical for any thread count.")
def cmd_check(experiment, config_file, seed, assignments, list_params,
              output_dir, threads):
    """Run the named experiment; exit 0 iff every check passes."""
    schema = EXPERIMENT_SCHEMAS[experiment]
    if list_params:
        click.echo(f"{experiment} parameters (all also settable in --config):")
        for key, par in sorted(schema.items()):
            click.echo(f"  {key} = {par.default}  ({par.kind}) {par.help}")
        click.echo("  seed: base random seed (dimensionless)")
        return
    overrides = {}
    for item in assignments:
        if "=" not in item:
            _fail(2, f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if seed is not None:
        if "seed" in overrides:
            _fail(2, "conflicting flags: --seed and --set seed= both given; "
                     "pass only one")
        overrides["seed"] = seed
    try:
        cfg = ExperimentConfig.build(
            experiment, config_file=config_file, overrides=overrides,
            output_dir=output_dir,
            threads=threads if threads is not None else os.cpu_count() or 1)
        report = run_experiment(cfg)
    except (SchemaError, DomainError) as exc:
        _fail(2, str(exc))
    for line in report.summary_lines():
        click.echo(line)
    for note in report.notes:
        click.echo(f"note: {note}")
    click.echo(f"report: {report.run_dir}/report.json")
    click.echo(f"results: {report.run_dir}/results.csv")
    if not report.all_passed:
        failing = ", ".join(c.name for c in report.checks if not c.passed)
        _fail(1, f"failing checks: {failing}")


# get_kernel_grid is re-exported so `python -m shflab.cli` scripting can
# reuse the same cache the check subcommand populates.
__all__ = ["main", "get_kernel_grid", "CACHE_DIR_ENV"]


if __name__ == "__main__":
    main()
