"""Polymer path sampling, local times, and change-of-disorder reweighting.

The normalized polymer measure started at x with horizon T is Markov with
transition density

    d_{s,t}(x, y) = [m(T - t, y) / m(T - s, x)] P_{t-s}(x, y),

where m is the total mass of P; the mass semigroup makes each step integrate
to one.  Two samplers target it:

* an Euler-Maruyama scheme for the SDE dX = dW + b_{T-t}(X) dt, where
  b_tau = grad ln m(tau, .) is the tabulated drift.  The drift magnitude
  diverges like 1/(|y| ln(1/|y|)) at the origin, so inside a core radius
  proportional to sqrt(dt) it is frozen at its value on the core circle;
  the bias this introduces shrinks with dt and is kept out of histogram
  tests by dropping the innermost bin.
* a direct chain sampler that draws each step from d itself: far from the
  origin a drift-tilted Gaussian proposal with an exact density correction
  carried in per-path log-weights, near the origin inverse-CDF sampling of
  the angular-integrated step density (Gaussian-plus-K radial profile, von
  Mises or uniform angle depending on which part produced the radius).
  This keeps reweighting diagnostics free of SDE discretization bias.

Local time of a path near the origin is measured through the occupation
time of the epsilon-ball,

    L^eps = meas({a : |p(a)| <= eps}) / (2 eps^2 ln^2(1/eps)).

local_time, the plain path functional, locates ball crossings by linear
interpolation of |p| between grid points; it is adequate when eps is many
step lengths wide.  The chain sampler instead accumulates the conditional
expectation of the occupation given the step endpoints, integrating the
in-ball probability of the Brownian bridge across each step.  The linear
rule misses excursions whose endpoints both lie outside the ball and
undercounts straddling steps (the radius along a chord is convex), a bias
that grows as eps approaches the step length; the bridge form is exact in
law for the Gaussian step and leaves only the within-step drift and the
small kernel part of the step density unaccounted.  The intersection time
of two paths is L^eps of (p - q)/sqrt(2).  L^eps converges only in L^1,
so every acceptance involving it is a trend check, never a fixed
tolerance.

Changing the disorder parameter theta -> theta' reweights the polymer
measure by exp((theta' - theta) L).  rn_reweight_check compares the
kernel-side value of a terminal observable under theta' with the sampled
expectation under theta of the observable times exp((theta' - theta) L^eps),
per rung of an epsilon ladder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import i0e
from scipy.stats import chi2

from ._quad import radial_nodes
from .errors import DomainError, SingularityError
from .kernels import (DisorderParam, KernelGrid, as_disorder, build_kernel_grid,
                      doob_radial, drift_magnitude_radial, k_matrix, k_pointwise,
                      _mass_or_one)
from .measures import MomentDensity, Partition

__all__ = [
    "DriftTableFamily", "PathEnsemble", "GoodnessOfFit", "LocalTimeEstimate",
    "DoobEnsemble", "RNCheckResult", "RNReweightReport",
    "sample_paths", "transition_check", "local_time", "intersection_time",
    "sample_doob_paths", "rn_reweight_check", "finite_dim_v_density",
]

_TINY = 1e-300

# Core cap radius factor: drift lookups inside _CORE_FACTOR * sqrt(dt) are
# frozen at the core circle.  The scheme destabilizes once the drift step
# |b| dt reaches the noise scale sqrt(dt); with |b| ~ 1/(r ln(1/r)) the cap
# at 2 sqrt(dt) keeps the drift step below ~0.2 of the noise step, while a
# cap at 10 sqrt(dt) (0.32 at dt = 1e-3) demonstrably biases the radial law
# well outside the innermost histogram bin that chi-square tests drop.
_CORE_FACTOR = 2.0


def _check_grid(T, dt):
    T, dt = float(T), float(dt)
    if not (T > 0 and 0 < dt <= T):
        raise DomainError(f"need 0 < dt <= T, got dt = {dt}, T = {T}")
    n_steps = round(T / dt)
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise DomainError(f"dt = {dt} does not divide T = {T}")
    return T, dt, n_steps


# ---------------------------------------------------------------------------
# drift tables


@dataclass
class DriftTableFamily:
    """Per-step radial tables of the drift magnitude |b_{T - k dt}|.

    Built once per run from the kernels module and then only interpolated
    (linearly in ln radius), so a sampled ensemble carries an auditable
    record of every (radius, magnitude) pair the sampler could have
    queried.  core_radius is the cap radius _CORE_FACTOR * sqrt(dt):
    lookups below it are clamped to the core circle.
    """

    theta: DisorderParam
    taus: np.ndarray
    radii: np.ndarray
    log_radii: np.ndarray = field(repr=False)
    magnitudes: np.ndarray = field(repr=False)
    core_radius: float

    @classmethod
    def build(cls, T, theta, dt, r_max=None, n_radii=192) -> "DriftTableFamily":
        T, dt, n_steps = _check_grid(T, dt)
        th = as_disorder(theta)
        if r_max is None:
            r_max = 10.0 * np.sqrt(T) + 4.0
        radii = np.geomspace(1e-4, r_max, int(n_radii))
        taus = T - dt * np.arange(n_steps + 1)
        mags = np.empty((n_steps + 1, radii.size))
        for k, tau in enumerate(taus[:-1]):
            mags[k] = drift_magnitude_radial(tau, th, radii)
        mags[-1] = 0.0  # m(0, .) = 1, so the drift vanishes at the horizon
        return cls(theta=th, taus=taus, radii=radii,
                   log_radii=np.log(radii), magnitudes=mags,
                   core_radius=_CORE_FACTOR * np.sqrt(dt))

    def magnitude(self, step, radii) -> np.ndarray:
        """|b| at step k, capped inside the core radius.

        Interpolation is linear in ln radius.  Lookups are clamped to the
        core circle, so the magnitude spans a narrow range over one grid
        cell and linear interpolation of the value itself is accurate.
        """
        r = np.clip(radii, self.core_radius, self.radii[-1])
        return np.interp(np.log(r), self.log_radii, self.magnitudes[step])


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class PathEnsemble:
    """Paths of the drifted SDE on a common (possibly thinned) time grid.

    positions has shape (n_paths, len(times), 2).  log_weights is zero for
    plain SDE paths and carries importance corrections for chain-sampled
    ensembles.  min_radius is the minimum of |X| over the fine simulation
    grid, recorded before thinning so that ball-entry statistics do not
    depend on keep_every.
    """

    T: float
    theta: DisorderParam
    start: np.ndarray
    dt: float
    times: np.ndarray
    positions: np.ndarray
    log_weights: np.ndarray
    seed: int
    min_radius: np.ndarray
    drift_tables: Optional[DriftTableFamily] = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise DomainError(f"positions must be (n_paths, n_times, 2), got {self.positions.shape}")
        if self.positions.shape[1] != len(self.times):
            raise DomainError("positions and times disagree on the grid length")
        if not np.all(np.isfinite(self.log_weights)):
            raise DomainError("path log-weights must be finite")

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    def at_time(self, t) -> np.ndarray:
        """Positions at a stored grid time."""
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))
        if idx.size == 0:
            raise DomainError(f"t = {t} is not on the stored grid")
        return self.positions[:, idx[0], :]

    def export_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("path_id,time,x1,x2\n")
            for i in range(self.n_paths):
                for j, t in enumerate(self.times):
                    x, y = self.positions[i, j]
                    fh.write(f"{i},{float(t)!r},{float(x)!r},{float(y)!r}\n")

    def save(self, path) -> None:
        """Compact binary trace: one .npz with arrays and scalar metadata."""
        np.savez_compressed(
            Path(path).with_suffix(".npz"),
            T=self.T, theta=self.theta.theta, start=self.start, dt=self.dt,
            times=self.times, positions=self.positions,
            log_weights=self.log_weights, seed=self.seed,
            min_radius=self.min_radius)

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with np.load(Path(path).with_suffix(".npz")) as data:
            return cls(T=float(data["T"]), theta=DisorderParam(float(data["theta"])),
                       start=data["start"].copy(), dt=float(data["dt"]),
                       times=data["times"].copy(), positions=data["positions"].copy(),
                       log_weights=data["log_weights"].copy(), seed=int(data["seed"]),
                       min_radius=data["min_radius"].copy())


def _sde_chunk(args):
    (chunk_idx, size, seed, x0, dt, n_steps, keep_every, tables) = args
    rng = np.random.default_rng([seed, 11, chunk_idx])
    pos = np.tile(np.asarray(x0, dtype=float), (size, 1))
    kept = np.empty((size, n_steps // keep_every + 1, 2))
    kept[:, 0] = pos
    min_rad = np.full(size, np.hypot(x0[0], x0[1]))
    sqdt = np.sqrt(dt)
    for k in range(n_steps):
        # Heun drift corrector with shared noise: plain start-point drift
        # leaves an O(dt) law error that a 16-bin histogram of 1e5 paths
        # resolves at dt = 1e-3; averaging the drift over the predictor
        # endpoint cancels it.
        r = np.maximum(np.hypot(pos[:, 0], pos[:, 1]), _TINY)
        b0 = -(tables.magnitude(k, r) / r)[:, None] * pos
        noise = sqdt * rng.standard_normal((size, 2))
        pred = pos + b0 * dt + noise
        rp = np.maximum(np.hypot(pred[:, 0], pred[:, 1]), _TINY)
        b1 = -(tables.magnitude(k + 1, rp) / rp)[:, None] * pred
        pos = pos + 0.5 * (b0 + b1) * dt + noise
        r_new = np.hypot(pos[:, 0], pos[:, 1])
        np.minimum(min_rad, r_new, out=min_rad)
        if (k + 1) % keep_every == 0:
            kept[:, (k + 1) // keep_every] = pos
    return kept, min_rad


def sample_paths(T, theta, x0, dt, n_paths, seed, tables=None, keep_every=1,
                 chunk_size=16384, map_fn=map) -> PathEnsemble:
    """Euler-Maruyama ensemble for dX = dW + b_{T-t}(X) dt from x0.

    Drift values come from per-step radial tables (DriftTableFamily) with
    the core cap applied at lookup.  Paths are simulated in fixed-size
    chunks with per-chunk RNG streams derived from (seed, chunk index), so
    the result is independent of how map_fn schedules the chunks.
    keep_every thins the stored grid; the simulation step is always dt.
    """
    T, dt, n_steps = _check_grid(T, dt)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2,):
        raise DomainError(f"x0 must be a point in the plane, got shape {x0.shape}")
    if np.hypot(x0[0], x0[1]) == 0.0:
        raise SingularityError("the polymer start must be away from the origin")
    n_paths = int(n_paths)
    if n_paths < 1:
        raise DomainError("need at least one path")
    keep_every = int(keep_every)
    if keep_every < 1 or n_steps % keep_every != 0:
        raise DomainError(f"keep_every = {keep_every} must divide n_steps = {n_steps}")
    if tables is None:
        tables = DriftTableFamily.build(T, theta, dt)
    elif tables.taus.size != n_steps + 1:
        raise DomainError("drift tables were built for a different grid")

    chunks = []
    lo = 0
    while lo < n_paths:
        size = min(chunk_size, n_paths - lo)
        chunks.append((len(chunks), size, int(seed), x0, dt, n_steps, keep_every, tables))
        lo += size
    parts = list(map_fn(_sde_chunk, chunks))
    positions = np.concatenate([p[0] for p in parts], axis=0)
    min_rad = np.concatenate([p[1] for p in parts], axis=0)
    times = dt * keep_every * np.arange(n_steps // keep_every + 1)
    return PathEnsemble(T=T, theta=tables.theta, start=x0, dt=dt, times=times,
                        positions=positions, log_weights=np.zeros(n_paths),
                        seed=int(seed), min_radius=min_rad, drift_tables=tables)


# ---------------------------------------------------------------------------
# transition goodness of fit


@dataclass(frozen=True)
class GoodnessOfFit:
    statistic: float
    dof: int
    p_value: float
    n_paths: int
    probe_time: float
    reference: str
    bin_edges: np.ndarray
    observed: np.ndarray
    expected: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "statistic": self.statistic, "dof": self.dof, "p_value": self.p_value,
            "n_paths": self.n_paths, "probe_time": self.probe_time,
            "reference": self.reference,
            "bin_edges": [float(e) for e in self.bin_edges],
            "observed": [int(o) for o in self.observed],
            "expected": [float(e) for e in self.expected],
        }, indent=2)

    def export_json(self, path) -> None:
        Path(path).write_text(self.to_json())


def _radial_quantiles(pdf, r_hi, n_bins, n_grid=8001):
    """Equal-probability radial bin edges for a density pdf(rho) wrt drho."""
    grid = np.linspace(0.0, r_hi, n_grid)
    vals = np.concatenate([[0.0], pdf(grid[1:])])
    cdf = np.concatenate([[0.0], np.cumsum((vals[1:] + vals[:-1]) * 0.5 * np.diff(grid))])
    total = cdf[-1]
    if not 0.99 < total < 1.01:
        raise DomainError(f"reference density integrates to {total:.4f}, not 1")
    probs = np.arange(1, n_bins) / n_bins
    inner = np.interp(probs * total, cdf, grid)
    return np.concatenate([[0.0], inner, [np.inf]])


def transition_check(ensemble: PathEnsemble, t, n_bins=16, drop_innermost=True,
                     reference="doob") -> GoodnessOfFit:
    """Chi-square fit of the radial law of X_t against a reference density.

    reference "doob" integrates the mass-tilted P kernel over angles;
    "heat" uses the plain Brownian radial law (the Rice density), the
    right control when the drift is negligible.  Bins are equal-probability
    under the reference; the innermost one is excluded by default because
    the core cap biases exactly that region, and the remaining counts are
    renormalized (conditional chi-square, dof = kept bins - 1).
    """
    if ensemble.n_paths == 0:
        raise DomainError("empty ensemble")
    pts = ensemble.at_time(t)
    a = float(np.hypot(ensemble.start[0], ensemble.start[1]))
    t = float(t)
    if reference == "doob":
        def pdf(rho):
            return doob_radial(ensemble.T, ensemble.theta, 0.0, t, a, rho) * rho
    elif reference == "heat":
        def pdf(rho):
            return rho / t * np.exp(-(rho - a) ** 2 / (2.0 * t)) * i0e(a * rho / t)
    else:
        raise DomainError(f"unknown reference {reference!r}")
    edges = _radial_quantiles(pdf, a + 10.0 * np.sqrt(t), int(n_bins))
    radii = np.hypot(pts[:, 0], pts[:, 1])
    observed = np.histogram(radii, bins=edges)[0]
    keep = slice(1, None) if drop_innermost else slice(None)
    observed = observed[keep]
    n_kept = int(observed.sum())
    expected = np.full(observed.size, n_kept / observed.size)
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    dof = observed.size - 1
    return GoodnessOfFit(statistic=statistic, dof=dof,
                         p_value=float(chi2.sf(statistic, dof)),
                         n_paths=ensemble.n_paths, probe_time=t,
                         reference=reference, bin_edges=edges,
                         observed=observed, expected=expected)


# ---------------------------------------------------------------------------
# local and intersection times


@dataclass(frozen=True)
class LocalTimeEstimate:
    epsilon: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError(f"need 0 < epsilon < 1, got {self.epsilon}")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DomainError("local times must be finite and nonnegative")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def _occupation(times, points, epsilon):
    """meas({a : |p(a)| <= eps}) with |p| linearly interpolated between nodes."""
    r = np.hypot(points[..., 0], points[..., 1])
    lo = np.minimum(r[..., :-1], r[..., 1:])
    hi = np.maximum(r[..., :-1], r[..., 1:])
    frac = np.clip((epsilon - lo) / np.maximum(hi - lo, _TINY), 0.0, 1.0)
    return np.sum(frac * np.diff(times), axis=-1)


def local_time(times, points, epsilon):
    """L^eps of one path (n, 2) or a batch (..., n, 2) on the grid `times`.

    Returns occupation time of the eps-ball, with crossings located by
    linear interpolation of the radius, normalized by 2 eps^2 ln^2(1/eps).
    """
    epsilon = float(epsilon)
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"need 0 < epsilon < 1, got {epsilon}")
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 2 or points.shape[-2] != times.size:
        raise DomainError(f"points of shape {points.shape} do not match {times.size} grid times")
    occ = _occupation(times, points, epsilon)
    out = occ / (2.0 * epsilon ** 2 * np.log(1.0 / epsilon) ** 2)
    return float(out) if out.ndim == 0 else out


def intersection_time(times, p, q, epsilon):
    """L^eps of the rescaled difference (p - q)/sqrt(2)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return local_time(times, (p - q) / np.sqrt(2.0), epsilon)


# ---------------------------------------------------------------------------
# direct chain sampling of the normalized polymer


@dataclass
class DoobEnsemble:
    """Chain-sampled polymer paths reduced to reweighting sufficient stats.

    Full trajectories at the fine step are never stored; the sampler
    accumulates, per path, the terminal point, the importance log-weight of
    the far-step Gaussian proposal against the exact step density (near
    steps sample their transition exactly and contribute none), and the
    bridge-averaged eps-ball occupation for every rung of eps_ladder (so
    local times for the whole ladder come from one ensemble).
    """

    T: float
    theta: DisorderParam
    start: np.ndarray
    dt: float
    seed: int
    eps_ladder: tuple
    end_points: np.ndarray
    log_weights: np.ndarray
    local_times: np.ndarray
    min_radius: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.end_points.shape[0]

    def local_time_estimate(self, epsilon) -> LocalTimeEstimate:
        for j, eps in enumerate(self.eps_ladder):
            if np.isclose(eps, epsilon, rtol=0, atol=1e-12):
                return LocalTimeEstimate(epsilon=float(eps), values=self.local_times[:, j])
        raise DomainError(f"epsilon = {epsilon} is not on the sampled ladder {self.eps_ladder}")


_NEAR_FACTOR = 8.0
_SGRID = np.concatenate([[0.0], np.geomspace(1e-3, 18.0, 639)])

# Gauss-Legendre rules on [0, 1] for the bridge occupation: _BR_S walks the
# step in time; _BR_R resolves the radial Rice density on the ball-boundary
# shell with a composite rule (4 panels of GL-8, worst error 2e-8), because
# the density is a sigma-wide peak that can sit anywhere in a window up to
# 16 sigma wide and a single panel cannot track it.
_BR_S, _BR_W = np.polynomial.legendre.leggauss(8)
_BR_S, _BR_W = 0.5 * (_BR_S + 1.0), 0.5 * _BR_W
_BR_R, _BR_RW = np.polynomial.legendre.leggauss(8)
_BR_R = np.concatenate([(p + 0.5 * (_BR_R + 1.0)) / 4 for p in range(4)])
_BR_RW = np.tile(0.5 * _BR_RW / 4, 4)


def _disc_probability(m, sig, eps):
    """P(|G| < eps) for G ~ N(mu, sig^2 I_2) with |mu| = m, broadcast over m.

    The radius of G follows the Rice density
        (rho/sig^2) exp(-(rho - m)^2 / (2 sig^2)) i0e(rho m / sig^2),
    written with the exponentially scaled Bessel function so no factor
    overflows.  All of its mass lies within 8 sig of rho = m (or of 0),
    so elements with m + 8 sig <= eps return exactly 1 and elements with
    m - 8 sig >= eps exactly 0; only the boundary shell |m - eps| < 8 sig
    integrates, with a composite rule (the density is a sigma-wide peak
    anywhere in a window up to 16 sigma wide, which one panel cannot
    track) resolving it to ~2e-8.
    """
    m, sig = np.broadcast_arrays(np.asarray(m, dtype=float),
                                 np.asarray(sig, dtype=float))
    out = np.zeros(m.shape)
    out[m + 8.0 * sig <= eps] = 1.0
    shell = np.abs(m - eps) < 8.0 * sig
    if np.any(shell):
        mm = m[shell]
        sg = sig[shell]
        ss = sg * sg
        lo = np.maximum(mm - 8.0 * sg, 0.0)
        span = np.minimum(mm + 8.0 * sg, eps) - lo
        rho = lo[:, None] + span[:, None] * _BR_R
        integrand = (rho / ss[:, None]
                     * np.exp(-((rho - mm[:, None]) ** 2) / (2.0 * ss[:, None]))
                     * i0e(rho * mm[:, None] / ss[:, None]))
        out[shell] = span * np.sum(_BR_RW * integrand, axis=-1)
    return out


def _bilinear(xg, yg, table, x, y):
    i = np.clip(np.searchsorted(xg, x) - 1, 0, xg.size - 2)
    j = np.clip(np.searchsorted(yg, y) - 1, 0, yg.size - 2)
    fx = np.clip((x - xg[i]) / (xg[i + 1] - xg[i]), 0.0, 1.0)
    fy = np.clip((y - yg[j]) / (yg[j + 1] - yg[j]), 0.0, 1.0)
    return ((1 - fx) * (1 - fy) * table[i, j] + fx * (1 - fy) * table[i + 1, j]
            + (1 - fx) * fy * table[i, j + 1] + fx * fy * table[i + 1, j + 1])


class _ChainTables:
    """Shared per-run tables for the direct chain sampler.

    log_mass[k] tabulates ln m(T - t_k, rho) on a common log-radius grid
    (log_mass[n_steps] is the terminal ln m(0, .) = 0); dlog[k] tabulates
    the radial derivative of ln m, the signed drift magnitude.

    The near-origin step works in units of sqrt(dt), where by diffusive
    scaling the angular-integrated untilted step density is

        f0(s | a) = s [e^{-(s-a)^2/2} I0e(a s) + 2 pi G(a, s)],

    with G the kernel K_1 at the shifted disorder theta + ln dt, tabulated
    once per run.  The transition actually sampled is the mass-tilted law
    f0(s | a) m(j dt, s sqrt(dt)) / norm, the exact radial step of the
    conditioned chain with j steps left to run, so near-origin steps carry
    no importance weight at all.  Since m(j dt, .) moves slowly in ln j,
    tilt_quantiles tabulates the inverse CDF on a (slab, ln a, u) grid
    whose slabs are geometric in steps-left and the per-step law is the
    quantile blend of the bracketing slabs (tabulation is the definition
    of the chain here; its residual error is a documented bias, not a
    weight).  gauss_prob holds the Gaussian share of f0 on a (ln a, s)
    grid for the angle mixture, which the radial tilt leaves untouched.
    """

    def __init__(self, T, theta, dt, n_steps, r_max, kernel_grid=None):
        self.th = as_disorder(theta)
        self.dt = dt
        self.sqdt = np.sqrt(dt)
        self.radii = np.geomspace(1e-6, r_max, 256)
        self.log_radii = np.log(self.radii)
        # Mass and drift rows are computed exactly on a sub-grid geometric in
        # steps-left and blended linearly in ln(steps-left) for the remaining
        # rows; ln m(j dt, .) moves slowly on that scale, and the blend error
        # largely cancels in the consecutive-row differences the far-step
        # weight consumes.  Row j = 0 is the terminal ln m(0, .) = 0.
        self.log_mass = np.zeros((n_steps + 1, self.radii.size))
        self.dlog = np.zeros_like(self.log_mass)
        j_tab = np.unique(np.round(np.geomspace(1.0, n_steps, 160)).astype(int))
        lm_tab = np.empty((j_tab.size, self.radii.size))
        dl_tab = np.empty_like(lm_tab)
        for i, j in enumerate(j_tab):
            lm_tab[i] = np.log(_mass_or_one(dt * j, self.th, self.radii))
            dl_tab[i] = -drift_magnitude_radial(dt * j, self.th, self.radii)
        rows = np.arange(n_steps)             # rows with steps left j > 0
        j_left = (n_steps - rows).astype(float)
        if j_tab.size == 1:
            self.log_mass[rows] = lm_tab[0]
            self.dlog[rows] = dl_tab[0]
        else:
            lj_tab = np.log(j_tab)
            lo = np.clip(np.searchsorted(lj_tab, np.log(j_left), side="right") - 1,
                         0, j_tab.size - 2)
            lam = ((np.log(j_left) - lj_tab[lo])
                   / (lj_tab[lo + 1] - lj_tab[lo]))[:, None]
            self.log_mass[rows] = (1.0 - lam) * lm_tab[lo] + lam * lm_tab[lo + 1]
            self.dlog[rows] = (1.0 - lam) * dl_tab[lo] + lam * dl_tab[lo + 1]
        kgrid = kernel_grid
        if kgrid is None:
            kgrid = build_kernel_grid(*chain_grid_spec(self.th.theta, dt))
        else:
            want_t, want_th, _ = chain_grid_spec(self.th.theta, dt)
            if abs(kgrid.t - want_t) > 1e-12 or abs(kgrid.theta.theta - want_th) > 1e-9:
                raise DomainError(
                    f"supplied kernel grid is K_{kgrid.t} at theta = {kgrid.theta.theta}, "
                    f"the chain at dt = {dt} needs K_{want_t} at theta = {want_th}")
        a_grid = np.geomspace(1e-3, _NEAR_FACTOR + 0.5, 160)
        self.log_a_grid = np.log(a_grid)
        s = _SGRID[None, :]
        gauss = np.exp(-0.5 * (s - a_grid[:, None]) ** 2) * i0e(a_grid[:, None] * s)
        kpart = 2.0 * np.pi * kgrid.evaluate(a_grid[:, None], np.maximum(s, 1e-6))
        kpart[:, 0] = 0.0
        dens = _SGRID[None, :] * (gauss + kpart)
        self.n_steps = n_steps
        self.u_grid = np.linspace(0.0, 1.0, 1025)
        slabs = [0]
        while slabs[-1] < n_steps - 1:
            slabs.append(min(max(2 * slabs[-1], 1), n_steps - 1))
        self.slab_steps = np.array(slabs)
        self.tilt_quantiles = np.empty((len(slabs), a_grid.size, self.u_grid.size))
        rho_s = _SGRID * self.sqdt
        for si, j_left in enumerate(slabs):
            tilted = dens * np.exp(self.log_mass_at(n_steps - j_left, rho_s))[None, :]
            inc = (tilted[:, 1:] + tilted[:, :-1]) * 0.5 * np.diff(_SGRID)[None, :]
            cdf = np.concatenate([np.zeros((a_grid.size, 1)),
                                  np.cumsum(inc, axis=1)], axis=1)
            for i in range(a_grid.size):
                self.tilt_quantiles[si, i] = np.interp(
                    self.u_grid * cdf[i, -1], cdf[i], _SGRID)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.gauss_prob = np.where(gauss + kpart > 0.0, gauss / (gauss + kpart), 1.0)

    def slab_blend(self, k):
        """Bracketing slab indices and ln-steps-left blend weight for step k."""
        j_left = self.n_steps - (k + 1)
        hi = int(np.searchsorted(self.slab_steps, j_left))
        if hi == 0 or self.slab_steps[hi] == j_left:
            return hi, hi, 0.0
        lo = hi - 1
        lam = ((np.log1p(j_left) - np.log1p(self.slab_steps[lo]))
               / (np.log1p(self.slab_steps[hi]) - np.log1p(self.slab_steps[lo])))
        return lo, hi, float(lam)

    def log_mass_at(self, k, radii):
        lr = np.clip(np.log(np.maximum(radii, _TINY)), self.log_radii[0], self.log_radii[-1])
        return np.interp(lr, self.log_radii, self.log_mass[k])

    def dlog_at(self, k, radii):
        lr = np.clip(np.log(np.maximum(radii, _TINY)), self.log_radii[0], self.log_radii[-1])
        return np.interp(lr, self.log_radii, self.dlog[k])


def _near_step(tables: _ChainTables, k, pos, rng):
    """Tabulated inverse-CDF step for paths within 8 sqrt(dt) of the origin.

    Draws the new radius from the mass-tilted kernel step law (the exact
    conditioned transition, see _ChainTables) by blending the quantile
    tables of the two remaining-time slabs bracketing step k, then the
    angle from a von Mises (concentration a*s, the Gaussian part) or
    uniform (the K part, which carries no angular dependence) mixture.
    """
    a_s = np.hypot(pos[:, 0], pos[:, 1]) / tables.sqdt
    la = np.clip(np.log(np.maximum(a_s, _TINY)),
                 tables.log_a_grid[0], tables.log_a_grid[-1])
    u = rng.random(pos.shape[0])
    lo, hi, lam = tables.slab_blend(k)
    new_s = _bilinear(tables.log_a_grid, tables.u_grid,
                      tables.tilt_quantiles[lo], la, u)
    if lam > 0.0:
        s_hi = _bilinear(tables.log_a_grid, tables.u_grid,
                         tables.tilt_quantiles[hi], la, u)
        new_s = (1.0 - lam) * new_s + lam * s_hi
    pi_g = _bilinear(tables.log_a_grid, _SGRID, tables.gauss_prob, la, new_s)
    from_gauss = rng.random(pos.shape[0]) < pi_g
    dphi = np.where(from_gauss,
                    rng.vonmises(0.0, np.maximum(a_s * new_s, 1e-12)),
                    rng.uniform(-np.pi, np.pi, pos.shape[0]))
    ang = np.arctan2(pos[:, 1], pos[:, 0]) + dphi
    rho = new_s * tables.sqdt
    return np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=1)


def _occupation_flush(idx, p0, dx, eps_ladder, bridge_sig, dt, sqdt, occ):
    """Accumulate bridge-averaged ball occupations for buffered steps.

    Rows arrive in step order, so each path's occ slot receives its
    contributions in the same order a per-step accumulation would use.
    Rows whose whole bridge stays 4 sqrt(dt) outside a rung contribute an
    exact zero there and are skipped for that rung.
    """
    mid = p0[:, None, :] + _BR_S[None, :, None] * dx[:, None, :]
    m_s = np.hypot(mid[..., 0], mid[..., 1])
    m_min = m_s.min(axis=1)
    for j, eps in enumerate(eps_ladder):
        rows = m_min < eps + 4.0 * sqdt
        if np.any(rows):
            vals = dt * np.sum(
                _BR_W * _disc_probability(m_s[rows], bridge_sig, eps), axis=-1)
            occ[:, j] += np.bincount(idx[rows], weights=vals, minlength=occ.shape[0])


def _doob_chunk(args):
    (chunk_idx, size, seed, x0, dt, n_steps, eps_ladder, tables) = args
    rng = np.random.default_rng([seed, 7, chunk_idx])
    pos = np.tile(np.asarray(x0, dtype=float), (size, 1))
    logw = np.zeros(size)
    occ = np.zeros((size, len(eps_ladder)))
    min_rad = np.full(size, np.hypot(x0[0], x0[1]))
    near_cut = _NEAR_FACTOR * tables.sqdt
    two_pi_dt = 2.0 * np.pi * dt
    # Steps whose nearer endpoint sits beyond the largest ladder radius by
    # more than 4 sqrt(dt) cannot reach the ball (bridge tail < e^{-32}).
    occ_cut = max(eps_ladder) + 4.0 * tables.sqdt if eps_ladder else -1.0
    bridge_sig = np.sqrt(dt * _BR_S * (1.0 - _BR_S))
    buf_idx, buf_p0, buf_dx, buf_rows = [], [], [], 0
    for k in range(n_steps):
        r = np.hypot(pos[:, 0], pos[:, 1])
        near = r <= near_cut
        new_pos = np.empty_like(pos)
        # The chunk draws in a fixed order (far block, then near block) so
        # the stream layout depends only on the path states, not on how
        # the blocks are interleaved.
        far = ~near
        if np.any(far):
            p = pos[far]
            rf = np.maximum(r[far], _TINY)
            drift = tables.dlog_at(k + 1, rf)
            mean = p + (drift * dt / rf)[:, None] * p
            y = mean + tables.sqdt * rng.standard_normal((p.shape[0], 2))
            ry = np.maximum(np.hypot(y[:, 0], y[:, 1]), _TINY)
            d2_step = np.sum((y - p) ** 2, axis=1)
            d2_prop = np.sum((y - mean) ** 2, axis=1)
            # K_dt between radii above 8 sqrt(dt) is below e^{-32} of the
            # Gaussian part and is dropped from the step density.
            log_d = (tables.log_mass_at(k + 1, ry) - tables.log_mass_at(k, rf)
                     - d2_step / (2.0 * dt) - np.log(two_pi_dt))
            log_q = -d2_prop / (2.0 * dt) - np.log(two_pi_dt)
            logw[far] += log_d - log_q
            new_pos[far] = y
        if np.any(near):
            new_pos[near] = _near_step(tables, k, pos[near], rng)
        r_new = np.hypot(new_pos[:, 0], new_pos[:, 1])
        reach = np.minimum(r, r_new) < occ_cut
        if np.any(reach):
            buf_idx.append(np.nonzero(reach)[0])
            buf_p0.append(pos[reach])
            buf_dx.append(new_pos[reach] - pos[reach])
            buf_rows += buf_idx[-1].size
        if buf_rows and (k % 256 == 255 or k == n_steps - 1 or buf_rows > 200_000):
            _occupation_flush(np.concatenate(buf_idx), np.vstack(buf_p0),
                              np.vstack(buf_dx), eps_ladder, bridge_sig,
                              dt, tables.sqdt, occ)
            buf_idx.clear()
            buf_p0.clear()
            buf_dx.clear()
            buf_rows = 0
        np.minimum(min_rad, r_new, out=min_rad)
        pos = new_pos
    return pos, logw, occ, min_rad


def chain_grid_spec(theta, dt) -> tuple:
    """(t, theta, radii spec) of the kernel table the chain sampler needs.

    In step units the near-origin density involves K_1 at disorder
    theta + ln dt; the radius range must cover the tabulated step sizes
    (up to 18) with headroom, and no more: widening the log-spaced grid
    inflates the spline error at the large-radius corner, where the
    Gaussian decay bends ln K hardest.  Exposed so callers can build or
    cache the grid themselves and pass it in.
    """
    return 1.0, float(as_disorder(theta).theta + np.log(float(dt))), (1e-4, 20.0, 288)


def sample_doob_paths(T, theta, x0, dt, n_paths, seed, eps_ladder=(0.05, 0.02, 0.01),
                      chunk_size=4096, map_fn=map, kernel_grid=None) -> DoobEnsemble:
    """Sample the normalized polymer by its exact transition chain.

    Far steps use a drift-tilted Gaussian proposal with the density ratio
    accumulated into log-weights, which therefore stay within O(dt) of
    zero; near-origin steps (within 8 sqrt(dt)) sample the mass-tilted
    angular-integrated step density by inverse CDF with no weight, since
    there the K part of the kernel is comparable to the Gaussian part and
    a local Gaussian proposal would degenerate while an untilted one
    spreads the weights enough to gut the effective sample size downstream.
    eps-ball occupations for the whole ladder
    are accumulated on the fly as within-step Brownian-bridge expectations
    (see the module docstring), so memory stays O(n_paths) and the local
    times carry no step-resolution bias.  kernel_grid optionally supplies
    the chain_grid_spec table (a cached copy, say).
    """
    T, dt, n_steps = _check_grid(T, dt)
    x0 = np.asarray(x0, dtype=float)
    if np.hypot(x0[0], x0[1]) == 0.0:
        raise SingularityError("the polymer start must be away from the origin")
    eps_ladder = tuple(float(e) for e in eps_ladder)
    if any(not 0.0 < e < 1.0 for e in eps_ladder):
        raise DomainError(f"ladder radii must lie in (0, 1), got {eps_ladder}")
    r_max = float(np.hypot(x0[0], x0[1])) + 10.0 * np.sqrt(T) + 2.0
    tables = _ChainTables(T, theta, dt, n_steps, r_max, kernel_grid=kernel_grid)
    chunks = []
    lo = 0
    while lo < n_paths:
        size = min(chunk_size, int(n_paths) - lo)
        chunks.append((len(chunks), size, int(seed), x0, dt, n_steps, eps_ladder, tables))
        lo += size
    parts = list(map_fn(_doob_chunk, chunks))
    return DoobEnsemble(
        T=T, theta=tables.th, start=x0, dt=dt, seed=int(seed), eps_ladder=eps_ladder,
        end_points=np.concatenate([p[0] for p in parts], axis=0),
        log_weights=np.concatenate([p[1] for p in parts]),
        local_times=np.concatenate([p[2] for p in parts], axis=0)
        / (2.0 * np.asarray(eps_ladder) ** 2 * np.log(1.0 / np.asarray(eps_ladder)) ** 2),
        min_radius=np.concatenate([p[3] for p in parts]))


# ---------------------------------------------------------------------------
# change-of-disorder reweighting


@dataclass(frozen=True)
class RNCheckResult:
    epsilon: float
    lhs: float
    rhs: float
    rhs_std_error: float
    ess: float

    @property
    def ratio_gap(self) -> float:
        return abs(self.lhs / self.rhs - 1.0)


@dataclass(frozen=True)
class RNReweightReport:
    theta: float
    theta_prime: float
    T: float
    start: tuple
    n_paths: int
    results: tuple
    ess_threshold: float
    ess_flagged: bool

    def to_json(self) -> str:
        return json.dumps({
            "theta": self.theta, "theta_prime": self.theta_prime, "T": self.T,
            "start": list(self.start), "n_paths": self.n_paths,
            "ess_threshold": self.ess_threshold, "ess_flagged": self.ess_flagged,
            "results": [{
                "epsilon": r.epsilon, "lhs": r.lhs, "rhs": r.rhs,
                "rhs_std_error": r.rhs_std_error, "ess": r.ess,
                "ratio_gap": r.ratio_gap,
            } for r in self.results],
        }, indent=2)


def _terminal_pairing(T, theta, x0, test_fn) -> float:
    """<V^theta, h(X_T)> = int P_T(x0, y) h(|y|) dy by radial quadrature."""
    a = float(np.hypot(x0[0], x0[1]))
    rho, wr = radial_nodes(a + 10.0 * np.sqrt(T), n_outer_panels=60)
    gauss = np.exp(-(rho - a) ** 2 / (2.0 * T)) * i0e(a * rho / T) / T
    krow = 2.0 * np.pi * k_matrix(T, theta, [a], rho)[0]
    return float(np.sum(wr * rho * (gauss + krow) * test_fn(rho)))


def rn_reweight_check(ensemble: DoobEnsemble, theta_prime, test_fn=None,
                      ess_threshold=500.0, self_normalize=True) -> RNReweightReport:
    """Compare kernel-side and reweighted-sample values of a terminal observable.

    lhs = <V^{theta'}, h(X_T)> from the kernels module; rhs, per ladder rung,
    = m(T, theta, x0) E[h(X_T) exp((theta' - theta) L^eps)] over the chain
    ensemble (the mass total converts the normalized chain back to V).  The
    effective sample size of the combined weights is reported per rung and
    the report is flagged when any rung falls below ess_threshold.
    Agreement is a trend in eps, never a fixed tolerance: L^eps converges
    to L only in L^1.

    With self_normalize the rung estimate is the ratio form

        rhs = <V^theta, h> * mean(u exp(c L^eps)) / mean(u),   u = w h(X_T),

    whose leading factor is quadrature-exact.  The per-path factor u is the
    same in every rung and in both halves of the ratio, so its sampling noise
    and the time-step bias it carries cancel; what is left is the noise of the
    tilt factor itself, carried by the few paths that enter the eps-ball.
    Without the ratio that common noise (a few percent at 10^4 paths) swamps
    the rung-to-rung movement of the eps ladder.  Standard errors come from
    the delta method in the ratio case.
    """
    th = ensemble.theta.theta
    th_p = float(theta_prime)
    if abs(th_p - th) > 1.0:
        raise DomainError(f"|theta' - theta| must be <= 1, got {abs(th_p - th)}")
    if test_fn is None:
        def test_fn(rho):
            return np.exp(-np.asarray(rho) ** 2 / 0.18)
    lhs = _terminal_pairing(ensemble.T, th_p, ensemble.start, test_fn)
    a = float(np.hypot(ensemble.start[0], ensemble.start[1]))
    mass = float(_mass_or_one(ensemble.T, ensemble.theta, [a])[0])
    h_vals = test_fn(np.hypot(ensemble.end_points[:, 0], ensemble.end_points[:, 1]))
    base_w = np.exp(ensemble.log_weights)
    u = mass * base_w * h_vals
    u_ref = _terminal_pairing(ensemble.T, th, ensemble.start, test_fn)
    u_mean = float(np.mean(u))
    results = []
    flagged = False
    for j, eps in enumerate(ensemble.eps_ladder):
        tilt = np.exp((th_p - th) * ensemble.local_times[:, j])
        w = base_w * tilt
        ess = float(np.sum(w) ** 2 / np.sum(w * w))
        vals = u * tilt
        if self_normalize:
            ratio = float(np.mean(vals)) / u_mean
            rhs = u_ref * ratio
            delta = vals - ratio * u
            se = float(u_ref / u_mean * np.std(delta, ddof=1) / np.sqrt(delta.size))
        else:
            rhs = float(np.mean(vals))
            se = float(np.std(vals, ddof=1) / np.sqrt(vals.size))
        flagged = flagged or ess < ess_threshold
        results.append(RNCheckResult(epsilon=float(eps), lhs=lhs, rhs=rhs,
                                     rhs_std_error=se, ess=ess))
    return RNReweightReport(theta=th, theta_prime=th_p, T=ensemble.T,
                            start=(float(ensemble.start[0]), float(ensemble.start[1])),
                            n_paths=ensemble.n_paths, results=tuple(results),
                            ess_threshold=float(ess_threshold), ess_flagged=flagged)


# ---------------------------------------------------------------------------
# finite-dimensional polymer densities


def finite_dim_v_density(partition: Partition, T, theta, x) -> MomentDensity:
    """Pushforward density of the polymer measure V^{T,theta}_x at partition times.

    For 0 = t_0 < ... < t_m <= T and points (x, y_1, ..., y_m),

        f = prod_i P_{t_i - t_{i-1}}(y_{i-1}, y_i) * m(T - t_m, y_m),

    so marginalizing the last point through the mass semigroup telescopes to
    total mass m(T, x), and interior points marginalize by the P semigroup.
    """
    T = float(T)
    x = np.asarray(x, dtype=float)
    if np.hypot(x[0], x[1]) == 0.0:
        raise SingularityError("the polymer density needs x away from the origin")
    if partition.times[0] != 0.0:
        raise DomainError(f"the partition must start at 0, got {partition.times[0]}")
    if partition.times[-1] > T + 1e-12:
        raise DomainError(f"partition reaches {partition.times[-1]} past T = {T}")
    th = as_disorder(theta)
    gaps = partition.gaps
    tail = T - partition.times[-1]

    def fn(pts):
        if pts.shape[-2:] != (len(gaps) + 1, 2):
            raise DomainError(
                f"expected points of shape (..., {len(gaps) + 1}, 2), got {pts.shape}")
        if not np.allclose(pts[..., 0, :], x, rtol=0, atol=1e-12):
            raise DomainError("row 0 of the points must equal the start x")
        out = np.ones(pts.shape[:-2])
        for i, tau in enumerate(gaps):
            p0 = pts[..., i, :]
            p1 = pts[..., i + 1, :]
            sq = np.sum((p1 - p0) ** 2, axis=-1)
            r0 = np.maximum(np.hypot(p0[..., 0], p0[..., 1]), 1e-12)
            r1 = np.maximum(np.hypot(p1[..., 0], p1[..., 1]), 1e-12)
            kv = k_pointwise(tau, th, r0.ravel(), r1.ravel()).reshape(sq.shape)
            out = out * (np.exp(-sq / (2.0 * tau)) / (2.0 * np.pi * tau) + kv)
        rm = np.maximum(np.hypot(pts[..., -1, 0], pts[..., -1, 1]), 1e-12)
        out = out * _mass_or_one(tail, th, rm.ravel()).reshape(rm.shape)
        return out

    return MomentDensity(partition=partition, theta=th, kind="V_P", fn=fn)
