"""Independent oracles the test suite trusts more than the package.

Everything here deliberately avoids the package's numerical routes:
integration is adaptive Simpson in the raw variable (the package uses
fixed Gauss-Legendre panels under a substitution), the gamma function
comes from math.lgamma (the package uses scipy), and Monte Carlo oracles
use their own generators.  Slow and dumb on purpose.
"""

from __future__ import annotations

import math

import numpy as np


_LGAMMA_UFUNC = np.frompyfunc(math.lgamma, 1, 1)


def lgamma_arr(x):
    """Elementwise math.lgamma (the package uses scipy's gammaln instead)."""
    return _LGAMMA_UFUNC(np.asarray(x, dtype=float)).astype(float)


def romberg(f, a, b, tol=1e-14, n0=64, max_doublings=16):
    """Trapezoid doubling with full Richardson extrapolation.

    f must accept arrays.  Nodes are reused across doublings, so the cost
    is one evaluation per final node.  Converges when the last two diagonal
    entries agree to tol relatively; raises if the budget runs out.
    """
    xs = np.linspace(a, b, n0 + 1)
    fx = f(xs)
    h = (b - a) / n0
    row = [h * (0.5 * (fx[0] + fx[-1]) + np.sum(fx[1:-1]))]
    for k in range(1, max_doublings + 1):
        mids = xs[:-1] + 0.5 * h
        fm = f(mids)
        trap = 0.5 * row[0] + 0.5 * h * np.sum(fm)
        new_row = [trap]
        for j, prev in enumerate(row):
            factor = 4.0 ** (j + 1)
            new_row.append((factor * new_row[j] - prev) / (factor - 1.0))
        if k >= 3 and abs(new_row[-1] - row[-1]) <= tol * (abs(new_row[-1]) + 1e-300):
            return new_row[-1]
        xs = np.sort(np.concatenate([xs, mids]))
        h *= 0.5
        row = new_row
    raise RuntimeError(f"romberg did not reach tol {tol} on [{a}, {b}]")


def nu_oracle(a: float, prime: bool = False) -> float:
    """nu(a) or nu'(a) by brute quadrature of the raw r integrand.

    The integrand a^r / Gamma(r+1) (times r/a for the derivative) is
    integrated in r itself, with math.lgamma and doubling-until-tolerance
    refinement, over [0, R] with R past 1e-16 of the peak: for a < 1 the
    integrand only decays, for large a it peaks at r ~ a with width
    ~ sqrt(a).  No substitution, unlike the package's small-argument route.
    """
    if a <= 0:
        raise ValueError(f"need a > 0, got {a}")
    la = math.log(a)

    if prime:
        def f(r):
            out = np.zeros_like(r)
            pos = r > 0.0
            out[pos] = r[pos] * np.exp((r[pos] - 1.0) * la - lgamma_arr(r[pos] + 1.0))
            return out
    else:
        def f(r):
            return np.exp(r * la - lgamma_arr(r + 1.0))

    if a < 1.0:
        # decay rate at least |ln a| once past r ~ 2; total decay also from
        # 1/Gamma.  46 / max(|ln a|, 1) + 40 is past 1e-16 of the peak.
        r_end = 46.0 / max(-la, 1.0) + 40.0
    else:
        r_end = a + 30.0 * math.sqrt(a) + 60.0
    # split at the peak so the refinement works on one-sided slopes
    r_peak = min(max(a, 1.0), r_end - 1.0)
    return (romberg(f, 0.0, r_peak) + romberg(f, r_peak, r_end))


def pair_interaction_mc(profile, extent: float, n: int, seed: int):
    """Monte Carlo value of int rho(x) rho(y) ln |x - y| dx dy on R^2 x R^2.

    profile(r) is the radial density (already normalized); points are drawn
    uniformly on [-extent, extent]^2 pairs and importance-corrected.
    Returns (estimate, standard error).
    """
    rng = np.random.default_rng(seed)
    box = (2.0 * extent) ** 2
    x = rng.uniform(-extent, extent, size=(n, 2))
    y = rng.uniform(-extent, extent, size=(n, 2))
    rx = np.hypot(x[:, 0], x[:, 1])
    ry = np.hypot(y[:, 0], y[:, 1])
    d = np.hypot(x[:, 0] - y[:, 0], x[:, 1] - y[:, 1])
    vals = profile(rx) * profile(ry) * np.where(d > 0, np.log(np.maximum(d, 1e-300)), 0.0)
    vals *= box * box
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n))


def gauss_pairing_quad(t: float, sigma0: float, sigma1: float, n: int = 400,
                       extent_sigmas: float = 9.0) -> float:
    """<g_t * phi1, phi0> for centered Gaussians by brute tensor quadrature.

    Works in the radial-angular representation of the convolution:
    int phi0(x) g_t(x - y) phi1(y) dx dy on R^2 x R^2 collapses to a double
    radial integral with a Bessel angular factor; here we stay dumber still
    and integrate the 2d Gaussian products on a tensor trapezoid grid over
    one plane after convolving phi1 with g_t in closed form per axis.
    """
    # g_t * phi1 for phi1 = exp(-|y|^2 / 2 s1^2) is itself Gaussian:
    # (s1^2 / (s1^2 + t)) * exp(-|x|^2 / 2 (s1^2 + t)) -- but using that
    # closed form would just re-derive the package formula.  Instead do the
    # convolution numerically on a grid in one radial variable.
    grid = np.linspace(-extent_sigmas * max(sigma0, sigma1, np.sqrt(t)),
                       extent_sigmas * max(sigma0, sigma1, np.sqrt(t)), n)
    h = grid[1] - grid[0]
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    phi1_grid = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma1 ** 2))
    # convolve with the heat kernel by FFT on the same grid
    kx = np.fft.fftfreq(n, d=h) * 2.0 * np.pi
    kkx, kky = np.meshgrid(kx, kx, indexing="ij")
    heat_hat = np.exp(-0.5 * t * (kkx ** 2 + kky ** 2))
    smoothed = np.real(np.fft.ifft2(np.fft.fft2(phi1_grid) * heat_hat))
    phi0_grid = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma0 ** 2))
    return float(np.sum(phi0_grid * smoothed) * h * h)


def central_difference(f, x, h):
    """Fourth-order central difference for d f / d x."""
    return (f(x - 2 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2 * h)) / (12.0 * h)
