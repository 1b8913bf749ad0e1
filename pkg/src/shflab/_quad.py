"""Gauss-Legendre panel quadrature helpers.

Everything numerical in this package reduces to fixed-panel composite
Gauss-Legendre rules.  Panels are chosen analytically per integrand (peak
location, singularity substitutions), so no adaptive machinery is needed and
every evaluation is deterministic and vectorizable.
"""

from __future__ import annotations

import numpy as np

_LEGGAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]."""
    if n not in _LEGGAUSS_CACHE:
        _LEGGAUSS_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _LEGGAUSS_CACHE[n]


def panel_nodes(edges, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes/weights over consecutive panels.

    edges is an increasing sequence of panel boundaries; each panel gets an
    n-point rule.  Returns concatenated (nodes, weights).
    """
    edges = np.asarray(edges, dtype=float)
    x0, w0 = leggauss(n)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x0[None, :]).ravel()
    weights = (half[:, None] * w0[None, :]).ravel()
    return nodes, weights


def radial_nodes(r_max: float, n_outer_panels: int = 40, n_gl: int = 20,
                 inner_edges=(1e-6, 1e-4, 0.01, 0.05, 0.1)) -> tuple[np.ndarray, np.ndarray]:
    """Radial quadrature nodes for integrals of the form int_0^rmax f(rho) rho drho.

    The inner geometric panels resolve integrands with a log(1/rho)
    divergence at the origin (the rho factor makes them integrable but slow
    to converge on uniform grids); the outer panels are uniform.
    """
    inner = [e for e in inner_edges if e < r_max]
    start = inner[-1] if inner else 0.0
    edges = list(inner) + list(np.linspace(max(start, 1e-6), r_max, n_outer_panels))
    edges = sorted(set(edges))
    return panel_nodes(edges, n_gl)
