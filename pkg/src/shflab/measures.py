"""Grid-discretized measure algebra and the moment densities U, Q, K.

Two kinds of objects live here.

GridMeasure is a measure on a product of R^2 slots, each slot carrying a
uniform square grid; weights hold absolute mass per cell.  The gluing
operations compose two measures through a Gaussian of variance sigma on a
shared slot: bullet integrates the glue coordinate out, circ keeps it, and
the density variant glues with no smoothing at all (the sigma -> 0 limit).
These are exact finite sums, used to test the algebraic identities of the
gluing calculus on small grids.

The moment densities are closures, not grids.  For a time partition
t_0 < ... < t_m,

    U(x_0 ... x_m)          = prod_j g_{dt_j}(x_j - x_{j-1}),
    Q(x_0, x_0' ... x_m, x_m') = prod_j g_{dt_j}(p_j - p_{j-1})
                                        P_{dt_j}(q_{j-1}, q_j),

where (p, q) = ((x + x') / sqrt 2, (x - x') / sqrt 2) is the orthogonal
rotation of the pair.  That rotation is the computational heart of the
module: a pairing of Q against centered Gaussian test functions splits
exactly into a closed-form chain in the p (sum) sector times a chain of
radially symmetric operators in the q (difference) sector.  Expanding each
kernel in angular Fourier modes, composition preserves the mode index and
radial end weights kill every mode but the zeroth, so the q-sector chain
collapses to products of small matrices over one radial grid:

    <chain, phi x phi> = (2 pi)^(M+1) (v0 . D) A0 D B0 D ... (v1 . D),

with D = diag(rho_i w_i), v_k(rho) = e^(-rho^2 / 2 sigma_k^2), and A0 the
zeroth angular mode of each kernel (a Bessel I_0 profile for the heat
kernel, K itself for the interaction part).  This is what makes the
Chapman-Kolmogorov second-moment defect computable in seconds: both sides
of the identity are such chains over one shared node set.

Restriction: the factorization needs phi(x) phi(x') to factor across the
rotated coordinates, which holds exactly for centered isotropic Gaussians.
All Gaussian-pairing entry points therefore take test functions as widths
sigma, not as callables.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import i0e

from ._quad import panel_nodes
from .errors import CacheVersionError, DomainError, GridMismatchError
from .kernels import (GRID_FORMAT_VERSION, DisorderParam, as_disorder,
                      k_matrix, k_pointwise)
from .special_functions import gauss_heat

_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# grid measures


@dataclass(frozen=True)
class SlotGrid:
    """Uniform cell-centered grid on [-half_width, half_width]^2 for one slot."""

    half_width: float
    n: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    @property
    def axis(self) -> np.ndarray:
        h = self.spacing
        return -self.half_width + h * (0.5 + np.arange(self.n))

    @property
    def points(self) -> np.ndarray:
        """Cell centers, flattened to shape (n^2, 2)."""
        ax = self.axis
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass
class GridMeasure:
    """Measure on (R^2)^arity; weights[i_0, ..., i_{k-1}] is mass per cell.

    Each axis of weights enumerates the flattened n^2 cells of one slot.
    density_flags marks slots that represent a Lebesgue density sampled at
    cell centers (weights still store density times cell area, so mass
    bookkeeping is uniform).
    """

    slots: tuple
    weights: np.ndarray
    density_flags: tuple = None

    def __post_init__(self):
        self.slots = tuple(self.slots)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.density_flags is None:
            self.density_flags = tuple(False for _ in self.slots)
        self.density_flags = tuple(self.density_flags)
        if self.weights.ndim != len(self.slots):
            raise DomainError(
                f"weights have {self.weights.ndim} axes for {len(self.slots)} slots")
        for k, slot in enumerate(self.slots):
            if self.weights.shape[k] != slot.n ** 2:
                raise DomainError(
                    f"slot {k} has {slot.n ** 2} cells but weights axis {k} "
                    f"has length {self.weights.shape[k]}")
        if np.any(self.weights < 0):
            raise DomainError("measure weights must be nonnegative")

    @property
    def arity(self) -> int:
        return len(self.slots)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    @classmethod
    def point_mass(cls, slots, points, mass: float = 1.0) -> "GridMeasure":
        """Unit mass in the cells nearest to the given per-slot points."""
        slots = tuple(slots)
        shape = tuple(s.n ** 2 for s in slots)
        weights = np.zeros(shape)
        idx = []
        for slot, pt in zip(slots, points):
            ax = slot.axis
            i = int(np.argmin(np.abs(ax - pt[0])))
            j = int(np.argmin(np.abs(ax - pt[1])))
            idx.append(i * slot.n + j)
        weights[tuple(idx)] = mass
        return cls(slots=slots, weights=weights)

    @classmethod
    def from_density(cls, slots, density: Callable, density_flags=None) -> "GridMeasure":
        """Sample a joint density at cell centers; weights = density * cell areas.

        density receives one (n^2, 2) point block per slot and must
        broadcast to the full product shape.
        """
        slots = tuple(slots)
        pts = [s.points for s in slots]
        vals = np.asarray(density(*pts), dtype=float)
        area = np.prod([s.cell_area for s in slots])
        if density_flags is None:
            density_flags = tuple(True for _ in slots)
        return cls(slots=slots, weights=vals * area, density_flags=density_flags)

    @property
    def window_radius(self) -> float:
        """Half-width of the narrowest slot window.

        Grids truncate R^2; identities are only meaningful when paired
        against test functions supported well inside this radius.
        """
        return min(s.half_width for s in self.slots)

    def pair(self, *test_fns) -> float:
        """Integrate a product of per-slot test functions against the measure.

        Each test function receives the (n^2, 2) cell centers of its slot.
        Weights are mass per cell so no area factor enters.
        """
        if len(test_fns) != self.arity:
            raise DomainError(f"{len(test_fns)} test functions for arity {self.arity}")
        out = self.weights
        for fn in reversed(test_fns):
            vals = np.asarray(fn(self.slots[out.ndim - 1].points), dtype=float)
            out = out @ vals
        return float(out)

    def export_csv(self, path) -> None:
        """One row per cell combination: slot coordinates then the weight.

        Rows follow row-major cell order; a leading comment line records the
        slot layout so import does not have to reconstruct grids from float
        coordinates.  Row count is the product of cell counts, so this is
        meant for small grids.
        """
        meta = ";".join(f"{s.half_width!r}:{s.n}:{int(f)}"
                        for s, f in zip(self.slots, self.density_flags))
        header = ",".join(f"slot{k}_x,slot{k}_y" for k in range(self.arity)) + ",weight"
        pts = [s.points for s in self.slots]
        idx = np.indices(self.weights.shape).reshape(self.arity, -1)
        flat = self.weights.ravel()
        with open(path, "w") as fh:
            fh.write(f"# slots {meta}\n")
            fh.write(header + "\n")
            for row in range(flat.size):
                coords = ",".join(
                    f"{float(pts[k][idx[k, row], 0])!r},{float(pts[k][idx[k, row], 1])!r}"
                    for k in range(self.arity))
                fh.write(f"{coords},{float(flat[row])!r}\n")

    @classmethod
    def import_csv(cls, path) -> "GridMeasure":
        """Rebuild a measure written by export_csv."""
        with open(path) as fh:
            meta_line = fh.readline()
        if not meta_line.startswith("# slots "):
            raise CacheVersionError(f"{path} lacks the slot layout line")
        slots, flags = [], []
        for part in meta_line[len("# slots "):].strip().split(";"):
            hw, n, flag = part.split(":")
            slots.append(SlotGrid(half_width=float(hw), n=int(n)))
            flags.append(bool(int(flag)))
        weights = np.genfromtxt(path, delimiter=",", skip_header=2, usecols=(-1,))
        shape = tuple(s.n ** 2 for s in slots)
        return cls(slots=tuple(slots), weights=np.reshape(weights, shape),
                   density_flags=tuple(flags))

    def save(self, path) -> None:
        """Binary save: .npz plus a .json sidecar with checksum and layout."""
        path = Path(path)
        np.savez_compressed(path,
                            weights=self.weights,
                            half_widths=np.array([s.half_width for s in self.slots]),
                            ns=np.array([s.n for s in self.slots]),
                            density_flags=np.array(self.density_flags, dtype=bool))
        npz_path = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
        digest = hashlib.sha256(npz_path.read_bytes()).hexdigest()
        sidecar = {"format_version": GRID_FORMAT_VERSION, "kind": "grid_measure",
                   "arity": self.arity, "sha256": digest}
        npz_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path) -> "GridMeasure":
        path = Path(path)
        npz_path = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
        sidecar_path = npz_path.with_suffix(".json")
        if not sidecar_path.exists():
            raise CacheVersionError(f"missing sidecar {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text())
        if sidecar.get("format_version") != GRID_FORMAT_VERSION:
            raise CacheVersionError(
                f"format version {sidecar.get('format_version')} != {GRID_FORMAT_VERSION}")
        digest = hashlib.sha256(npz_path.read_bytes()).hexdigest()
        if digest != sidecar.get("sha256"):
            raise CacheVersionError(f"checksum mismatch for {npz_path}")
        blob = np.load(npz_path)
        slots = tuple(SlotGrid(half_width=float(h), n=int(n))
                      for h, n in zip(blob["half_widths"], blob["ns"]))
        return cls(slots=slots, weights=blob["weights"],
                   density_flags=tuple(bool(f) for f in blob["density_flags"]))


def _check_glue(mu1: GridMeasure, mu2: GridMeasure) -> SlotGrid:
    if mu1.arity < 1 or mu2.arity < 1:
        raise DomainError("gluing needs at least one slot on each side")
    g1, g2 = mu1.slots[-1], mu2.slots[0]
    if g1 != g2:
        raise GridMismatchError(
            f"glue slots disagree: {g1} vs {g2}; regrid one operand first")
    return g1


def _glue_kernel(slot: SlotGrid, sigma: float) -> np.ndarray:
    pts = slot.points
    diff = pts[:, None, :] - pts[None, :, :]
    return gauss_heat(sigma, diff, n=2)


def bullet_sigma(mu1: GridMeasure, mu2: GridMeasure, sigma: float) -> GridMeasure:
    """Glue the last slot of mu1 to the first slot of mu2 through g_sigma.

    (mu1 . mu2)(dx, dx') = int int mu1(dx, da) g_sigma(a - b) mu2(db, dx'),
    as a double sum over glue cells.  Point masses at a and b therefore
    produce total mass g_sigma(a - b) with no extra area factor; grid
    measures sampled from densities carry their cell areas inside the
    weights already.
    """
    if not sigma > 0:
        raise DomainError(f"glue variance must be positive, got {sigma}")
    slot = _check_glue(mu1, mu2)
    G = _glue_kernel(slot, sigma)
    tmp = np.tensordot(mu1.weights, G, axes=([-1], [0]))
    out = np.tensordot(tmp, mu2.weights, axes=([-1], [0]))
    return GridMeasure(slots=mu1.slots[:-1] + mu2.slots[1:],
                       weights=out,
                       density_flags=mu1.density_flags[:-1] + mu2.density_flags[1:])


def circ_sigma(mu1: GridMeasure, mu2: GridMeasure, sigma: float) -> GridMeasure:
    """Like bullet_sigma but the glue coordinate survives as a slot.

    The result has arity k1 + k2 - 1; marginalizing the glue slot out
    reproduces bullet_sigma exactly (same summands, reassociated).
    """
    if not sigma > 0:
        raise DomainError(f"glue variance must be positive, got {sigma}")
    slot = _check_glue(mu1, mu2)
    G = _glue_kernel(slot, sigma)
    smeared = np.tensordot(G, mu2.weights, axes=([1], [0]))  # (a, x'...)
    w1 = mu1.weights
    out = (w1.reshape(w1.shape + (1,) * (smeared.ndim - 1))
           * smeared.reshape((1,) * (w1.ndim - 1) + smeared.shape))
    return GridMeasure(slots=mu1.slots + mu2.slots[1:],
                       weights=out,
                       density_flags=mu1.density_flags + mu2.density_flags[1:])


def bullet_density(mu1: GridMeasure, mu2: GridMeasure) -> GridMeasure:
    """Glue with no Gaussian smoothing; one side of the glue must be a density.

    Matches the sigma -> 0 limit of bullet_sigma: the Gaussian collapses to
    a delta and picks out the density side at the glue point, so the glue
    sum divides that side's per-cell mass by the glue cell area.  The sum
    itself is symmetric; only the flag check cares which side disintegrates.
    """
    slot = _check_glue(mu1, mu2)
    if not (mu2.density_flags[0] or mu1.density_flags[-1]):
        raise DomainError("bullet_density needs a density on one side of the glue")
    out = np.tensordot(mu1.weights, mu2.weights, axes=([-1], [0])) / slot.cell_area
    return GridMeasure(slots=mu1.slots[:-1] + mu2.slots[1:],
                       weights=out,
                       density_flags=mu1.density_flags[:-1] + mu2.density_flags[1:])


def blur_slot(mu: GridMeasure, sigma: float, end: str = "first") -> GridMeasure:
    """Smear one end slot through g_sigma, producing a density there.

    This is the one-sided half of the Gaussian glue: bullet_sigma(m1, m2, s)
    equals bullet_density(m1, blur_slot(m2, s)) and also
    bullet_density(blur_slot(m1, s, end="last"), m2), the reassociations of
    the same double sum.
    """
    if not sigma > 0:
        raise DomainError(f"glue variance must be positive, got {sigma}")
    if end not in ("first", "last"):
        raise DomainError(f"end must be 'first' or 'last', got {end!r}")
    k = 0 if end == "first" else mu.arity - 1
    slot = mu.slots[k]
    G = _glue_kernel(slot, sigma) * slot.cell_area
    if end == "first":
        weights = np.tensordot(G, mu.weights, axes=([1], [0]))
    else:
        weights = np.tensordot(mu.weights, G, axes=([-1], [0]))
    flags = list(mu.density_flags)
    flags[k] = True
    return GridMeasure(slots=mu.slots, weights=weights, density_flags=tuple(flags))


def project(mu: GridMeasure, kept_slots: Sequence[int]) -> GridMeasure:
    """Marginalize away every slot not listed; total mass is preserved."""
    kept = list(kept_slots)
    if kept != sorted(set(kept)) or any(k < 0 or k >= mu.arity for k in kept):
        raise DomainError(f"kept slots {kept} invalid for arity {mu.arity}")
    dropped = tuple(i for i in range(mu.arity) if i not in kept)
    weights = np.sum(mu.weights, axis=dropped) if dropped else mu.weights
    return GridMeasure(slots=tuple(mu.slots[i] for i in kept),
                       weights=weights,
                       density_flags=tuple(mu.density_flags[i] for i in kept))


# ---------------------------------------------------------------------------
# partitions and moment densities


@dataclass(frozen=True)
class Partition:
    """Strictly increasing times t_0 < t_1 < ... < t_m with m >= 1."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise DomainError("a partition needs at least two times")
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise DomainError(f"partition times must strictly increase: {times}")

    @property
    def m(self) -> int:
        return len(self.times) - 1

    @property
    def gaps(self) -> np.ndarray:
        t = np.asarray(self.times)
        return t[1:] - t[:-1]


@dataclass(frozen=True)
class MomentDensity:
    """Evaluation closure for a moment density over a partition.

    kind "U_P": fn takes points of shape (..., m+1, 2).
    kind "Q_P" / "K_P": fn takes pair points of shape (..., m+1, 4), each
    row the concatenation (x, x') of a pair at one partition time.
    kind "V_P": polymer finite-dimensional density, shape (..., m+1, 2)
    with row 0 pinned to the start point by the producing operation.
    """

    partition: Partition
    theta: Optional[DisorderParam]
    kind: str
    fn: Callable = field(compare=False)

    _KINDS = ("U_P", "Q_P", "K_P", "V_P")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise DomainError(f"unknown moment density kind {self.kind!r}")

    def __call__(self, points):
        return self.fn(np.asarray(points, dtype=float))


def u_density(partition: Partition) -> MomentDensity:
    """Product of heat kernels over the partition gaps."""
    gaps = partition.gaps

    def fn(pts):
        if pts.shape[-2:] != (len(gaps) + 1, 2):
            raise DomainError(
                f"expected points of shape (..., {len(gaps) + 1}, 2), got {pts.shape}")
        steps = pts[..., 1:, :] - pts[..., :-1, :]
        sq = np.sum(steps * steps, axis=-1)
        dens = np.exp(-sq / (2.0 * gaps)) / (2.0 * np.pi * gaps)
        return np.prod(dens, axis=-1)

    return MomentDensity(partition=partition, theta=None, kind="U_P", fn=fn)


def _pair_rotate(pts):
    """Split (..., m+1, 4) pair points into sum and difference coordinates."""
    x = pts[..., :2]
    xp = pts[..., 2:]
    return (x + xp) / _SQRT2, (x - xp) / _SQRT2


def q_density(partition: Partition, theta, centered: bool = False,
              kernel_grids: Optional[dict] = None) -> MomentDensity:
    """Second-moment density Q over the partition; K (centered) on request.

    Evaluates prod_j g_{dt_j}(p_j - p_{j-1}) P_{dt_j}(q_{j-1}, q_j) in the
    rotated pair coordinates.  With centered=True returns K_P = Q_P minus
    the product of the two marginal heat-kernel chains.  The interaction
    kernel is evaluated directly unless kernel_grids maps a gap duration to
    a prebuilt KernelGrid, in which case tabulated interpolation (with its
    logarithmic extension below the smallest tabulated radius) is used.
    """
    th = as_disorder(theta)
    gaps = partition.gaps

    def k_eval(dt, ra, rb):
        if kernel_grids is not None and dt in kernel_grids:
            return kernel_grids[dt].evaluate(ra, rb)
        return k_pointwise(dt, th, ra.ravel(), rb.ravel()).reshape(ra.shape)

    def fn_q(pts):
        if pts.shape[-2:] != (len(gaps) + 1, 4):
            raise DomainError(
                f"expected pair points of shape (..., {len(gaps) + 1}, 4), got {pts.shape}")
        p, q = _pair_rotate(pts)
        psteps = p[..., 1:, :] - p[..., :-1, :]
        g_sum = np.exp(-np.sum(psteps ** 2, axis=-1) / (2.0 * gaps)) / (2.0 * np.pi * gaps)
        qsteps = q[..., 1:, :] - q[..., :-1, :]
        g_diff = np.exp(-np.sum(qsteps ** 2, axis=-1) / (2.0 * gaps)) / (2.0 * np.pi * gaps)
        qr = np.sqrt(np.sum(q * q, axis=-1))
        kvals = np.stack([k_eval(dt, qr[..., j], qr[..., j + 1])
                          for j, dt in enumerate(gaps)], axis=-1)
        return np.prod(g_sum * (g_diff + kvals), axis=-1)

    def fn_centered(pts):
        q_val = fn_q(pts)
        uu = np.ones(q_val.shape)
        for leg in (pts[..., :2], pts[..., 2:]):
            steps = leg[..., 1:, :] - leg[..., :-1, :]
            sq = np.sum(steps * steps, axis=-1)
            uu = uu * np.prod(np.exp(-sq / (2.0 * gaps)) / (2.0 * np.pi * gaps), axis=-1)
        return q_val - uu

    if centered:
        return MomentDensity(partition=partition, theta=th, kind="K_P", fn=fn_centered)
    return MomentDensity(partition=partition, theta=th, kind="Q_P", fn=fn_q)


# ---------------------------------------------------------------------------
# radial chains for Gaussian pairings


def chain_nodes(r_max: float, n_gl: int = 16, n_outer: int = 26):
    """Radial nodes resolving both the log layer at 0 and diffusive bulk."""
    edges = [1e-7, 1e-5, 1e-3, 0.02] + list(np.linspace(0.06, r_max, n_outer))
    return panel_nodes(edges, n_gl)


def heat_mode0(tau: float, rho: np.ndarray) -> np.ndarray:
    """Zeroth angular Fourier mode of g_tau between circles of radius rho.

    (1/2 pi) int_0^{2 pi} g_tau(x - y) dphi with |x| = rho_i, |y| = rho_j
    equals e^(-(rho_i - rho_j)^2 / 2 tau) I_0e(rho_i rho_j / tau) / (2 pi tau).
    """
    d = rho[:, None] - rho[None, :]
    return np.exp(-d * d / (2.0 * tau)) * i0e(np.outer(rho, rho) / tau) / (2.0 * np.pi * tau)


def _chain_value(ops, sigma0, sigma1, rho, w) -> float:
    D = rho * w
    u = np.exp(-rho ** 2 / (2.0 * sigma0 ** 2)) * D
    for op in ops[:-1]:
        u = (u @ op) * D
    v1 = np.exp(-rho ** 2 / (2.0 * sigma1 ** 2)) * D
    return float((2.0 * np.pi) ** (len(ops) + 1) * ((u @ ops[-1]) @ v1))


def gaussian_u_pairing(total_time: float, sigma0: float, sigma1: float) -> float:
    """<U, phi x psi> for centered Gaussians, in closed form.

    int int e^(-|x|^2/2 s0^2) g_t(x - y) e^(-|y|^2/2 s1^2) dx dy
    = 2 pi s0^2 s1^2 / (s0^2 + s1^2 + t).
    """
    return 2.0 * np.pi * sigma0 ** 2 * sigma1 ** 2 / (sigma0 ** 2 + sigma1 ** 2 + total_time)


def _sector_ops(theta, durations, glue_sigma, rho):
    """Difference-sector operator list for a Q chain with optional glue."""
    ops = []
    for i, d in enumerate(durations):
        if i > 0 and glue_sigma is not None:
            ops.append(heat_mode0(glue_sigma, rho))
        # K carries no angular dependence, so its zeroth mode is K itself
        ops.append(heat_mode0(d, rho) + k_matrix(d, theta, rho, rho))
    return ops


def gaussian_q_pairing(theta, durations, sigma0: float, sigma1: float,
                       glue_sigma: Optional[float] = None,
                       r_max: Optional[float] = None) -> float:
    """<Q_{d_1} * ... * Q_{d_k}, phi x phi> for centered Gaussian phi.

    Consecutive Q factors are glued through g_{glue_sigma} when glue_sigma
    is given, and by the plain density composition otherwise.  The sum
    sector contributes the closed Gaussian form over the total elapsed
    time; the difference sector is the radial mode-0 chain.
    """
    th = as_disorder(theta)
    durations = [float(d) for d in durations]
    total = sum(durations) + (glue_sigma or 0.0) * (len(durations) - 1)
    if r_max is None:
        r_max = 4.5 * max(sigma0, sigma1) + 4.0 * np.sqrt(total)
    rho, w = chain_nodes(r_max)
    ops = _sector_ops(th, durations, glue_sigma, rho)
    return gaussian_u_pairing(total, sigma0, sigma1) * _chain_value(ops, sigma0, sigma1, rho, w)


def q_variance_form(theta, tau: float, sigma0: float, sigma1: float,
                    r_max: Optional[float] = None) -> float:
    """<K-moment of one interval, (phi x psi) squared> = G(tau) <K_tau chain>.

    The centered second moment K_P = Q_P - U x U reduces, for product
    Gaussian test functions, to the sum-sector Gaussian factor times the
    plain quadratic form of the 2d kernel K_tau in the difference sector.
    This is the variance target for the regularized SHE pairings.
    """
    th = as_disorder(theta)
    if r_max is None:
        r_max = 4.5 * max(sigma0, sigma1) + 4.0 * np.sqrt(tau)
    rho, w = chain_nodes(r_max)
    ops = [k_matrix(tau, th, rho, rho)]
    return gaussian_u_pairing(tau, sigma0, sigma1) * _chain_value(ops, sigma0, sigma1, rho, w)


def chapman_defect(r: float, s: float, t: float, u: float, theta,
                   test_fn_pair=(1.0, 1.0)) -> tuple:
    """Second-moment Chapman-Kolmogorov defect over r < s < t < u.

    Returns (lhs, rhs) with

        lhs = <Q_{u-r} - Q_{s-r} glued by g_{t-s} to Q_{u-t}, phi x phi>,
        rhs = <Q_{s-r} * K_{t-s} * Q_{u-t}, phi x phi>,

    both evaluated on one shared radial node set.  test_fn_pair gives the
    widths (sigma0, sigma1) of the centered Gaussian test functions at the
    initial and final pair slots; this family is required exactly because
    the rotated sector factorization underlies the computation.  The two
    numbers agree because P_{t-s} = g_{t-s} + K_{t-s} splits the middle of
    the semigroup chain.
    """
    r, s, t, u = float(r), float(s), float(t), float(u)
    if not (r < s < t < u):
        raise DomainError(f"need r < s < t < u, got {(r, s, t, u)}")
    th = as_disorder(theta)
    sigma0, sigma1 = test_fn_pair
    tau1, glue, tau2 = s - r, t - s, u - t
    total = u - r
    r_max = 4.5 * max(sigma0, sigma1) + 4.0 * np.sqrt(total)
    rho, w = chain_nodes(r_max)

    def P0(d):
        return heat_mode0(d, rho) + k_matrix(d, th, rho, rho)

    G = gaussian_u_pairing(total, sigma0, sigma1)
    p1, p2 = P0(tau1), P0(tau2)
    whole = _chain_value([P0(total)], sigma0, sigma1, rho, w)
    glued = _chain_value([p1, heat_mode0(glue, rho), p2], sigma0, sigma1, rho, w)
    k_mid = _chain_value([p1, k_matrix(glue, th, rho, rho), p2],
                         sigma0, sigma1, rho, w)
    return G * (whole - glued), G * k_mid
