"""Variance and semigroup kernel tests: identities, asymptotics, tabulation."""

import numpy as np
import pytest

from oracles import central_difference
from shflab import (CacheVersionError, DomainError, DisorderParam, KernelGrid,
                    SingularityError, as_disorder, build_kernel_grid, doob_density,
                    doob_radial, drift, drift_radial, gauss_heat, k_kernel,
                    k_matrix, k_pointwise, kernel_upper_envelope, p_convolve,
                    p_kernel, total_mass, total_mass_radial)
from shflab._quad import radial_nodes

GAMMA_EM = 0.5772156649015329


def probe_set(seed, n):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.2, 2.0, n)
    th = rng.uniform(-1.0, 1.0, n)
    x = rng.uniform(-2.0, 2.0, (n, 2))
    y = rng.uniform(-2.0, 2.0, (n, 2))
    keep = (np.hypot(x[:, 0], x[:, 1]) > 0.05) & (np.hypot(y[:, 0], y[:, 1]) > 0.05)
    return t[keep], th[keep], x[keep], y[keep]


def test_swap_symmetry():
    t, th, x, y = probe_set(11, 10)
    for i in range(len(t)):
        a = k_kernel(t[i], th[i], x[i], y[i])
        b = k_kernel(t[i], th[i], y[i], x[i])
        assert a == pytest.approx(b, rel=1e-9)


def test_scaling_relation():
    # lam K_{lam t}(sqrt(lam) x, sqrt(lam) y) = K_t at disorder theta + ln lam
    t, th, x, y = 0.6, 0.2, np.array([0.5, -0.3]), np.array([1.1, 0.4])
    for lam in (0.25, 0.5, 2.0, 4.0, 10.0):
        lhs = lam * k_kernel(lam * t, th, np.sqrt(lam) * x, np.sqrt(lam) * y)
        rhs = k_kernel(t, th + np.log(lam), x, y)
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_log_divergence_at_origin():
    # K(1, 0, (delta, 0), (1, 0)) ~ c ln(1/delta) + d: increments over
    # delta = 2^-k approach the constant c ln 2
    vals = [k_kernel(1.0, 0.0, (2.0 ** -k, 0.0), (1.0, 0.0)) for k in range(6, 12)]
    incs = np.diff(vals)
    assert np.all(incs > 0)
    assert np.all(np.abs(incs[1:] / incs[:-1] - 1.0) < 0.1)


def test_strong_negative_disorder_suppression():
    # the kernel carries theta only through e^theta inside nu', whose small
    # argument regime 1/(a ln^2(1/a)) turns e^theta nu'(w e^theta) into
    # ~ 1/(w (|theta| + ln(1/w))^2): suppression is ~ 1/|theta|, not e^theta
    x, y = (0.7, 0.0), (1.0, 0.2)
    k0 = k_kernel(1.0, 0.0, x, y)
    k30 = k_kernel(1.0, -30.0, x, y)
    k60 = k_kernel(1.0, -60.0, x, y)
    assert k30 < 0.05 * k0
    assert 0.4 < k60 / k30 < 0.65
    # p approaches the Gaussian at the 1/|theta| rate as well
    g = gauss_heat(1.0, np.array(x) - np.array(y))
    gap = p_kernel(1.0, -30.0, x, y) / g - 1.0
    assert 5e-3 < gap < 5e-2


def test_p_is_gauss_plus_k():
    t, th, x, y = probe_set(12, 6)
    for i in range(len(t)):
        s = gauss_heat(t[i], x[i] - y[i]) + k_kernel(t[i], th[i], x[i], y[i])
        assert p_kernel(t[i], th[i], x[i], y[i]) == pytest.approx(s, rel=1e-12)


def test_p_monotone_in_theta():
    x, y = (0.4, 0.1), (0.8, -0.2)
    vals = [p_kernel(0.7, th, x, y) for th in (-1.0, 0.0, 1.0)]
    assert vals[0] < vals[1] < vals[2]


def test_semigroup_probes():
    # three-probe version of the 50-probe acceptance criterion
    rng = np.random.default_rng(21)
    done = 0
    while done < 3:
        s, t = rng.uniform(0.1, 1.0, 2)
        x, z = rng.uniform(-2.0, 2.0, (2, 2))
        if min(np.hypot(*x), np.hypot(*z)) < 0.1:
            continue
        conv = p_convolve(s, t, 0.0, x, z, n_outer_panels=12)
        direct = p_kernel(s + t, 0.0, x, z)
        assert conv == pytest.approx(direct, rel=1e-3)
        done += 1


def test_k_pointwise_matches_scalar():
    ra = np.array([0.3, 0.9, 1.4])
    rb = np.array([0.2, 1.1, 0.6])
    vec = k_pointwise(0.8, 0.1, ra, rb)
    for i in range(3):
        assert vec[i] == pytest.approx(
            k_kernel(0.8, 0.1, (ra[i], 0.0), (rb[i], 0.0)), rel=1e-12)


def test_envelope_closed_forms():
    # at |x|^2 = |y|^2 = t the log+ terms vanish and the envelope is
    # e^{-1} / (t (1 + log+(1/t)))
    t = 2.0
    r = np.sqrt(t)
    env = kernel_upper_envelope(t, 0.0, (r, 0.0), (0.0, r))
    assert env == pytest.approx(np.exp(-1.0) / t, rel=1e-12)
    vals = [kernel_upper_envelope(1.0, 0.0, (a, 0.0), (0.5, 0.0))
            for a in (0.3, 0.6, 1.2)]
    assert vals[0] > vals[1] > vals[2]


def test_envelope_dominates_kernel():
    # the constant is per (t, theta); both K and the envelope are radial, so
    # fit the max ratio on a log-spaced radius grid and verify on the
    # geometric midpoints, where the smooth ratio can only move a little
    for (t, th) in ((0.9, 0.4), (0.5, -0.6)):
        radii = np.geomspace(0.01, 3.0, 24)
        mids = np.sqrt(radii[:-1] * radii[1:])

        def max_ratio(rs):
            kv = k_matrix(t, th, rs, rs)
            env = np.array([[kernel_upper_envelope(t, th, (a, 0.0), (b, 0.0))
                             for b in rs] for a in rs])
            return np.max(kv / env)

        fitted = max_ratio(radii)
        assert max_ratio(mids) <= 1.10 * fitted


def test_total_mass_far_field():
    assert total_mass(1.0, 0.0, (50.0, 0.0)) == pytest.approx(1.0, abs=1e-10)


def test_total_mass_log_divergence():
    ratios = [(total_mass(1.0, 0.0, (2.0 ** -k, 0.0)) - 1.0) / (k * np.log(2.0))
              for k in (4, 6, 8, 10, 12, 14)]
    assert all(r > 0 for r in ratios)
    difs = np.abs(np.diff(ratios))
    assert np.all(np.diff(difs) < 0)  # converging, not wandering
    assert difs[-1] < 0.05 * ratios[-1]


def test_total_mass_is_integral_of_p():
    # independent route: int p dy = 1 + 2 pi int K(|x|, rho) rho drho,
    # whereas total_mass integrates nu' over the time simplex directly
    t, th, r = 0.7, 0.3, 0.6
    nodes, weights = radial_nodes(r + 10.0 * np.sqrt(t))
    kv = k_pointwise(t, th, np.full(nodes.size, r), nodes)
    integral = 1.0 + 2.0 * np.pi * np.sum(weights * nodes * kv)
    assert integral == pytest.approx(total_mass(t, th, (r, 0.0)), rel=1e-4)


def test_total_mass_monotonicities():
    base = total_mass(1.0, 0.0, (0.6, 0.0))
    assert base > 1.0
    assert total_mass(1.0, -0.5, (0.6, 0.0)) < base < total_mass(1.0, 0.5, (0.6, 0.0))
    assert total_mass(0.5, 0.0, (0.6, 0.0)) < base < total_mass(2.0, 0.0, (0.6, 0.0))
    assert total_mass(1.0, 0.0, (1.2, 0.0)) < base < total_mass(1.0, 0.0, (0.3, 0.0))


def test_drift_direction():
    y = np.array([0.3, 0.4])
    b = drift(1.0, 0.0, y)
    scale = b[0] / y[0]
    assert scale < 0
    assert b[1] == pytest.approx(scale * y[1], rel=1e-12)


def test_drift_blowup_product():
    prods = []
    for r in (1e-2, 1e-3, 1e-4, 1e-5):
        b = drift_radial(1.0, 0.0, r).magnitude
        prods.append(b * r * np.log(1.0 / r))
    assert 0.85 < prods[2] < 1.15  # |y| = 1e-4
    gaps = np.abs(np.array(prods) - 1.0)
    assert np.all(np.diff(gaps) < 0)


def test_drift_first_order_correction():
    # (|b| |y| L - 1) L with L = ln(1/|y|) approaches (theta - ln 2)/2 + gamma;
    # the wide tolerance covers the slow 1/L approach
    r = 1e-5
    L = np.log(1.0 / r)
    for th in (0.0, 1.0):
        target = 0.5 * (th - np.log(2.0)) + GAMMA_EM
        got = (drift_radial(1.0, th, r).magnitude * r * L - 1.0) * L
        assert abs(got - target) < 0.5 * abs(target)


def test_drift_matches_log_mass_gradient():
    for r in (0.1, 0.5, 1.0):
        fd = central_difference(
            lambda u: np.log(total_mass(1.0, 0.3, (u, 0.0))), r, 1e-3 * r)
        assert drift_radial(1.0, 0.3, r).magnitude == pytest.approx(-fd, rel=1e-4)


def test_doob_normalization():
    nodes, weights = radial_nodes(1.0 + 10.0)
    dens = doob_radial(1.0, 0.0, 0.0, 0.5, 1.0, nodes)
    assert np.sum(weights * nodes * dens) == pytest.approx(1.0, abs=1e-3)


def test_doob_gaussian_limit():
    # strong negative disorder recovers the Gaussian at the 1/|theta| rate
    x, y = (1.0, 0.0), (0.6, 0.4)
    g = gauss_heat(0.5, np.array(x) - np.array(y))
    gap30 = abs(doob_density(1.0, -30.0, 0.0, 0.5, x, y) / g - 1.0)
    gap60 = abs(doob_density(1.0, -60.0, 0.0, 0.5, x, y) / g - 1.0)
    assert 1e-3 < gap30 < 1e-2
    assert 0.35 < gap60 / gap30 < 0.7


def test_doob_chapman_kolmogorov():
    # the mass tilts telescope, so the two-step integral reduces to the
    # P-semigroup convolution times the outer mass ratio
    T, th, s, u, t = 1.0, 0.2, 0.0, 0.3, 0.5
    x, z = (1.0, 0.0), (0.4, 0.5)
    ratio = total_mass(T - t, th, z) / total_mass(T - s, th, x)
    lhs = ratio * p_convolve(u - s, t - u, th, x, z, n_outer_panels=12)
    assert lhs == pytest.approx(doob_density(T, th, s, t, x, z), rel=1e-3)


@pytest.fixture(scope="module")
def small_grid():
    return build_kernel_grid(0.5, 0.3, radii=(1e-3, 2.0, 96))


def test_grid_midpoint_probes(small_grid):
    mids = np.sqrt(small_grid.radii[:-1] * small_grid.radii[1:])
    rng = np.random.default_rng(2)
    ii = rng.integers(0, mids.size, 200)
    jj = rng.integers(0, mids.size, 200)
    exact = k_pointwise(0.5, 0.3, mids[ii], mids[jj])
    err = np.max(np.abs(small_grid.evaluate(mids[ii], mids[jj]) - exact) / exact)
    assert err <= small_grid.interp_tolerance


def test_grid_symmetry_and_monotonicity(small_grid):
    assert np.array_equal(small_grid.values, small_grid.values.T)
    assert np.all(np.diff(small_grid.values, axis=0) < 0)
    assert np.all(np.diff(small_grid.values, axis=1) < 0)


def test_grid_refinement(small_grid):
    coarse = build_kernel_grid(0.5, 0.3, radii=(1e-3, 2.0, 48))
    rng = np.random.default_rng(5)
    lo, hi = np.log(1e-3) + 0.2, np.log(2.0) - 0.2
    pa = np.exp(rng.uniform(lo, hi, 150))
    pb = np.exp(rng.uniform(lo, hi, 150))
    exact = k_pointwise(0.5, 0.3, pa, pb)
    e_coarse = np.max(np.abs(coarse.evaluate(pa, pb) - exact) / exact)
    e_fine = np.max(np.abs(small_grid.evaluate(pa, pb) - exact) / exact)
    assert e_coarse >= 4.0 * e_fine


def test_grid_extensions(small_grid):
    # below r_min the extension is linear in ln(1/r), matching the log
    # divergence; above r_max only the sign and decay are promised
    below = 2.5e-4
    for rb in (0.5, below):
        gv = small_grid.evaluate(below, rb)
        ex = float(k_pointwise(0.5, 0.3, [below], [rb])[0])
        assert gv == pytest.approx(ex, rel=1e-2)
    above = float(small_grid.evaluate(2.6, 0.5))
    farther = float(small_grid.evaluate(3.2, 0.5))
    assert 0.0 < farther < above


def test_grid_save_load_round_trip(small_grid, tmp_path):
    path = tmp_path / "grid.npz"
    small_grid.save(path)
    loaded = KernelGrid.load(path)
    assert loaded.t == small_grid.t
    assert loaded.theta.theta == small_grid.theta.theta
    probes = np.array([0.01, 0.3, 1.5])
    assert np.array_equal(loaded.evaluate(probes, probes),
                          small_grid.evaluate(probes, probes))


def test_grid_rejects_corruption(small_grid, tmp_path):
    path = tmp_path / "grid.npz"
    small_grid.save(path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheVersionError):
        KernelGrid.load(path)


def test_grid_rejects_format_version_change(small_grid, tmp_path):
    import json
    path = tmp_path / "grid.npz"
    small_grid.save(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    meta["format_version"] = 999
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(CacheVersionError):
        KernelGrid.load(path)


def test_grid_export_csv(small_grid, tmp_path):
    out = tmp_path / "grid.csv"
    small_grid.export_csv(out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "radius_x,radius_y,K_value"
    assert len(lines) == 1 + small_grid.radii.size ** 2


def test_disorder_param_caches_exponential():
    d = as_disorder(0.7)
    assert isinstance(d, DisorderParam)
    assert d.exp_theta == pytest.approx(np.exp(0.7), rel=1e-15)
    assert as_disorder(d) is d


def test_domain_errors():
    with pytest.raises(DomainError):
        k_kernel(0.0, 0.0, (1.0, 0.0), (1.0, 0.0))
    with pytest.raises(DomainError):
        k_kernel(-1.0, 0.0, (1.0, 0.0), (1.0, 0.0))
    with pytest.raises(SingularityError):
        total_mass(1.0, 0.0, (0.0, 0.0))
    with pytest.raises(SingularityError):
        drift(1.0, 0.0, (0.0, 0.0))
    with pytest.raises(DomainError):
        doob_density(1.0, 0.0, 0.5, 0.5, (1.0, 0.0), (1.0, 0.0))
    with pytest.raises(DomainError):
        doob_density(1.0, 0.0, 0.0, 1.5, (1.0, 0.0), (1.0, 0.0))
    with pytest.raises(DomainError):
        build_kernel_grid(1.0, 0.0, radii=(0.5, 0.1, 16))
    with pytest.raises(DomainError):
        build_kernel_grid(1.0, 0.0, radii=np.array([0.1, 0.05, 0.2]))
