"""Gluing algebra and moment-density tests on grid measures."""

import numpy as np
import pytest

from oracles import gauss_pairing_quad
from shflab import (CacheVersionError, DomainError, GridMeasure, GridMismatchError,
                    Partition, SlotGrid, blur_slot, build_kernel_grid, bullet_density,
                    bullet_sigma, chapman_defect, circ_sigma, gaussian_q_pairing,
                    gaussian_u_pairing, project, q_density, q_variance_form,
                    u_density)
from shflab._quad import radial_nodes

SQRT2 = np.sqrt(2.0)


def gauss_pair_density(tau):
    def fn(x, y):
        sq = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
        return np.exp(-sq / (2.0 * tau)) / (2.0 * np.pi * tau)
    return fn


def gauss_test(sigma):
    return lambda p: np.exp(-np.sum(p ** 2, axis=-1) / (2.0 * sigma ** 2))


def random_measure(rng, slots):
    shape = tuple(s.n ** 2 for s in slots)
    return GridMeasure(slots=slots, weights=rng.random(shape))


def test_point_mass_glue():
    # cell centers of SlotGrid(2, 8) sit on the kth center -1.75 + 0.5 k
    slot = SlotGrid(2.0, 8)
    a, b = np.array([-0.25, 0.25]), np.array([0.75, -0.75])
    mu1 = GridMeasure.point_mass((slot, slot), (np.array([1.25, 0.25]), a))
    mu2 = GridMeasure.point_mass((slot, slot), (b, np.array([-1.25, 0.75])))
    sigma = 0.3
    glued = bullet_sigma(mu1, mu2, sigma)
    want = np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma)) / (2.0 * np.pi * sigma)
    assert glued.total_mass == pytest.approx(want, rel=1e-12)


def test_u_glue_pairing_closed_form():
    # <U_a bullet_s U_b, phi x psi> = int phi g_{a+s+b} psi for Gaussian tests
    a, b, sigma = 0.15, 0.15, 0.1
    slots = (SlotGrid(2.6, 40), SlotGrid(2.6, 40))
    mu1 = GridMeasure.from_density(slots, gauss_pair_density(a))
    mu2 = GridMeasure.from_density(slots, gauss_pair_density(b))
    got = bullet_sigma(mu1, mu2, sigma).pair(gauss_test(0.5), gauss_test(0.5))
    assert got == pytest.approx(gaussian_u_pairing(a + sigma + b, 0.5, 0.5), rel=1e-3)


def test_u_density_glue_semigroup():
    a, b = 0.15, 0.15
    slots = (SlotGrid(2.6, 40), SlotGrid(2.6, 40))
    mu1 = GridMeasure.from_density(slots, gauss_pair_density(a))
    mu2 = GridMeasure.from_density(slots, gauss_pair_density(b))
    got = bullet_density(mu1, mu2).pair(gauss_test(0.5), gauss_test(0.5))
    assert got == pytest.approx(gaussian_u_pairing(a + b, 0.5, 0.5), rel=1e-4)


def test_blur_slot_reassociations():
    rng = np.random.default_rng(3)
    slot = SlotGrid(1.5, 5)
    mu1 = random_measure(rng, (slot, slot))
    mu2 = random_measure(rng, (slot, slot))
    direct = bullet_sigma(mu1, mu2, 0.4)
    via_first = bullet_density(mu1, blur_slot(mu2, 0.4))
    via_last = bullet_density(blur_slot(mu1, 0.4, end="last"), mu2)
    np.testing.assert_allclose(via_first.weights, direct.weights, rtol=1e-12)
    np.testing.assert_allclose(via_last.weights, direct.weights, rtol=1e-12)


def test_glue_associativity():
    rng = np.random.default_rng(4)
    slot = SlotGrid(1.0, 4)
    mus = [random_measure(rng, (slot, slot)) for _ in range(3)]
    left = bullet_sigma(bullet_sigma(mus[0], mus[1], 0.3), mus[2], 0.5)
    right = bullet_sigma(mus[0], bullet_sigma(mus[1], mus[2], 0.5), 0.3)
    np.testing.assert_allclose(left.weights, right.weights, rtol=1e-12)
    cleft = circ_sigma(circ_sigma(mus[0], mus[1], 0.3), mus[2], 0.5)
    cright = circ_sigma(mus[0], circ_sigma(mus[1], mus[2], 0.5), 0.3)
    assert cleft.arity == cright.arity == 4
    np.testing.assert_allclose(cleft.weights, cright.weights, rtol=1e-12)


def test_project_circ_is_bullet():
    rng = np.random.default_rng(5)
    slot = SlotGrid(1.0, 4)
    mu1 = random_measure(rng, (slot, slot))
    mu2 = random_measure(rng, (slot, slot))
    kept = project(circ_sigma(mu1, mu2, 0.25), [0, 2])
    want = bullet_sigma(mu1, mu2, 0.25)
    np.testing.assert_allclose(kept.weights, want.weights, rtol=1e-14)


def test_circ_arity_and_mass_bound():
    rng = np.random.default_rng(6)
    slot = SlotGrid(1.0, 4)
    mu1 = random_measure(rng, (slot, slot))
    mu2 = random_measure(rng, (slot, slot))
    sigma = 0.25
    out = circ_sigma(mu1, mu2, sigma)
    assert out.arity == 3
    bound = mu1.total_mass * mu2.total_mass / (2.0 * np.pi * sigma)
    assert out.total_mass <= bound * (1.0 + 1e-12)


def test_project_identity_and_mass():
    rng = np.random.default_rng(7)
    slot = SlotGrid(1.0, 4)
    mu = random_measure(rng, (slot, slot, slot))
    same = project(mu, [0, 1, 2])
    np.testing.assert_array_equal(same.weights, mu.weights)
    dropped = project(mu, [1])
    assert dropped.total_mass == pytest.approx(mu.total_mass, rel=1e-14)
    with pytest.raises(DomainError):
        project(mu, [2, 0])
    with pytest.raises(DomainError):
        project(mu, [0, 5])


def test_bullet_density_is_sigma_limit():
    slots = (SlotGrid(2.6, 40), SlotGrid(2.6, 40))
    mu1 = GridMeasure.from_density(slots, gauss_pair_density(0.2))
    mu2 = GridMeasure.from_density(slots, gauss_pair_density(0.2))
    phi = gauss_test(0.5)
    limit = bullet_density(mu1, mu2).pair(phi, phi)
    gaps = [abs(bullet_sigma(mu1, mu2, s).pair(phi, phi) - limit)
            for s in (0.1, 0.05, 0.01)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_gaussian_u_pairing_oracle():
    for (t, s0, s1) in ((0.3, 0.6, 0.6), (1.0, 0.5, 0.9), (0.05, 1.2, 0.4)):
        got = gaussian_u_pairing(t, s0, s1)
        assert got == pytest.approx(gauss_pairing_quad(t, s0, s1), rel=1e-6)


def test_q_chain_semigroup():
    for (a, b) in ((0.25, 0.25), (0.25, 0.5), (0.5, 0.5)):
        lhs = gaussian_q_pairing(0.3, [a, b], 0.6, 0.6)
        rhs = gaussian_q_pairing(0.3, [a + b], 0.6, 0.6)
        assert lhs == pytest.approx(rhs, rel=1e-3)


def test_u_density_reductions():
    part = Partition((0.0, 0.4))
    pts = np.array([[[0.2, -0.1], [0.5, 0.3]]])
    d = np.array([0.5, 0.3]) - np.array([0.2, -0.1])
    want = np.exp(-np.sum(d ** 2) / (2.0 * 0.4)) / (2.0 * np.pi * 0.4)
    assert u_density(part)(pts)[0] == pytest.approx(want, rel=1e-14)
    # translation invariance
    shift = np.array([1.3, -0.7])
    assert u_density(part)(pts + shift)[0] == pytest.approx(
        u_density(part)(pts)[0], rel=1e-12)
    # marginalizing the interior point of a 3-time partition: cell-center
    # sums of Gaussians are spectrally accurate, so a modest grid suffices
    part3 = Partition((0.0, 0.15, 0.4))
    slot = SlotGrid(3.0, 48)
    x0, x2 = np.array([0.2, -0.1]), np.array([0.5, 0.3])
    mids = slot.points
    triples = np.empty((mids.shape[0], 3, 2))
    triples[:, 0] = x0
    triples[:, 1] = mids
    triples[:, 2] = x2
    total = np.sum(u_density(part3)(triples)) * slot.cell_area
    assert total == pytest.approx(u_density(part)(pts)[0], rel=1e-8)


def test_q_density_single_interval_formula():
    part = Partition((0.0, 0.5))
    th = 0.2
    qd = q_density(part, th)
    rng = np.random.default_rng(9)
    from shflab import p_kernel
    for _ in range(4):
        x, xp, y, yp = rng.uniform(-1.0, 1.0, (4, 2))
        pts = np.array([[np.concatenate([x, xp]), np.concatenate([y, yp])]])
        gs = np.exp(-np.sum(((x + xp) / SQRT2 - (y + yp) / SQRT2) ** 2) / (2 * 0.5)) \
            / (2.0 * np.pi * 0.5)
        want = gs * p_kernel(0.5, th, (x - xp) / SQRT2, (y - yp) / SQRT2)
        assert qd(pts)[0] == pytest.approx(want, rel=1e-10)


def test_q_density_centered_identity():
    part = Partition((0.0, 0.3, 0.7))
    th = 0.4
    qd = q_density(part, th)
    kd = q_density(part, th, centered=True)
    ud = u_density(part)
    rng = np.random.default_rng(10)
    pts = rng.uniform(-1.0, 1.0, (5, 3, 4))
    want = qd(pts) - ud(pts[..., :2]) * ud(pts[..., 2:])
    np.testing.assert_allclose(kd(pts), want, rtol=1e-12)


def test_q_density_strong_negative_disorder():
    # K is suppressed like 1/|theta|, so Q approaches U x U at that rate
    part = Partition((0.0, 0.5))
    pts = np.array([[[0.4, 0.2, -0.3, 0.5], [0.1, -0.6, 0.7, 0.2]]])
    ud = u_density(part)
    uu = float(ud(pts[..., :2])[0] * ud(pts[..., 2:])[0])
    gap30 = abs(float(q_density(part, -30.0)(pts)[0]) / uu - 1.0)
    gap60 = abs(float(q_density(part, -60.0)(pts)[0]) / uu - 1.0)
    assert 5e-3 < gap30 < 1e-1
    assert 0.35 < gap60 / gap30 < 0.7


def test_q_density_projection_consistency():
    # integrate the interior pair out of the 3-time density; the rotation
    # (x,x') -> ((x+x')/sqrt2, (x-x')/sqrt2) is orthogonal so dx dx' = dp dq,
    # with a cartesian grid for the sum part and radial-angular nodes for
    # the difference part (kernel radii via the tabulated grid)
    th = 0.2
    kg = build_kernel_grid(0.25, th, radii=(1e-4, 6.0, 160))
    q3 = q_density(Partition((0.0, 0.25, 0.5)), th, kernel_grids={0.25: kg})
    q2 = q_density(Partition((0.0, 0.5)), th)
    end0 = np.array([0.4, 0.2, -0.3, 0.5])
    end1 = np.array([-0.2, 0.3, 0.6, -0.1])
    npg, hwp = 20, 3.2
    axp = -hwp + (2 * hwp / npg) * (0.5 + np.arange(npg))
    px, py = np.meshgrid(axp, axp, indexing="ij")
    p_nodes = np.column_stack([px.ravel(), py.ravel()])
    w_p = (2 * hwp / npg) ** 2
    rho, w_r = radial_nodes(4.5, n_outer_panels=16, n_gl=8)
    nang = 16
    phis = 2.0 * np.pi * np.arange(nang) / nang
    q_nodes = np.column_stack([np.outer(rho, np.cos(phis)).ravel(),
                               np.outer(rho, np.sin(phis)).ravel()])
    w_q = np.outer(w_r * rho, np.full(nang, 2.0 * np.pi / nang)).ravel()
    total = 0.0
    pts = np.empty((q_nodes.shape[0], 3, 4))
    pts[:, 0, :] = end0
    pts[:, 2, :] = end1
    for p1 in p_nodes:
        pts[:, 1, :2] = (p1[None, :] + q_nodes) / SQRT2
        pts[:, 1, 2:] = (p1[None, :] - q_nodes) / SQRT2
        total += w_p * np.sum(w_q * q3(pts))
    ref = float(q2(np.array([[end0, end1]]))[0])
    assert total == pytest.approx(ref, rel=1e-3)


def test_q_rotation_decomposition_mc():
    # Q pairing with product Gaussian tests equals the rotated U x V
    # factorization computed by the radial chain; the independent side is
    # importance-sampled in the unrotated coordinates
    th, t, s0, s1 = 0.3, 0.5, 0.6, 0.6
    rhs = gaussian_q_pairing(th, [t], s0, s1)
    kg = build_kernel_grid(t, th, radii=(1e-4, 8.0, 224))
    qd = q_density(Partition((0.0, t)), th, kernel_grids={t: kg})
    rng = np.random.default_rng(77)
    draws = []
    for _ in range(4):
        m = 100_000
        x = rng.normal(0.0, s0, (m, 2))
        xp = rng.normal(0.0, s0, (m, 2))
        y = x + rng.normal(0.0, np.sqrt(t), (m, 2))
        yp = xp + rng.normal(0.0, np.sqrt(t), (m, 2))
        pts = np.stack([np.concatenate([x, xp], axis=1),
                        np.concatenate([y, yp], axis=1)], axis=1)
        dens = (np.exp(-np.sum(x ** 2, -1) / (2 * s0 ** 2)) / (2 * np.pi * s0 ** 2)
                * np.exp(-np.sum(xp ** 2, -1) / (2 * s0 ** 2)) / (2 * np.pi * s0 ** 2)
                * np.exp(-np.sum((y - x) ** 2, -1) / (2 * t)) / (2 * np.pi * t)
                * np.exp(-np.sum((yp - xp) ** 2, -1) / (2 * t)) / (2 * np.pi * t))
        tests = (np.exp(-np.sum(x ** 2, -1) / (2 * s0 ** 2))
                 * np.exp(-np.sum(xp ** 2, -1) / (2 * s0 ** 2))
                 * np.exp(-np.sum(y ** 2, -1) / (2 * s1 ** 2))
                 * np.exp(-np.sum(yp ** 2, -1) / (2 * s1 ** 2)))
        draws.append(qd(pts) * tests / dens)
    w = np.concatenate(draws)
    est = w.mean()
    se = w.std(ddof=1) / np.sqrt(w.size)
    assert abs(est - rhs) < 3.0 * se
    assert se < 0.02 * rhs


def test_k_quadratic_form_nonnegative():
    for (th, tau, s) in ((0.0, 0.5, 0.6), (1.0, 0.25, 0.8), (-1.0, 1.0, 0.5)):
        assert q_variance_form(th, tau, s, s) > 0.0


def test_chapman_identity():
    lhs, rhs = chapman_defect(0.0, 0.3, 0.5, 1.0, 0.0, (1.0, 1.0))
    assert abs(lhs - rhs) / abs(rhs) <= 5e-2


def test_chapman_vanishing_defect():
    vals = [chapman_defect(0.0, 0.5, 0.5 + d, 1.0, 0.0, (1.0, 1.0))[1]
            for d in (0.2, 0.1, 0.05, 0.02)]
    assert all(v > 0 for v in vals)
    assert vals[0] > vals[1] > vals[2] > vals[3]


def test_chapman_strong_negative_disorder():
    _, r0 = chapman_defect(0.0, 0.3, 0.5, 1.0, 0.0, (1.0, 1.0))
    _, r30 = chapman_defect(0.0, 0.3, 0.5, 1.0, -30.0, (1.0, 1.0))
    _, r60 = chapman_defect(0.0, 0.3, 0.5, 1.0, -60.0, (1.0, 1.0))
    assert r30 < 0.05 * r0
    assert 0.4 < r60 / r30 < 0.65


def test_measure_csv_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    slot = SlotGrid(1.0, 3)
    mu = GridMeasure(slots=(slot, slot), weights=rng.random((9, 9)),
                     density_flags=(True, False))
    path = tmp_path / "mu.csv"
    mu.export_csv(path)
    back = GridMeasure.import_csv(path)
    assert back.slots == mu.slots
    assert back.density_flags == mu.density_flags
    np.testing.assert_allclose(back.weights, mu.weights, rtol=0, atol=0)


def test_measure_binary_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    slot = SlotGrid(1.0, 3)
    mu = random_measure(rng, (slot, slot))
    path = tmp_path / "mu.npz"
    mu.save(path)
    back = GridMeasure.load(path)
    np.testing.assert_array_equal(back.weights, mu.weights)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheVersionError):
        GridMeasure.load(path)


def test_glue_errors():
    rng = np.random.default_rng(14)
    slot = SlotGrid(1.0, 4)
    other = SlotGrid(1.5, 4)
    mu1 = random_measure(rng, (slot, slot))
    mu2 = random_measure(rng, (other, other))
    with pytest.raises(GridMismatchError):
        bullet_sigma(mu1, mu2, 0.3)
    mu2b = random_measure(rng, (slot, slot))
    with pytest.raises(DomainError):
        bullet_sigma(mu1, mu2b, 0.0)
    with pytest.raises(DomainError):
        bullet_density(mu1, mu2b)  # no density flag on either glue side
    with pytest.raises(DomainError):
        mu1.pair(gauss_test(1.0))
    with pytest.raises(DomainError):
        chapman_defect(0.0, 0.5, 0.4, 1.0, 0.0)


def test_partition_and_density_validation():
    with pytest.raises(DomainError):
        Partition((0.0,))
    with pytest.raises(DomainError):
        Partition((0.0, 0.5, 0.5))
    part = Partition((0.0, 0.5))
    with pytest.raises(DomainError):
        u_density(part)(np.zeros((2, 3, 2)))
    with pytest.raises(DomainError):
        q_density(part, 0.0)(np.zeros((2, 2, 2)))
