"""Volterra function tests against the independent Romberg oracle."""

import numpy as np
import pytest

from oracles import central_difference, nu_oracle
from shflab import (A_MAX, CONSTANTS, DomainError, gauss_heat, volterra_eval,
                    volterra_nu, volterra_nu_prime)

# frozen from oracles.nu_oracle (raw-variable Romberg, math.lgamma, 1e-14)
NU_ONE = 2.2665345076998484
NU_PRIME_ONE = 2.8077702420285195


def test_frozen_oracle_values():
    assert volterra_nu(1.0) == pytest.approx(NU_ONE, rel=1e-12)
    assert volterra_nu_prime(1.0) == pytest.approx(NU_PRIME_ONE, rel=1e-12)


def test_oracle_sweep_small():
    # the full 60-point criterion sweep lives in the acceptance suite; this
    # covers the three quadrature regimes at module-test cost
    for a in (1e-6, 5e-3, 0.02, 0.7, 3.0, 120.0, 650.0):
        assert volterra_nu(a) == pytest.approx(nu_oracle(a), rel=1e-9)
        assert volterra_nu_prime(a) == pytest.approx(nu_oracle(a, True), rel=1e-9)


def test_tiny_argument_bounds():
    v = volterra_nu(1e-8)
    assert 0.0 < v < 0.1


def test_exponential_regime():
    assert 0.9 < volterra_nu(30.0) / np.exp(30.0) < 1.1


def test_small_argument_laplace_scale():
    a = 1e-6
    prod = a * np.log(1.0 / a) ** 2 * volterra_nu_prime(a)
    assert 0.8 < prod < 1.2


def test_prime_is_derivative():
    for a in (0.3, 1.0, 5.0):
        fd = central_difference(volterra_nu, a, 1e-3 * a)
        assert volterra_nu_prime(a) == pytest.approx(fd, rel=1e-6)


def test_nu_strictly_increasing():
    grid = np.geomspace(1e-6, A_MAX, 100)
    vals = np.array([volterra_nu(a) for a in grid])
    assert np.all(np.diff(vals) > 0)
    assert np.all(vals > 0)


def test_nu_prime_dips_then_increases():
    # nu' is NOT monotone: it has an interior minimum near a = 0.217
    # (nu'(a) ~ 1/(a ln^2(1/a)) diverges as a -> 0, then grows like e^a).
    assert volterra_nu_prime(0.05) > volterra_nu_prime(0.217) < volterra_nu_prime(0.8)
    grid = np.geomspace(0.3, A_MAX, 60)
    vals = np.array([volterra_nu_prime(a) for a in grid])
    assert np.all(np.diff(vals) > 0)
    assert np.all(vals > 0)


def test_domain_errors():
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(DomainError):
            volterra_nu(bad)
        with pytest.raises(DomainError):
            volterra_nu_prime(bad)
    # past A_MAX the value would exceed double precision: a distinct error
    for big in (A_MAX * 1.01, np.inf):
        with pytest.raises(OverflowError):
            volterra_nu(big)
    # the boundary itself is representable
    assert np.isfinite(volterra_nu(A_MAX))


def test_error_estimate_is_conservative():
    for a in (1e-6, 0.005, 0.3, 1.0, 40.0):
        for prime in (False, True):
            ev = volterra_eval(a, prime=prime)
            true_rel = abs(ev.value / nu_oracle(a, prime) - 1.0)
            assert true_rel <= 10.0 * ev.rel_error_estimate + 1e-13
            assert ev.rel_error_estimate < 1e-10


def test_euler_mascheroni():
    assert CONSTANTS.euler_mascheroni == pytest.approx(0.5772156649015329, abs=1e-15)


def test_gauss_heat_values():
    assert gauss_heat(1.0, (0.0, 0.0)) == pytest.approx(1.0 / (2.0 * np.pi), rel=1e-14)
    assert gauss_heat(2.0, (2.0, 0.0)) == pytest.approx(
        np.exp(-1.0) / (4.0 * np.pi), rel=1e-14)


def test_gauss_heat_normalized():
    xs = np.linspace(-8.0, 8.0, 401)
    h = xs[1] - xs[0]
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx, yy], axis=-1)
    total = np.sum(gauss_heat(1.0, pts)) * h * h
    assert total == pytest.approx(1.0, abs=1e-8)


def test_gauss_heat_semigroup():
    # int g_s(x - y) g_t(y - z) dy = g_{s+t}(x - z), on a grid
    s, t = 0.3, 0.5
    x = np.array([0.4, -0.2])
    z = np.array([-0.3, 0.6])
    ys = np.linspace(-7.0, 7.0, 561)
    h = ys[1] - ys[0]
    yy1, yy2 = np.meshgrid(ys, ys)
    grid = np.stack([yy1, yy2], axis=-1)
    conv = np.sum(gauss_heat(s, x - grid) * gauss_heat(t, grid - z)) * h * h
    assert conv == pytest.approx(gauss_heat(s + t, x - z), rel=1e-8)


def test_gauss_heat_four_dimensions():
    x = np.zeros(4)
    assert gauss_heat(1.0, x, n=4) == pytest.approx((2.0 * np.pi) ** -2, rel=1e-14)
    with pytest.raises(DomainError):
        gauss_heat(-1.0, (0.0, 0.0))
    with pytest.raises(DomainError):
        gauss_heat(1.0, np.zeros(3), n=3)
