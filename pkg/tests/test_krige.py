import time

import numpy as np
import pytest

from gevfusion import krige, lmc
from gevfusion.data import distance_matrix
from gevfusion.marginal import GevParams, return_level, return_level_gradient

from oracles import dense_krige, random_instance


def _loc(site, dlat=0.0, dlon=0.0, pid="x"):
    return krige.Location(site.lat + dlat, site.lon + dlon, pid)


def test_far_point_returns_prior(rng):
    st, w, dist, p = random_instance(6, rng)
    p = lmc.LmcParams(p.beta, p.a_lower, np.minimum(p.rho, 500.0))
    kr = krige.krige_point(p, st, w, krige.Location(-60.0, 100.0), dist)
    assert np.allclose(kr.theta, p.beta, atol=1e-12)
    assert np.allclose(kr.cov, p.A @ p.A.T, atol=1e-12)


def test_coincident_site_without_noise_reproduces_it(rng):
    st, _, dist, p = random_instance(4, rng)
    w = 1e-12 * np.eye(st.n_obs)
    site = st.sites[2]
    kr = krige.krige_point(p, st, w, _loc(site), dist)
    rows = st.rows_of_site(2)
    comps = st.p_index[rows]
    assert np.allclose(kr.theta[comps], st.values[rows], atol=1e-5)
    assert np.all(np.diag(kr.cov)[comps] < 1e-5)


def test_matches_dense_conditional(rng):
    for n in (3, 10):
        st, w, dist, p = random_instance(n, rng)
        loc = krige.Location(32.0, -85.0)
        kr = krige.krige_point(p, st, w, loc, dist)
        d0 = distance_matrix(st.sites, [loc])[:, 0]
        theta, cov = dense_krige(p, st, w, dist, d0)
        assert np.allclose(kr.theta, theta, atol=1e-10)
        assert np.allclose(kr.cov, cov, atol=1e-10)


def test_variance_not_above_prior_and_more_data_helps(rng):
    st, w, dist, p = random_instance(12, rng)
    loc = krige.Location(31.0, -84.0)
    full = krige.krige_point(p, st, w, loc, dist)
    sub, rows = st.subset(st.site_ids[:6])
    part = krige.krige_point(p, sub, w[np.ix_(rows, rows)], loc)
    prior = np.diag(p.A @ p.A.T)
    assert np.all(np.diag(full.cov) <= prior + 1e-12)
    assert np.all(np.diag(full.cov) <= np.diag(part.cov) + 1e-10)


def test_return_level_zero_covariance():
    kr = krige.KrigingResult(np.array([2.0, np.log(0.3), 0.1]), np.zeros((3, 3)))
    est = krige.return_level_from_kriging(kr, 100, n_draws=100, seed=0)
    assert est.rl == pytest.approx(return_level(GevParams(2.0, np.log(0.3), 0.1), 100))
    assert est.se_delta == 0.0 and est.se_mc == pytest.approx(0.0, abs=1e-12)


def test_return_level_small_covariance_delta_matches_mc():
    theta = np.array([2.0, np.log(0.3), 0.1])
    eps = 1e-3
    kr = krige.KrigingResult(theta, eps ** 2 * np.eye(3))
    est = krige.return_level_from_kriging(kr, 100, n_draws=20000, seed=1)
    g = return_level_gradient(GevParams(*theta), 100)
    assert est.se_delta == pytest.approx(eps * np.linalg.norm(g), rel=1e-10)
    assert est.se_mc == pytest.approx(est.se_delta, rel=0.03)


def test_return_level_uses_leading_block_and_increases_with_T(rng):
    st, w, dist, p = random_instance(5, rng)
    kr = krige.krige_point(p, st, w, krige.Location(31.0, -84.0), dist)
    a = krige.return_level_from_kriging(kr, 50, 500, seed=2)
    b = krige.return_level_from_kriging(kr, 500, 500, seed=2)
    assert b.rl > a.rl


def test_mc_standard_error_converges():
    kr = krige.KrigingResult(np.array([2.0, np.log(0.3), 0.1]), np.diag([0.01, 0.004, 0.002]))
    spread = []
    for n in (200, 20000):
        vals = [krige.return_level_from_kriging(kr, 100, n, seed=s).se_mc for s in range(8)]
        spread.append(np.std(vals))
    assert spread[1] < spread[0] / 3


def test_negative_variance_is_an_error():
    from gevfusion.exceptions import ConvergenceError
    with pytest.raises(ConvergenceError):
        krige._clean_cov(np.diag([1.0, -1e-3]))
    out = krige._clean_cov(np.diag([1.0, -1e-12]))
    assert out[1, 1] == 0.0


def test_grid_order_does_not_matter(rng):
    st, w, dist, p = random_instance(6, rng)
    grid = [krige.Location(30 + 0.5 * i, -86 + 0.3 * i, f"g{i}") for i in range(7)]
    a = krige.krige_grid(p, st, w, grid, T=(100,), n_draws=300, seed=4, dist=dist, chunk=3)
    perm = rng.permutation(7)
    b = krige.krige_grid(p, st, w, [grid[k] for k in perm], T=(100,), n_draws=300, seed=4, dist=dist)
    by_id = {r["point_id"]: r for r in b}
    for r in a:
        q = by_id[r["point_id"]]
        assert r["rl_100"] == q["rl_100"] and r["se_mc_100"] == q["se_mc_100"]
        assert np.allclose(r["theta"], q["theta"], atol=1e-13)


def test_grid_matches_point_and_is_fast(rng):
    st, w, dist, p = random_instance(129, rng, spread=(15.0, 25.0))
    grid = [krige.Location(rng.uniform(28, 43), rng.uniform(-90, -65), f"p{i}") for i in range(500)]
    t0 = time.perf_counter()
    rows = krige.krige_grid(p, st, w, grid, T=(100,), n_draws=1000, seed=0, dist=dist)
    assert time.perf_counter() - t0 < 10.0
    for k in (0, 123, 499):
        kr = krige.krige_point(p, st, w, grid[k], dist)
        assert np.allclose(rows[k]["theta"], kr.theta, atol=1e-10)


def test_grid_jobs_independent(rng):
    st, w, dist, p = random_instance(5, rng)
    grid = [krige.Location(30 + 0.2 * i, -85.0, f"g{i}") for i in range(6)]
    a = krige.krige_grid(p, st, w, grid, n_draws=200, seed=1, dist=dist, chunk=2)
    b = krige.krige_grid(p, st, w, grid, n_draws=200, seed=1, dist=dist, chunk=2, jobs=2)
    assert [r["rl_100"] for r in a] == [r["rl_100"] for r in b]


def test_empty_grid():
    with pytest.raises(ValueError):
        krige.krige_grid(None, None, None, [])
