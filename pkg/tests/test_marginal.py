import math

import numpy as np
import pytest
from scipy import stats

from gevfusion import marginal as M
from gevfusion.data import AnnualMaximaSeries
from gevfusion.exceptions import DataError
from oracles import central_diff

EXP_M1 = math.exp(-1.0)


def P(mu=0.0, sigma=1.0, xi=0.0, **kw):
    return M.GevParams(mu, math.log(sigma), xi, **kw)


def test_cdf_examples():
    assert M.gev_cdf(0.0, P(xi=1.0)) == pytest.approx(EXP_M1, abs=1e-15)
    assert M.gev_cdf(2.5, P(mu=2.5, sigma=3.0, xi=0.0)) == pytest.approx(EXP_M1, abs=1e-15)
    p = P(mu=1.0, sigma=2.0, xi=0.5)
    assert M.gev_cdf(1.0 - 2.0 / 0.5 - 1e-9, p) == 0.0
    assert M.gev_cdf(10.0, P(xi=-0.5)) == 1.0


def test_cdf_matches_scipy():
    # scipy's genextreme uses c = -xi
    y = np.linspace(-1, 6, 15)
    for xi in (-0.3, 0.2, 0.5):
        p = P(0.3, 1.4, xi)
        ref = stats.genextreme.cdf(y, -xi, loc=0.3, scale=1.4)
        assert np.allclose(M.gev_cdf(y, p), ref, atol=1e-13)


def test_logpdf_examples():
    assert M.gev_logpdf(0.0, P()) == pytest.approx(-1.0, abs=1e-15)
    assert M.gev_logpdf(-2.5, P(xi=0.5)) == -np.inf
    p = P(xi=0.2)
    h = 1e-5
    fd = (M.gev_cdf(1 + h, p) - M.gev_cdf(1 - h, p)) / (2 * h)
    assert math.exp(M.gev_logpdf(1.0, p)) == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("xi", [-0.3, 0.0, 1e-6, 0.2, 0.5])
def test_pdf_is_derivative_of_cdf(xi):
    p = P(0.5, 0.8, xi)
    ys = np.linspace(0.0, 3.0, 13)
    h = 1e-6
    fd = (M.gev_cdf(ys + h, p) - M.gev_cdf(ys - h, p)) / (2 * h)
    assert np.allclose(np.exp(M.gev_logpdf(ys, p)), fd, atol=1e-6)


def test_trend_location():
    p = M.GevParams(1.0, 0.0, 0.1, mu1=0.01, t_ref=2000.0)
    assert M.gev_cdf(1.2, p, 2020) == pytest.approx(M.gev_cdf(1.0, M.GevParams(1.0, 0.0, 0.1)))
    with pytest.raises(ValueError):
        M.GevParams(1.0, 0.0, 0.1).location(2020)


def test_return_level_examples():
    assert M.return_level(P(), 100) == pytest.approx(4.60015, abs=5e-6)
    assert M.return_level(P(xi=1.0), 100) == pytest.approx(1 / -math.log(0.99) - 1, rel=1e-13)
    # 1 / (-log 0.99) - 1 = 98.49916...
    assert M.return_level(P(xi=1.0), 100) == pytest.approx(98.49916, abs=1e-5)
    sigma = 0.7
    assert M.return_level(P(mu=5.0, sigma=sigma), 2) == pytest.approx(5 - sigma * math.log(math.log(2)),
                                                                        rel=1e-14)
    with pytest.raises(ValueError):
        M.return_level(P(), 1.0)


@pytest.mark.parametrize("xi", [-0.3, 0.0, 0.2, 0.5])
@pytest.mark.parametrize("T", [2, 10, 100, 1000])
def test_cdf_of_return_level(xi, T):
    p = P(1.0, 0.5, xi)
    assert M.gev_cdf(M.return_level(p, T), p) == pytest.approx(1 - 1 / T, abs=1e-10)


def test_return_level_increasing_in_T():
    for xi in (-0.4, -1e-9, 0.0, 0.3):
        r = [M.return_level(P(1.0, 0.4, xi), T) for T in (1.5, 2, 10, 50, 100, 1000)]
        assert np.all(np.diff(r) > 0)


def _fd_rl(p, T, h=1e-5):
    f = lambda x: M.return_level(M.GevParams(*x), T)
    return central_diff(f, p.triplet, h)


def test_return_level_gradient_examples():
    p = P(0.0, 1.0, 0.2)
    g = M.return_level_gradient(p, 100)
    assert g[0] == 1.0
    assert np.allclose(g, _fd_rl(p, 100), rtol=1e-6)
    p3 = P(3.0, 0.6, 0.15)
    assert M.return_level_gradient(p3, 50)[1] == pytest.approx(M.return_level(p3, 50) - 3.0, rel=1e-14)


@pytest.mark.parametrize("xi", [-0.2, -1e-3, -5e-5, -1e-7, 0.0, 3e-9, 2e-5, 1e-3, 0.2])
@pytest.mark.parametrize("T", [2, 100, 1000])
def test_return_level_gradient_across_gumbel_switch(xi, T):
    p = P(1.0, 0.5, xi)
    g = M.return_level_gradient(p, T)
    # finite differences must not straddle the branch point; the reference
    # for the xi slot comes from a smooth high-precision evaluation instead
    fd = _fd_rl(p, T)
    assert np.allclose(g[:2], fd[:2], rtol=1e-5, atol=1e-8)
    import mpmath

    mpmath.mp.dps = 40
    lg = mpmath.log(-mpmath.log(1 - mpmath.mpf(1) / T))

    def r(x):
        return -lg if x == 0 else mpmath.expm1(-x * lg) / x

    exact = float(0.5 * mpmath.diff(r, mpmath.mpf(xi))) if xi != 0 else float(0.5 * lg**2 / 2)
    assert g[2] == pytest.approx(exact, rel=1e-5)


def test_fit_gumbel_large_sample():
    rng = np.random.default_rng(11)
    y = rng.gumbel(0.0, 1.0, 10000)
    fit = M.fit_gev((np.arange(10000), y))
    assert fit.converged
    assert abs(fit.params.mu0) < 0.05
    assert abs(fit.params.sigma - 1) < 0.05
    assert abs(fit.params.xi) < 0.05


def test_fit_constant_series_rejected():
    with pytest.raises(DataError, match="degenerate sample"):
        M.fit_gev((np.arange(20), np.full(20, 1.3)))
    with pytest.raises(DataError):
        M.fit_gev((np.arange(5), np.arange(5.0)))


def test_fit_se_order_of_magnitude():
    ses = []
    p = P(1.0, 0.3, 0.2)
    for s in range(60):
        y = M.gev_sample(p, 43, np.random.default_rng(s))
        f = M.fit_gev((np.arange(43), y))
        assert f.converged
        ses.append(f.se["xi"])
    assert 0.08 < np.nanmedian(ses) < 0.3


def test_fit_recovers_matches_scipy_optimum():
    rng = np.random.default_rng(5)
    y = stats.genextreme.rvs(-0.15, loc=2.0, scale=0.4, size=300, random_state=rng)
    fit = M.fit_gev((np.arange(300), y))
    c, loc, scale = stats.genextreme.fit(y, -0.1, loc=2.0, scale=0.4)
    ours = -M.gev_nll(fit.params, np.arange(300), y)
    theirs = np.sum(stats.genextreme.logpdf(y, c, loc, scale))
    assert ours >= theirs - 1e-6


def test_fit_consistency_rate():
    p = P(1.0, 0.5, 0.1)
    ns = [50, 500, 5000]
    rmse = []
    for n in ns:
        err = []
        for s in range(40):
            y = M.gev_sample(p, n, np.random.default_rng(1000 * n + s))
            f = M.fit_gev((np.arange(n), y))
            err.append(f.params.triplet - p.triplet)
        rmse.append(np.sqrt(np.mean(np.square(err))))
    slope = np.polyfit(np.log(ns), np.log(rmse), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_nonstationary_fit_recovers_trend_and_nests_stationary():
    rng = np.random.default_rng(3)
    years = np.arange(1979, 2022)
    p = M.GevParams(1.0, math.log(0.2), 0.05, mu1=0.005, t_ref=2000.0)
    y = M.gev_sample(p, len(years), rng, years)
    fit = M.fit_gev((years, y), nonstationary=True)
    assert fit.converged and fit.nonstationary and fit.t_ref == 2000.0
    assert abs(fit.params.mu1 - 0.005) < 4 * fit.se["mu1"]
    stat = M.fit_gev((years, y))
    assert fit.nll <= stat.nll + 1e-9
    zero_slope = M.GevParams(stat.params.mu0, stat.params.log_sigma, stat.params.xi, mu1=0.0)
    assert M.gev_nll(zero_slope, years, y) == pytest.approx(stat.nll, abs=1e-6)


def test_fit_gradient_matches_fd():
    rng = np.random.default_rng(9)
    y = rng.gumbel(1.0, 0.3, 50)
    tc = np.linspace(-1, 1, 50)
    for ns, x in ((False, np.array([1.0, math.log(0.3), 0.15])),
                  (True, np.array([1.0, 0.05, math.log(0.3), -0.1]))):
        f, g = M._nll_and_grad(x, y, tc, ns)
        fd = central_diff(lambda z: M._nll_and_grad(z, y, tc, ns)[0], x, 1e-6)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-6)


def test_mann_kendall_examples():
    r = M.mann_kendall([1, 2, 3, 4, 5])
    assert r.s_stat == 10
    assert r.z == pytest.approx(9 / math.sqrt(50 / 3), rel=1e-12)
    assert r.z == pytest.approx(2.205, abs=5e-4)
    assert r.p_value == pytest.approx(0.0275, abs=5e-4)
    c = M.mann_kendall([2.0] * 8)
    assert c.s_stat == 0 and c.p_value == 1.0
    x = np.random.default_rng(1).normal(size=30)
    fwd, rev = M.mann_kendall(x), M.mann_kendall(x[::-1])
    assert rev.s_stat == -fwd.s_stat and rev.p_value == pytest.approx(fwd.p_value)
    assert np.sign(fwd.z) == np.sign(fwd.s_stat)
    with pytest.raises(ValueError):
        M.mann_kendall([1, 2])


def test_mann_kendall_tie_variance():
    x = [1, 1, 2, 3, 3, 3, 4]
    n = len(x)
    ties = 2 * 1 * 9 + 3 * 2 * 11
    var = (n * (n - 1) * (2 * n + 5) - ties) / 18
    s = sum(np.sign(x[j] - x[i]) for i in range(n) for j in range(i + 1, n))
    r = M.mann_kendall(x)
    assert r.s_stat == s
    assert r.z == pytest.approx((s - 1) / math.sqrt(var))


def test_sen_slope_examples():
    years = np.arange(1990, 2010)
    assert M.sen_slope(years, 2 * years + 7) == 2.0
    assert M.sen_slope([1, 2, 3], [0, 1, 0]) == 0.0
    with pytest.raises(ValueError):
        M.sen_slope([1], [1])


def test_sen_slope_simulation():
    years = np.arange(1979, 2022)
    slopes = []
    for s in range(200):
        y = 0.0046 * years + np.random.default_rng(s).normal(0, 0.05, len(years))
        slopes.append(M.sen_slope(years, y))
    slopes = np.array(slopes)
    se = slopes.std(ddof=1)
    assert abs(np.mean(slopes) - 0.0046) < 2 * se / math.sqrt(len(slopes)) * 3
    assert np.mean(np.abs(slopes - 0.0046) < 2 * se) > 0.9


def test_trend_test_attaches_slope():
    ser = AnnualMaximaSeries("a", np.arange(2000, 2010), np.arange(10) * 0.5)
    r = M.trend_test(ser)
    assert r.sen_slope == 0.5 and r.s_stat == 45


def test_ad_gof_guards_and_range():
    rng = np.random.default_rng(0)
    ser = AnnualMaximaSeries("a", np.arange(40), rng.gumbel(1, 0.3, 40))
    fit = M.fit_gev(ser)
    with pytest.raises(ValueError, match="n_boot must be positive"):
        M.ad_gof(ser, fit, n_boot=0)
    res = M.ad_gof(ser, fit, n_boot=30, seed=1)
    assert 0 < res.p_value <= 1
    assert res.n_boot_used + res.n_failed == 30
    assert M.ad_gof(ser, fit, n_boot=30, seed=1) == res


def test_ad_gof_power_against_displaced_normal():
    # the fit comes from GEV data; the tested sample sits far from its mass
    base = M.gev_sample(P(1.0, 0.3, 0.1), 200, np.random.default_rng(99))
    fit = M.fit_gev((np.arange(200), base))
    rejections = 0
    for s in range(10):
        y = np.random.default_rng(s).normal(3.0, 0.3, 200)
        ser = AnnualMaximaSeries("n", np.arange(200), y)
        rejections += M.ad_gof(ser, fit, n_boot=49, seed=s).p_value < 0.05
    assert rejections >= 9


@pytest.mark.slow
def test_ad_gof_size():
    p = P(1.0, 0.3, 0.1)
    rej = 0
    n_rep = 500
    for s in range(n_rep):
        y = M.gev_sample(p, 43, np.random.default_rng(s))
        ser = AnnualMaximaSeries("a", np.arange(43), y)
        fit = M.fit_gev(ser)
        # with 99 resamples p <= 0.05 has exact null probability 5/100
        rej += M.ad_gof(ser, fit, n_boot=99, seed=s).p_value <= 0.05
    assert 0.03 <= rej / n_rep <= 0.08
