"""Per-site GEV distribution functions, maximum likelihood fitting and trend tests.

Shape convention: ``xi > 0`` is heavy tailed (Frechet type), ``xi < 0`` has a
finite upper endpoint. The Gumbel limit is used whenever ``|xi| < GUMBEL_EPS``.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, stats

from .exceptions import DataError

GUMBEL_EPS = 1e-8
XI_BOUNDS = (-0.5, 1.5)
# finite stand-in for +inf outside the support; L-BFGS-B aborts its line search on inf
_SUPPORT_PENALTY = 1e12
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class GevParams:
    mu0: float
    log_sigma: float
    xi: float
    mu1: float | None = None
    t_ref: float = 2000.0

    @property
    def sigma(self):
        return math.exp(self.log_sigma)

    def location(self, t=None):
        if t is None:
            return self.mu0
        if self.mu1 is None:
            raise ValueError("a year was given but the parameters carry no trend slope")
        return self.mu0 + self.mu1 * (np.asarray(t, dtype=float) - self.t_ref)

    @property
    def triplet(self):
        return np.array([self.mu0, self.log_sigma, self.xi])


@dataclass(frozen=True)
class GevFitResult:
    params: GevParams
    nll: float
    converged: bool
    n_used: int
    se: dict
    t_ref: float | None = None
    grad_norm: float = float("nan")

    @property
    def nonstationary(self):
        return self.params.mu1 is not None


@dataclass(frozen=True)
class TrendTestResult:
    s_stat: int
    z: float
    p_value: float
    sen_slope: float | None = None


@dataclass(frozen=True)
class AdTestResult:
    statistic: float
    p_value: float
    n_boot_used: int
    n_failed: int


# ---------------------------------------------------------------------------
# distribution functions

def gev_cdf(y, p, t=None):
    """GEV distribution function at ``y``; ``t`` selects the year for a trend fit."""
    mu = p.location(t)
    sigma, xi = p.sigma, p.xi
    z = (np.asarray(y, dtype=float) - mu) / sigma
    if abs(xi) < GUMBEL_EPS:
        out = np.exp(-np.exp(-z))
    else:
        xz = xi * z
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            inside = np.exp(-np.exp(-np.log1p(np.where(xz > -1, xz, 0.0)) / xi))
        out = np.where(xz > -1, inside, 0.0 if xi > 0 else 1.0)
    return out if np.ndim(out) else float(out)


def gev_logpdf(y, p, t=None):
    mu = p.location(t)
    sigma, xi = p.sigma, p.xi
    z = (np.asarray(y, dtype=float) - mu) / sigma
    if abs(xi) < GUMBEL_EPS:
        out = -p.log_sigma - z - np.exp(-z)
    else:
        xz = xi * z
        lt = np.log1p(np.where(xz > -1, xz, 0.0))
        with np.errstate(over="ignore"):
            inside = -p.log_sigma - (1.0 + 1.0 / xi) * lt - np.exp(-lt / xi)
        out = np.where(xz > -1, inside, -np.inf)
    return out if np.ndim(out) else float(out)


def gev_ppf(q, mu, sigma, xi):
    """Quantile function; vectorised over all arguments."""
    q = np.asarray(q, dtype=float)
    lg = np.log(-np.log(q))
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < GUMBEL_EPS
    safe_xi = np.where(small, 1.0, xi)
    return mu + sigma * np.where(small, -lg, np.expm1(-safe_xi * lg) / safe_xi)


def gev_sample(p, size, rng, t=None):
    """Draw annual maxima; with ``t`` the location follows the trend per year."""
    u = rng.uniform(size=size)
    return gev_ppf(u, p.location(t), p.sigma, p.xi)


def _log_yT(T):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 1):
        raise ValueError("return period T must exceed 1")
    return np.log(-np.log1p(-1.0 / T))


def return_level_array(mu, log_sigma, xi, T):
    """Vectorised return level; branch chosen per element."""
    lg = _log_yT(T)
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < GUMBEL_EPS
    safe_xi = np.where(small, 1.0, xi)
    return mu + np.exp(log_sigma) * np.where(small, -lg, np.expm1(-safe_xi * lg) / safe_xi)


def return_level(p, T):
    """T-year return level using the reference-year location ``mu0``."""
    return float(return_level_array(p.mu0, p.log_sigma, p.xi, T))


def return_level_gradient(p, T):
    """Gradient of the return level with respect to (mu, log sigma, xi)."""
    lg = float(_log_yT(T))
    sigma, xi = p.sigma, p.xi
    r = return_level(p, T)
    if abs(xi) < GUMBEL_EPS:
        d_xi = sigma * lg * lg / 2.0
    elif abs(xi) < 1e-4:
        # series in xi; the closed form cancels catastrophically here
        d_xi = sigma * (lg**2 / 2.0 - xi * lg**3 / 3.0 + xi**2 * lg**4 / 8.0)
    else:
        y_neg = math.exp(-xi * lg)
        d_xi = sigma / xi**2 * (1.0 - y_neg) - sigma / xi * y_neg * lg
    return np.array([1.0, r - p.mu0, d_xi])


# ---------------------------------------------------------------------------
# likelihood and fitting

def _nll_and_grad(x, y, tc, nonstationary):
    """Negative log-likelihood and gradient over packed (mu0[, mu1], log_sigma, xi)."""
    if nonstationary:
        mu0, mu1, log_sigma, xi = x
        mu = mu0 + mu1 * tc
    else:
        mu0, log_sigma, xi = x
        mu = mu0
    sigma = math.exp(log_sigma)
    z = (y - mu) / sigma
    n = len(y)
    if abs(xi) < 1e-6:
        ez = np.exp(-z)
        f = n * log_sigma + np.sum(z) + np.sum(ez)
        dmu = (ez - 1.0) / sigma
        dls = 1.0 + z * (ez - 1.0)
        dxi = z - z * z * (1.0 - ez) / 2.0
    else:
        t = 1.0 + xi * z
        if np.any(t <= 0):
            return _SUPPORT_PENALTY, np.zeros_like(x)
        lt = np.log(t)
        u = np.exp(-lt / xi)
        f = n * log_sigma + (1.0 + 1.0 / xi) * np.sum(lt) + np.sum(u)
        common = (u - 1.0 - xi) / t
        dmu = common / sigma
        dls = 1.0 + z * common
        dxi = (u - 1.0) * lt / xi**2 + z * (1.0 + (1.0 - u) / xi) / t
    if not np.isfinite(f) or f > _SUPPORT_PENALTY:
        return _SUPPORT_PENALTY, np.zeros_like(x)
    if nonstationary:
        g = np.array([dmu.sum(), (dmu * tc).sum(), dls.sum(), dxi.sum()])
    else:
        g = np.array([dmu.sum(), dls.sum(), dxi.sum()])
    return float(f), g


def gev_nll(params, years, values, nonstationary=None):
    """Negative log-likelihood of a series under ``params``."""
    ns = params.mu1 is not None if nonstationary is None else nonstationary
    tc = np.asarray(years, dtype=float) - params.t_ref
    if ns:
        x = np.array([params.mu0, params.mu1 or 0.0, params.log_sigma, params.xi])
    else:
        x = params.triplet
    return _nll_and_grad(x, np.asarray(values, dtype=float), tc, ns)[0]


def _initial_guess(y, tc, nonstationary):
    sd = np.std(y, ddof=1)
    sigma0 = sd * math.sqrt(6.0) / math.pi
    if nonstationary:
        slope = np.polyfit(tc, y, 1)[0] if np.ptp(tc) > 0 else 0.0
        detr = y - slope * tc
        sigma0 = max(np.std(detr, ddof=1), 1e-3 * sd) * math.sqrt(6.0) / math.pi
        return np.array([detr.mean() - EULER_GAMMA * sigma0, slope, math.log(sigma0), 0.1])
    return np.array([y.mean() - EULER_GAMMA * sigma0, math.log(sigma0), 0.1])


def _observed_information(x, y, tc, nonstationary):
    k = len(x)
    h = np.zeros((k, k))
    for i in range(k):
        step = 1e-5 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        gp = _nll_and_grad(xp, y, tc, nonstationary)[1]
        gm = _nll_and_grad(xm, y, tc, nonstationary)[1]
        h[:, i] = (gp - gm) / (2 * step)
    return 0.5 * (h + h.T)


def fit_gev(series, nonstationary=False, t_ref=2000.0, x0=None, gtol=1e-5, rng=None):
    """Maximum likelihood GEV fit, optionally with a linear trend in location.

    Parameters
    ----------
    series : AnnualMaximaSeries or tuple (years, values)
    nonstationary : bool
        Fit ``mu(t) = mu0 + mu1 (t - t_ref)``.
    x0 : array_like, optional
        Warm start in packed order (mu0[, mu1], log_sigma, xi).

    Returns
    -------
    GevFitResult
        ``converged`` is False when every restart fails; the best attempt is
        returned rather than raised.
    """
    if isinstance(series, tuple):
        years, values = series
    else:
        years, values = series.years, series.values
    y = np.asarray(values, dtype=float)
    years = np.asarray(years, dtype=float)
    if len(y) < 10:
        raise DataError(f"at least 10 annual maxima required, got {len(y)}")
    if np.ptp(y) == 0:
        raise DataError("degenerate sample: constant series")
    # the slope is optimised on a unit-spread time axis to keep coordinates comparable
    t_scale = max(1.0, float(np.std(years))) if nonstationary else 1.0
    tc = (years - t_ref) / t_scale
    bounds = [(None, None)] * (3 if not nonstationary else 4)
    bounds[-1] = XI_BOUNDS

    if x0 is None:
        start = _initial_guess(y, tc, nonstationary)
    else:
        start = np.asarray(x0, dtype=float).copy()
        if nonstationary:
            start[1] *= t_scale
    start[-1] = np.clip(start[-1], *XI_BOUNDS)
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for attempt in range(4):
        x_init = start.copy()
        if attempt > 0:
            # jittered restart around the moment-based start
            base = _initial_guess(y, tc, nonstationary)
            x_init = base + rng.normal(0.0, 1.0, base.size) * np.r_[
                0.1 * math.exp(base[-2]), [0.02 * math.exp(base[-2])] * nonstationary, 0.2, 0.1]
            x_init[-1] = np.clip(x_init[-1], -0.3, 0.5)
        if _nll_and_grad(x_init, y, tc, nonstationary)[0] >= _SUPPORT_PENALTY:
            x_init[-1] = 0.0
        res = optimize.minimize(
            _nll_and_grad, x_init, args=(y, tc, nonstationary), jac=True,
            method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 500, "gtol": gtol * 1e-2, "ftol": 1e-12},
        )
        f, g = _nll_and_grad(res.x, y, tc, nonstationary)
        pg = _projected_grad(res.x, g)
        ok = f < _SUPPORT_PENALTY and np.max(np.abs(pg)) < gtol * max(1.0, len(y) ** 0.5)
        if best is None or f < best[1]:
            best = (res.x, f, ok, pg)
        if ok:
            break
    x, f, ok, pg = best
    info = _observed_information(x, y, tc, nonstationary)
    names = ["mu0", "mu1", "log_sigma", "xi"] if nonstationary else ["mu0", "log_sigma", "xi"]
    try:
        cov = np.linalg.inv(info)
        se_vals = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    except np.linalg.LinAlgError:
        se_vals = np.full(len(x), np.nan)
    if nonstationary:
        x = x.copy()
        x[1] /= t_scale
        se_vals[1] /= t_scale
        pg = pg.copy()
        pg[1] /= t_scale
    se = dict(zip(names, map(float, se_vals)))
    if nonstationary:
        params = GevParams(float(x[0]), float(x[2]), float(x[3]), mu1=float(x[1]), t_ref=t_ref)
    else:
        params = GevParams(float(x[0]), float(x[1]), float(x[2]), t_ref=t_ref)
    return GevFitResult(params, float(f), bool(ok), len(y), se,
                        t_ref if nonstationary else None, float(np.max(np.abs(pg))))


def _projected_grad(x, g):
    pg = g.copy()
    lo, hi = XI_BOUNDS
    if x[-1] <= lo + 1e-10 and g[-1] > 0:
        pg[-1] = 0.0
    if x[-1] >= hi - 1e-10 and g[-1] < 0:
        pg[-1] = 0.0
    return pg


def packed(fit):
    """Packed optimiser vector of a fit, usable as a warm start."""
    p = fit.params
    if p.mu1 is not None:
        return np.array([p.mu0, p.mu1, p.log_sigma, p.xi])
    return p.triplet


# ---------------------------------------------------------------------------
# trend diagnostics

def mann_kendall(values):
    """Mann-Kendall test with tie-corrected variance and continuity correction."""
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("Mann-Kendall test needs at least 3 values")
    iu = np.triu_indices(n, 1)
    diffs = x[None, :] - x[:, None]
    s = int(np.sign(diffs[iu]).sum())
    _, counts = np.unique(x, return_counts=True)
    var = (n * (n - 1) * (2 * n + 5) - np.sum(counts * (counts - 1) * (2 * counts + 5))) / 18.0
    if var <= 0 or s == 0:
        return TrendTestResult(s, 0.0, 1.0)
    z = (s - 1) / math.sqrt(var) if s > 0 else (s + 1) / math.sqrt(var)
    p = 2.0 * stats.norm.sf(abs(z))
    return TrendTestResult(s, float(z), float(min(1.0, p)))


def sen_slope(years, values):
    """Median of all pairwise slopes."""
    t = np.asarray(years, dtype=float)
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise ValueError("Sen's slope needs at least 2 values")
    if len(np.unique(t)) != len(t):
        raise ValueError("years must be distinct")
    i, j = np.triu_indices(len(x), 1)
    return float(np.median((x[j] - x[i]) / (t[j] - t[i])))


def trend_test(series):
    """Mann-Kendall result with Sen's slope attached."""
    mk = mann_kendall(series.values)
    return replace(mk, sen_slope=sen_slope(series.years, series.values))


# ---------------------------------------------------------------------------
# goodness of fit

def _ad_statistic(u):
    u = np.clip(np.sort(u), 1e-12, 1 - 1e-12)
    n = len(u)
    i = np.arange(1, n + 1)
    return float(-n - np.mean((2 * i - 1) * (np.log(u) + np.log1p(-u[::-1]))))


def ad_gof(series, fit, n_boot=999, seed=0):
    """Anderson-Darling test of a fitted GEV with a parametric-bootstrap p-value.

    Each bootstrap sample is drawn from the fitted model at the series' years
    and refitted with the same model form; failed refits are skipped and
    counted.
    """
    if n_boot <= 0:
        raise ValueError("n_boot must be positive")
    if not fit.converged:
        raise ValueError("goodness-of-fit requires a converged fit")
    ns = fit.nonstationary
    t = series.years if ns else None
    a_obs = _ad_statistic(gev_cdf(series.values, fit.params, t))
    rng = np.random.default_rng(seed)
    start = packed(fit)
    exceed, used, failed = 0, 0, 0
    for _ in range(n_boot):
        sim = gev_sample(fit.params, len(series), rng, t)
        try:
            refit = fit_gev((series.years, sim), nonstationary=ns, t_ref=fit.params.t_ref, x0=start)
        except DataError:
            failed += 1
            continue
        if not refit.converged:
            failed += 1
            continue
        used += 1
        a_star = _ad_statistic(gev_cdf(sim, refit.params, t))
        exceed += a_star >= a_obs
    if used == 0:
        raise RuntimeError("all bootstrap refits failed")
    return AdTestResult(a_obs, (1 + exceed) / (used + 1), used, failed)
