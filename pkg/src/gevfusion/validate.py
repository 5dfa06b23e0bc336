"""Model assessment: block leave-one-out, geographic block CV, calibration
metrics, return-level RMSE decomposition, synthetic data and simulation studies.

All predictive distributions target the noisy held-out Stage-1 triplet, so
their covariance includes the site's measurement-error block.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import lmc
from ._parallel import child_seeds, pmap
from .bootstrap import build_layout, stack_from_triplets
from .data import AnnualMaximaSeries, Dataset, Site, distance_matrix
from .exceptions import ConvergenceError, DataError
from .krige import Kriger, _sample_psd, point_seed
from .marginal import gev_ppf, return_level_array

QUANTITIES = ("mu", "log_sigma", "xi", "rl")
LEVELS = (0.5, 0.8, 0.95)


@dataclass
class LooSiteResult:
    site_id: str
    predicted: np.ndarray
    pred_cov: np.ndarray
    observed: np.ndarray
    lpd: float
    rl_pred: float
    rl_obs: float
    rl_sd: float
    pit: dict

    def pred_sd(self, q):
        if q == "rl":
            return self.rl_sd
        j = QUANTITIES.index(q)
        return float(math.sqrt(self.pred_cov[j, j]))

    def pred(self, q):
        return self.rl_pred if q == "rl" else float(self.predicted[QUANTITIES.index(q)])

    def obs(self, q):
        return self.rl_obs if q == "rl" else float(self.observed[QUANTITIES.index(q)])


@dataclass
class CvReport:
    rmse_mu: float
    rmse_logsigma: float
    rmse_xi: float
    rmse_rl: float
    total_lpd: float
    n_sites: int
    coverage: dict = field(default_factory=dict)
    ks_p: dict = field(default_factory=dict)
    sites_won: int | None = None

    def metrics(self):
        """Flat ``name -> value`` mapping used for tables."""
        out = {
            "rmse_mu": self.rmse_mu,
            "rmse_log_sigma": self.rmse_logsigma,
            "rmse_xi": self.rmse_xi,
            "rmse_rl": self.rmse_rl,
            "total_lpd": self.total_lpd,
        }
        for q in QUANTITIES:
            for lev in LEVELS:
                cnt = self.coverage.get(q, {}).get(lev)
                out[f"coverage{int(round(lev * 100))}_{q}"] = (
                    cnt / self.n_sites if cnt is not None and self.n_sites else float("nan"))
            out[f"ks_p_{q}"] = self.ks_p.get(q, float("nan"))
        return out


# ---------------------------------------------------------------------------
# scoring

def score_site(site_id, pred, cov, obs, T=100, n_draws=10000, seed=0):
    """Score one held-out triplet against its Gaussian predictive ``N(pred, cov)``."""
    pred = np.asarray(pred, dtype=float)
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    obs = np.asarray(obs, dtype=float)
    try:
        lpd = float(stats.multivariate_normal(pred, cov).logpdf(obs))
    except (ValueError, np.linalg.LinAlgError):
        raise ConvergenceError(f"predictive covariance for site {site_id} is singular") from None
    sd = np.sqrt(np.diag(cov))
    pit = {q: float(stats.norm.cdf(obs[j], pred[j], sd[j])) for j, q in enumerate(QUANTITIES[:3])}
    rl_pred = float(return_level_array(pred[0], pred[1], pred[2], T))
    rl_obs = float(return_level_array(obs[0], obs[1], obs[2], T))
    draws = _sample_psd(pred, cov, n_draws, np.random.default_rng(point_seed(seed, site_id)))
    rls = return_level_array(draws[:, 0], draws[:, 1], draws[:, 2], T)
    pit["rl"] = float(np.mean(rls <= rl_obs))
    rl_sd = float(np.std(rls, ddof=1)) if n_draws > 1 else 0.0
    return LooSiteResult(site_id, pred, cov, obs, lpd, rl_pred, rl_obs, rl_sd, pit)


def pit_and_coverage(results, levels=LEVELS):
    """Central-interval coverage counts and KS p-values of the PIT values.

    Returns ``(coverage, ks_p)`` where ``coverage[q][level]`` counts the sites
    whose PIT lies inside the central interval. KS p-values are NaN with
    fewer than 5 sites.
    """
    coverage, ks_p = {}, {}
    for q in QUANTITIES:
        u = np.array([r.pit[q] for r in results])
        coverage[q] = {lev: int(np.sum(np.abs(u - 0.5) <= lev / 2)) for lev in levels}
        ks_p[q] = float(stats.kstest(u, "uniform").pvalue) if len(u) >= 5 else float("nan")
    return coverage, ks_p


def _rmse(x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else float("nan")


def cv_report(results):
    errs = np.array([r.predicted - r.observed for r in results]).reshape(-1, 3)
    coverage, ks_p = pit_and_coverage(results)
    return CvReport(
        _rmse(errs[:, 0]), _rmse(errs[:, 1]), _rmse(errs[:, 2]),
        _rmse([r.rl_pred - r.rl_obs for r in results]),
        float(sum(r.lpd for r in results)), len(results), coverage, ks_p,
    )


def compare_reports(joint, baseline):
    """Table rows ``(metric, joint, baseline, reduction_pct)``.

    ``joint`` and ``baseline`` are lists of :class:`LooSiteResult` over the
    same sites. RMSE reductions are ``100 (1 - joint / baseline)``; for the
    log predictive density the column holds the difference joint - baseline.
    """
    _check_same_sites(joint, baseline)
    rj, rb = cv_report(joint), cv_report(baseline)
    bmap = {r.site_id: r for r in baseline}
    won = sum(abs(r.rl_pred - r.rl_obs) < abs(bmap[r.site_id].rl_pred - bmap[r.site_id].rl_obs)
              for r in joint)
    rj.sites_won = int(won)
    rb.sites_won = len(joint) - int(won)
    mj, mb = rj.metrics(), rb.metrics()
    rows = []
    for key in mj:
        if key.startswith("rmse"):
            red = 100.0 * (1.0 - mj[key] / mb[key]) if mb[key] > 0 else 0.0
        elif key == "total_lpd":
            red = mj[key] - mb[key]
        else:
            red = float("nan")
        rows.append((key, mj[key], mb[key], red))
    rows.append(("sites_won", float(rj.sites_won), float(rb.sites_won), float("nan")))
    return rows, rj, rb


def _check_same_sites(a, b):
    if sorted(r.site_id for r in a) != sorted(r.site_id for r in b):
        raise DataError("joint and baseline results cover different sites")


# ---------------------------------------------------------------------------
# block leave-one-out

def _target_sites(stack, target_source):
    out = [k for k, s in enumerate(stack.sites) if s.source == target_source]
    if not out:
        raise DataError(f"no {target_source} sites in the stack")
    return out


def loo_block(p, stack, W, dist=None, target_source="OBS", T=100, n_draws=10000, seed=0):
    """Closed-form leave-one-site-out predictive for every target-source site.

    Conditions on ``p`` fitted to the full data; no refitting. For the rows
    ``b`` of a site the predictive of the held-out triplet has mean
    ``y_b - Q^{-1} (V^{-1} r)_b`` and covariance ``Q^{-1}`` with
    ``Q = (V^{-1})_{bb}``.

    Returns
    -------
    (list of LooSiteResult, CvReport)
    """
    if dist is None:
        dist = distance_matrix(stack.sites)
    v = lmc.sigma_obs(p, stack, dist) + lmc._w_array(W)
    chol, _ = lmc.factorize(v)
    chol = np.tril(chol)
    vinv = cho_solve((chol, True), np.eye(stack.n_obs))
    vinv = 0.5 * (vinv + vinv.T)
    r = stack.values - p.beta[stack.p_index]
    alpha = vinv @ r
    results = []
    for k in _target_sites(stack, target_source):
        rows = stack.rows_of_site(k)
        q = vinv[np.ix_(rows, rows)]
        try:
            qf = cho_factor(q, lower=True)
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"singular precision block at site {stack.sites[k].id}") from None
        cov = cho_solve(qf, np.eye(len(rows)))
        obs = stack.values[rows]
        pred = obs - cov @ alpha[rows]
        results.append(score_site(stack.sites[k].id, pred, cov, obs, T, n_draws, seed))
    return results, cv_report(results)


def loo_oracle(p, stack, W, dist, site_index):
    """Explicit delete-block conditional Gaussian (slow reference)."""
    v = lmc.sigma_obs(p, stack, dist) + lmc._w_array(W)
    b = stack.rows_of_site(site_index)
    o = np.setdiff1d(np.arange(stack.n_obs), b)
    mu = p.beta[stack.p_index]
    vo = v[np.ix_(o, o)]
    vbo = v[np.ix_(b, o)]
    mean = mu[b] + vbo @ np.linalg.solve(vo, stack.values[o] - mu[o])
    cov = v[np.ix_(b, b)] - vbo @ np.linalg.solve(vo, vbo.T)
    return mean, cov


# ---------------------------------------------------------------------------
# geographic block cross-validation

@dataclass
class BlockCvResult:
    folds: list
    results: list
    pooled: CvReport


def _noisy_predictive(kg, site, comps, w_cross, w_bb):
    """Predictive of a held-out noisy triplet given a factorized training model.

    ``w_cross`` (n_train x 3) is the measurement-error covariance between the
    training rows and the held-out rows; ``w_bb`` is the held-out block.
    """
    d0 = distance_matrix(kg.stack.sites, [site])
    c = kg.cross(d0)[0][:, comps] + w_cross
    pred = kg.p.beta[comps] + c.T @ kg.alpha
    z = solve_triangular(kg.chol, c, lower=True)
    cov = kg.prior[np.ix_(comps, comps)] + w_bb - z.T @ z
    return pred, 0.5 * (cov + cov.T)


def _check_blocks(blocks, stack, target_source):
    targets = {s.id for s in stack.sites if s.source == target_source}
    seen = {}
    for name, ids in blocks:
        for sid in ids:
            if sid in seen:
                raise DataError(f"site {sid} appears in blocks {seen[sid]!r} and {name!r}")
            if sid not in targets:
                raise DataError(f"block {name!r}: {sid} is not a {target_source} site in the stack")
            seen[sid] = name
    missing = targets - set(seen)
    if missing:
        raise DataError(f"blocks do not cover sites: {', '.join(sorted(missing))}")


def _fold(args):
    (name, ids, stack, w, dist, p_full, refit, fit_kwargs, fold_seed, target_source,
     T, n_draws, seed) = args
    held = set(ids)
    train_ids = [s.id for s in stack.sites if s.id not in held]
    sub, rows = stack.subset(train_ids)
    w_sub = w[np.ix_(rows, rows)]
    d_sub = dist[np.ix_(*[[stack.site_ids.index(s) for s in sub.site_ids]] * 2)]
    if refit:
        p, _ = lmc.fit_lmc(sub, w_sub, d_sub, seed=fold_seed, **fit_kwargs)
    else:
        p = p_full
    kg = Kriger(p, sub, w_sub, d_sub)
    off = stack.source_offset[target_source]
    comps = np.arange(off, off + 3)
    out = []
    for k, site in enumerate(stack.sites):
        if site.id not in held:
            continue
        b = stack.rows_of_site(k)
        pred, cov = _noisy_predictive(kg, site, comps, w[np.ix_(rows, b)], w[np.ix_(b, b)])
        out.append(score_site(site.id, pred, cov, stack.values[b], T, n_draws, seed))
    return name, p, out


def geographic_block_cv(stack, W, blocks, dist=None, target_source="OBS", T=100, refit=True,
                        p_full=None, fit_kwargs=None, force=False, n_draws=10000, seed=0, jobs=1):
    """Hold out each block of target-source sites in turn and predict it.

    Parameters
    ----------
    blocks : list of (name, list of site ids)
        Must partition the target-source sites of ``stack``.
    refit : bool
        Refit the LMC on each fold's training data. With ``False`` the full
        fit ``p_full`` is reused.
    force : bool
        Allow folds that leave fewer than 4 target-source training sites.
    """
    if dist is None:
        dist = distance_matrix(stack.sites)
    blocks = [(str(n), list(ids)) for n, ids in blocks]
    _check_blocks(blocks, stack, target_source)
    if not refit and p_full is None:
        raise ValueError("p_full is required when refit is disabled")
    n_targets = sum(s.source == target_source for s in stack.sites)
    for name, ids in blocks:
        if n_targets - len(ids) < 4 and not force:
            raise DataError(f"fold {name!r} leaves {n_targets - len(ids)} {target_source} training "
                            "sites (< 4); use force to run it anyway")
    w = lmc._w_array(W)
    fit_kwargs = dict(fit_kwargs or {})
    fit_kwargs.setdefault("jobs", 1)
    seeds = child_seeds(seed, len(blocks))
    args = [(name, ids, stack, w, dist, p_full, refit, fit_kwargs, s, target_source, T, n_draws, seed)
            for (name, ids), s in zip(blocks, seeds)]
    folds = []
    pooled = []
    for name, p, res in pmap(_fold, args, jobs):
        folds.append({"name": name, "params": p, "results": res, "report": cv_report(res)})
        pooled.extend(res)
    return BlockCvResult(folds, pooled, cv_report(pooled))


def contiguous_blocks(sites, n_blocks, key=lambda s: s.lat):
    """Split sites into ``n_blocks`` contiguous groups after sorting on ``key``."""
    order = sorted(sites, key=lambda s: (key(s), s.id))
    return [(f"block{i + 1}", [s.id for s in part])
            for i, part in enumerate(np.array_split(np.array(order, dtype=object), n_blocks))]


# ---------------------------------------------------------------------------
# return-level RMSE decomposition

def rmse_decomposition(loo_joint, loo_baseline, T=100):
    """RL RMSE when one GEV parameter at a time comes from the joint model.

    Returns rows ``(row, rmse, reduction_pct)`` for ``baseline``, ``mu``,
    ``log_sigma``, ``xi`` and ``joint``.
    """
    _check_same_sites(loo_joint, loo_baseline)
    bmap = {r.site_id: r for r in loo_baseline}
    pj = np.array([r.predicted for r in loo_joint])
    pb = np.array([bmap[r.site_id].predicted for r in loo_joint])
    obs = np.array([r.observed for r in loo_joint])
    rl_obs = return_level_array(obs[:, 0], obs[:, 1], obs[:, 2], T)

    def rmse_with(mask):
        x = np.where(mask, pj, pb)
        return _rmse(return_level_array(x[:, 0], x[:, 1], x[:, 2], T) - rl_obs)

    base = rmse_with(np.zeros(3, dtype=bool))
    rows = []
    for name, mask in (("baseline", (0, 0, 0)), ("mu", (1, 0, 0)), ("log_sigma", (0, 1, 0)),
                       ("xi", (0, 0, 1)), ("joint", (1, 1, 1))):
        val = rmse_with(np.array(mask, dtype=bool))
        red = 100.0 * (1.0 - val / base) if base > 0 else 0.0
        rows.append((name, val, red))
    return rows


def baseline_stack(stack, W, dist, source="OBS"):
    """Single-source stack, its W block and distance matrix."""
    sub, rows = stack.single_source(source)
    idx = [stack.site_ids.index(s) for s in sub.site_ids]
    return sub, lmc._w_array(W)[np.ix_(rows, rows)], dist[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticData:
    latent: dict
    stack: object = None
    dataset: Dataset | None = None
    seed: int = 0


def simulate_latent(p, sites, rng):
    """Draw the latent parameter field (n_sites x dim) at ``sites``."""
    d = distance_matrix(sites)
    n = len(sites)
    theta = np.tile(p.beta, (n, 1)).astype(float)
    a = p.A
    for i in range(p.dim):
        if not np.any(a[:, i]):
            continue
        delta = _sample_psd(np.zeros(n), np.exp(-d / p.rho[i]), 1, rng)[0]
        theta += np.outer(delta, a[:, i])
    return theta


def simulate_dataset(p_true, design, mode="stack", W=None, n_years=43, seed=0, start_year=1980):
    """Synthetic data from the LMC.

    ``mode="stack"`` adds ``N(0, W)`` noise to the latent triplets in stack
    order and returns a :class:`StackedObservations`. ``mode="full"`` samples
    ``n_years`` annual maxima per site from the GEV at its latent triplet and
    returns a :class:`Dataset` for a real Stage-1 run.
    """
    rng = np.random.default_rng(seed)
    sites, _, _, offsets = build_layout(design, 6 if p_true.dim == 6 else 3)
    theta = simulate_latent(p_true, sites, rng)
    latent = {s.id: theta[k] for k, s in enumerate(sites)}
    own = {s.id: theta[k, offsets[s.source]:offsets[s.source] + 3] for k, s in enumerate(sites)}
    if mode == "stack":
        if W is None:
            raise ValueError("stack mode needs a measurement covariance W")
        stack = stack_from_triplets(sites, own, p_true.dim)
        w = lmc._w_array(W)
        if w.shape != (stack.n_obs, stack.n_obs):
            raise DataError(f"W is {w.shape} but the design has {stack.n_obs} stacked rows")
        if np.any(w):
            noise = _sample_psd(np.zeros(stack.n_obs), w, 1, rng)[0]
            stack = stack.with_values(stack.values + noise)
        return SyntheticData(latent, stack=stack, seed=seed)
    if mode == "full":
        if n_years < 10:
            raise ValueError("n_years must be at least 10")
        years = np.arange(start_year, start_year + n_years)
        series = []
        for s in sites:
            mu, ls, xi = own[s.id]
            vals = gev_ppf(rng.uniform(size=n_years), mu, math.exp(ls), xi)
            series.append(AnnualMaximaSeries(s.id, years, vals))
        return SyntheticData(latent, dataset=Dataset(sites, series), seed=seed)
    raise ValueError(f"unknown simulation mode {mode!r}")


def coastal_design(n_obs=29, n_sim=100, seed=0, prefix=("N", "A")):
    """Sites at random positions along a Gulf-and-Atlantic coastline polyline."""
    rng = np.random.default_rng(seed)
    pts = np.array(_COAST)
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]) * np.cos(np.radians(pts[:-1, 0])))
    cum = np.concatenate([[0.0], np.cumsum(seg)])

    def place(n, tag, source):
        u = np.sort(rng.uniform(0.0, cum[-1], n))
        lat = np.interp(u, cum, pts[:, 0])
        lon = np.interp(u, cum, pts[:, 1])
        return [Site(f"{tag}{i:03d}", source, round(float(a), 4), round(float(b), 4))
                for i, (a, b) in enumerate(zip(lat, lon))]

    return place(n_obs, prefix[0], "OBS") + place(n_sim, prefix[1], "SIM")


# Texas to Maine, coarse (lat, lon) vertices
_COAST = [
    (26.0, -97.2), (27.8, -97.4), (29.3, -94.8), (29.7, -93.3), (29.2, -90.5), (30.3, -88.5),
    (30.4, -86.5), (29.9, -84.5), (28.0, -82.8), (25.8, -81.4), (25.4, -80.3), (27.5, -80.2),
    (30.3, -81.4), (32.0, -80.9), (33.9, -78.0), (35.2, -75.6), (36.9, -76.0), (38.9, -74.9),
    (40.5, -74.0), (41.2, -72.0), (41.5, -70.7), (42.4, -70.9), (43.6, -70.2), (44.4, -68.2),
]


def reference_truth():
    """Six-dimensional truth with strongly coupled location parameters.

    Cross-source correlations are 0.995 (location), 0.443 (log scale) and
    0.837 (shape).
    """
    sd = np.array([0.8, 0.25, 0.12, 0.75, 0.25, 0.12])
    corr = np.eye(6)
    for j, c in enumerate((0.995, 0.443, 0.837)):
        corr[j, j + 3] = corr[j + 3, j] = c
    m = corr * np.outer(sd, sd)
    a = np.linalg.cholesky(m)
    beta = np.array([2.0, -1.6, 0.15, 2.2, -1.5, 0.1])
    rho = np.array([600.0, 1500.0, 900.0, 188.0, 500.0, 300.0])
    return lmc.LmcParams.from_matrix(beta, a, rho)


SYNTHETIC_W_SDS = {"OBS": (0.04, 0.12, 0.21), "SIM": (0.04, 0.12, 0.17)}


def synthetic_w(stack, sds=None, corr=(0.3, -0.35, -0.3)):
    """Block-diagonal per-site measurement covariance in stack order.

    ``sds`` maps each source to the standard errors of (mu, log sigma, xi);
    a single triple applies to every source. The default shape errors are
    typical bootstrap standard errors for 35-45 annual maxima. ``corr``
    holds the within-site correlations (mu, log sigma), (mu, xi) and
    (log sigma, xi).
    """
    sds = SYNTHETIC_W_SDS if sds is None else sds
    if not isinstance(sds, dict):
        sds = {s.source: sds for s in stack.sites}
    c = np.array([[1.0, corr[0], corr[1]], [corr[0], 1.0, corr[2]], [corr[1], corr[2], 1.0]])
    w = np.zeros((stack.n_obs, stack.n_obs))
    for k, site in enumerate(stack.sites):
        rows = stack.rows_of_site(k)
        w[np.ix_(rows, rows)] = c * np.outer(sds[site.source], sds[site.source])
    return w


# ---------------------------------------------------------------------------
# simulation studies

CORR_NAMES = ("cor_mu", "cor_log_sigma", "cor_xi")


def _ident_rep(args):
    p_true, w, design, fit_kwargs, rep_seed = args
    sim = simulate_dataset(p_true, design, "stack", W=w, seed=rep_seed)
    dist = distance_matrix(sim.stack.sites)
    try:
        p, _ = lmc.fit_lmc(sim.stack, w, dist, seed=rep_seed, **fit_kwargs)
    except ConvergenceError:
        return None
    return lmc.cross_source_correlations(p)


@dataclass
class IdentifiabilityTable:
    rows: list
    estimates: np.ndarray
    n_failed: int


def identifiability_study(p_true, W, design, n_reps=100, seed=0, fit_kwargs=None, jobs=1,
                          max_fail_frac=0.3):
    """Refit the LMC to ``n_reps`` stack-mode replicates and summarise the
    recovered cross-source correlations.

    Rows hold ``name, true, median, sd, iqr, q05, q95``.
    """
    if any(s.source not in ("OBS", "SIM") for s in design):
        raise DataError("design sites need OBS or SIM labels")
    fit_kwargs = dict(fit_kwargs or {})
    fit_kwargs.setdefault("jobs", 1)
    w = lmc._w_array(W)
    seeds = child_seeds(seed, n_reps)
    out = pmap(_ident_rep, [(p_true, w, design, fit_kwargs, s) for s in seeds], jobs)
    ok = [r for r in out if r is not None]
    failed = n_reps - len(ok)
    if failed > max_fail_frac * n_reps:
        raise ConvergenceError(f"{failed} of {n_reps} replicate fits failed")
    est = np.array(ok)
    truth = lmc.cross_source_correlations(p_true)
    rows = []
    for j, name in enumerate(CORR_NAMES):
        x = est[:, j]
        q05, q25, q50, q75, q95 = np.percentile(x, [5, 25, 50, 75, 95])
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        rows.append((name, truth[j], float(q50), sd, float(q75 - q25), float(q05), float(q95)))
    return IdentifiabilityTable(rows, est, failed)


def _saturation_draw(args):
    stack, w, dist, ids, fit_kwargs, fit_seed, T, n_draws, seed = args
    sub, rows = stack.subset(ids)
    idx = [stack.site_ids.index(s) for s in sub.site_ids]
    d_sub = dist[np.ix_(idx, idx)]
    w_sub = w[np.ix_(rows, rows)]
    p, _ = lmc.fit_lmc(sub, w_sub, d_sub, seed=fit_seed, **fit_kwargs)
    _, rep = loo_block(p, sub, w_sub, d_sub, "OBS", T, n_draws, seed)
    return rep.rmse_rl


def saturation_experiment(stack, W, subset_sizes, n_draws_per_size=5, dist=None, seed=0, T=100,
                          fit_kwargs=None, n_draws=10000, jobs=1, baseline_rmse=None):
    """RL LOO-RMSE reduction against the OBS-only baseline as simulation sites are added.

    Returns rows ``(size, draw, rmse_rl, reduction_pct)``; size 0 is the baseline.
    """
    if dist is None:
        dist = distance_matrix(stack.sites)
    w = lmc._w_array(W)
    obs_ids = [s.id for s in stack.sites if s.source == "OBS"]
    sim_ids = [s.id for s in stack.sites if s.source == "SIM"]
    sizes = [int(k) for k in subset_sizes]
    for k in sizes:
        if k < 0 or k > len(sim_ids):
            raise DataError(f"subset size {k} outside 0..{len(sim_ids)}")
    fit_kwargs = dict(fit_kwargs or {})
    fit_kwargs.setdefault("jobs", 1)
    if baseline_rmse is None:
        bst, bw, bd = baseline_stack(stack, w, dist)
        pb, _ = lmc.fit_lmc(bst, bw, bd, seed=seed, **fit_kwargs)
        baseline_rmse = loo_block(pb, bst, bw, bd, "OBS", T, n_draws, seed)[1].rmse_rl
    rng = np.random.default_rng(seed)
    tasks, labels = [], []
    seeds = iter(child_seeds(seed, sum(n_draws_per_size if k not in (0, len(sim_ids)) else 1
                                       for k in sizes)))
    for k in sizes:
        reps = 1 if k in (0, len(sim_ids)) else n_draws_per_size
        for r in range(reps):
            s = next(seeds)
            if k == 0:
                labels.append((k, r, None))
                continue
            chosen = sorted(rng.choice(sim_ids, size=k, replace=False).tolist())
            labels.append((k, r, len(tasks)))
            tasks.append((stack, w, dist, obs_ids + chosen, fit_kwargs, s, T, n_draws, seed))
    rmses = pmap(_saturation_draw, tasks, jobs)
    rows = []
    for k, r, t in labels:
        val = baseline_rmse if t is None else rmses[t]
        red = 0.0 if t is None else 100.0 * (1.0 - val / baseline_rmse)
        rows.append((k, r, float(val), float(red)))
    return rows
