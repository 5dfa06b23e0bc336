import numpy as np
import pytest

from gevfusion import bootstrap as B
from gevfusion import marginal
from gevfusion.data import AnnualMaximaSeries, Dataset, Site, distance_matrix
from gevfusion.exceptions import ConvergenceError, DataError


def _dataset(rng, n_years=30, sites=None, common_storm=None):
    sites = sites or [Site("g1", "OBS", 30.0, -81.0), Site("g2", "OBS", 30.5, -81.2),
                      Site("m1", "SIM", 31.0, -80.5)]
    years = np.arange(1980, 1980 + n_years)
    series = []
    for s in sites:
        v = rng.gumbel(1.0, 0.2, n_years)
        if common_storm is not None and s.source == "OBS":
            v = v + common_storm
        series.append(AnnualMaximaSeries(s.id, years, v))
    return Dataset(sites, series)


def _fits(ds):
    return {s.site_id: marginal.fit_gev(s) for s in ds.series}


def test_stack_layout_two_sites(rng):
    ds = _dataset(rng, sites=[Site("a", "OBS", 30, -80), Site("b", "SIM", 31, -80)])
    fits = _fits(ds)
    st = B.stack_stage1(ds, fits)
    assert st.n_obs == 6
    assert st.p_index.tolist() == [0, 3, 1, 4, 2, 5]
    assert st.s_index.tolist() == [0, 1, 0, 1, 0, 1]
    assert st.values[0] == fits["a"].params.mu0 and st.values[5] == fits["b"].params.xi


def test_stack_single_site_and_order_invariance(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    one = B.stack_stage1(ds.subset(["g1"]), fits)
    assert np.array_equal(one.values, fits["g1"].params.triplet)
    shuffled = Dataset(ds.sites[::-1], ds.series[::-1])
    a, b = B.stack_stage1(ds, fits), B.stack_stage1(shuffled, fits)
    assert np.array_equal(a.values, b.values) and a.layout_hash() == b.layout_hash()


def test_stack_drops_trend_slope(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    fits["g1"] = marginal.fit_gev(ds.series_map["g1"], nonstationary=True)
    st = B.stack_stage1(ds, fits)
    assert st.values[st.s_index.tolist().index(0)] == fits["g1"].params.mu0
    assert st.n_obs == 9


def test_stack_rejects_unconverged(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    f = fits["g2"]
    fits["g2"] = marginal.GevFitResult(f.params, f.nll, False, f.n_used, f.se)
    with pytest.raises(DataError, match="g2"):
        B.stack_stage1(ds, fits)


def test_identity_draw_reproduces_stack(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    st = B.stack_stage1(ds, fits)
    year_sets = B._source_year_sets(ds)
    draws = {src: years for src, (_, years) in year_sets.items()}
    out = B.refit_on_years(ds, fits, sorted(fits), draws)
    assert np.allclose(out, st.values, atol=1e-6)


def test_bootstrap_guards(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    with pytest.raises(ValueError):
        B.block_bootstrap_stage1(ds, fits, B=0)
    short = _dataset(rng, n_years=9)
    with pytest.raises((DataError, ValueError)):
        B.block_bootstrap_stage1(short, _fits(_dataset(rng)), B=5)


def test_bootstrap_shared_storm_gives_positive_correlation():
    rng = np.random.default_rng(4)
    ds = _dataset(rng, n_years=40, common_storm=rng.gumbel(0.0, 0.5, 40))
    fits = _fits(ds)
    reps = B.block_bootstrap_stage1(ds, fits, B=200, seed=1)
    st = B.stack_stage1(ds, fits)
    mu_rows = [m for m in range(st.n_obs) if st.p_index[m] == 0]
    c = np.corrcoef(reps.replicates[:, mu_rows].T)
    assert c[0, 1] > 0.3


def test_bootstrap_reproducible_and_job_independent(rng):
    ds = _dataset(rng)
    fits = _fits(ds)
    a = B.block_bootstrap_stage1(ds, fits, B=12, seed=7)
    b = B.block_bootstrap_stage1(ds, fits, B=12, seed=7)
    c = B.block_bootstrap_stage1(ds, fits, B=12, seed=7, jobs=2)
    assert np.array_equal(a.replicates, b.replicates)
    assert np.array_equal(a.replicates, c.replicates)
    assert not np.array_equal(a.replicates, B.block_bootstrap_stage1(ds, fits, B=12, seed=8).replicates)


def test_wendland_values():
    assert B.wendland_c4(0.0, 300.0) == 1.0
    assert B.wendland_c4(300.0, 300.0) == 0.0
    assert B.wendland_c4(1e6, 300.0) == 0.0
    assert abs(B.wendland_c4(150.0, 300.0) - 20.75 / 192) <= 1e-15
    d = np.linspace(0, 400, 401)
    assert np.all(np.diff(B.wendland_c4(d, 300.0)) <= 0)


def test_wendland_positive_definite(rng):
    for _ in range(50):
        sites = [Site(str(i), "OBS", rng.uniform(25, 45), rng.uniform(-98, -68)) for i in range(30)]
        m = B.wendland_c4(distance_matrix(sites), 300.0)
        assert np.linalg.eigvalsh(m).min() >= -1e-10


def test_spd_repair_examples(rng):
    out, rep = B.spd_repair(np.eye(3))
    assert np.array_equal(out, np.eye(3)) and not rep
    out, rep = B.spd_repair(np.diag([1.0, -1e-12]))
    assert rep and np.allclose(out, np.diag([1.0, 1e-8]), atol=1e-20)
    with pytest.raises(ValueError):
        B.spd_repair(np.array([[1.0, 0.5], [0.0, 1.0]]))
    g = rng.normal(size=(8, 8))
    m = g @ g.T
    evals, evecs = np.linalg.eigh(m)
    evals[0] = -0.5
    bad = (evecs * evals) @ evecs.T
    bad = 0.5 * (bad + bad.T)
    out, rep = B.spd_repair(bad)
    ev = np.linalg.eigvalsh(out)
    assert rep and ev.min() >= 1e-8 * ev.max() * (1 - 1e-6)


def _stack_for(sites):
    return B.stack_from_triplets(sites, {s.id: np.zeros(3) for s in sites})


def test_measurement_cov_taper_and_diagonal(rng):
    sites = [Site("a", "OBS", 30.0, -80.0), Site("b", "SIM", 30.0, -79.9), Site("c", "SIM", 40.0, -70.0)]
    st = _stack_for(sites)
    g = rng.normal(size=(9, 9))
    reps = rng.multivariate_normal(np.zeros(9), g @ g.T / 9 + np.eye(9), size=400)
    mc = B.build_measurement_cov(reps, st, 300.0)
    far = [m for m in range(9) if st.s_index[m] == 2]
    near = [m for m in range(9) if st.s_index[m] != 2]
    assert np.all(mc.w[np.ix_(far, near)] == 0.0)
    assert np.allclose(np.diag(mc.w), np.var(reps, axis=0, ddof=1))
    assert np.allclose(mc.w, mc.w.T, atol=1e-12)
    assert np.linalg.eigvalsh(mc.w).min() >= 0
    shuffled = B.build_measurement_cov(reps[rng.permutation(400)], st, 300.0)
    assert np.allclose(shuffled.w, mc.w, atol=1e-12)


def test_measurement_cov_converges_without_taper(rng):
    sites = [Site(str(i), "OBS", 30.0 + i, -80.0) for i in range(3)]
    st = _stack_for(sites)
    g = rng.normal(size=(9, 9))
    truth = g @ g.T / 9 + 0.5 * np.eye(9)
    errs = []
    for n in (100, 1000, 10000):
        reps = rng.multivariate_normal(np.zeros(9), truth, size=n)
        errs.append(np.linalg.norm(B.build_measurement_cov(reps, st, 1e9).w - truth))
    assert errs[0] > errs[1] > errs[2]


def test_measurement_cov_rank_deficient_keeps_zeros(rng):
    sites = [Site(str(i), "OBS", 30.0 + 0.5 * i, -80.0) for i in range(12)]
    st = _stack_for(sites)
    reps = rng.normal(size=(20, st.n_obs))  # fewer replicates than rows
    reps = np.repeat(reps, 3, axis=0)
    mc = B.build_measurement_cov(reps, st, 300.0)
    d = distance_matrix(st.sites)[np.ix_(st.s_index, st.s_index)]
    assert np.all(mc.w[d >= 300.0] == 0.0)
    ev = np.linalg.eigvalsh(mc.w)
    assert ev.min() >= 1e-8 * ev.max() * (1 - 1e-6)


def test_measurement_cov_floor(rng):
    st = _stack_for([Site("a", "OBS", 30, -80)])
    with pytest.raises(ConvergenceError):
        B.build_measurement_cov(rng.normal(size=(49, 3)), st)


def test_measurement_cov_round_trip(tmp_path, rng):
    sites = [Site("a", "OBS", 30.0, -80.0), Site("b", "SIM", 30.3, -80.1), Site("c", "SIM", 41, -70)]
    st = _stack_for(sites)
    mc = B.build_measurement_cov(rng.normal(size=(80, 9)), st, 300.0, seed=3)
    path = tmp_path / "w.csv"
    B.save_measurement_cov(mc, path)
    text = path.read_text()
    assert "# lambda_km=300.0" in text and "# B=80" in text and "# seed=3" in text
    back = B.load_measurement_cov(path, st)
    assert np.array_equal(back.w, mc.w)
    other = _stack_for(sites[:2] + [Site("d", "SIM", 41, -70)])
    with pytest.raises(DataError):
        B.load_measurement_cov(path, other)


def test_stack_subset_and_single_source(rng):
    ds = _dataset(rng)
    st = B.stack_stage1(ds, _fits(ds))
    sub, rows = st.single_source("OBS")
    assert sub.n_latent == 3 and sub.n_sites == 2
    assert sub.p_index.tolist() == [0, 0, 1, 1, 2, 2]
    assert np.array_equal(sub.values, st.values[rows])
