"""Command-line pipeline for two-stage GEV fusion.

Settings come from an optional JSON config file; flags override it. Every
table written carries ``# config_hash=...`` and ``# seed=...`` header lines so
outputs can be traced to the settings that produced them.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bootstrap, krige, lmc, marginal, tables, validate
from ._parallel import pmap
from .data import completeness_filter, distance_matrix, load_dataset, load_sites, save_dataset
from .exceptions import ConvergenceError, DataError

log = logging.getLogger("gevfusion")

OUTPUT_ENV = "GEVFUSION_OUTPUT_DIR"

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "paths": {"sites": None, "maxima": None, "grid": None, "blocks": None, "output_dir": None},
    "filter": {"year_frac": 0.9, "min_years": 20},
    "stage1": {"nonstationary_source": "OBS", "t_ref": 2000.0},
    "bootstrap": {"B": 500, "taper_km": 300.0},
    "lmc": {"n_starts": 20, "rho_init_range": [50.0, 5000.0]},
    "predict": {"T": [100.0], "n_draws": 10000},
    "cv": {"baseline": "none", "n_blocks": 5, "refit": True, "force": False},
    "simulate": {"mode": "full", "n_obs": 29, "n_sim": 100, "n_years": 43, "design_seed": 0,
                 "truth": None},
    "identifiability": {"n_reps": 100},
    "saturation": {"sizes": [0, 5, 10, 15, 20, 30, 50, 100], "draws_per_size": 5},
}

# artifact names inside the output directory
FITS = "stage1_fits.csv"
TRENDS = "trends.csv"
WFILE = "measurement_cov.csv"
MODEL = "lmc_joint.json"
BASELINE_MODEL = "lmc_baseline.json"


# ---------------------------------------------------------------------------
# configuration

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _unknown_keys(cfg, ref, prefix=""):
    bad = []
    for k, v in cfg.items():
        if k not in ref:
            bad.append(prefix + k)
        elif isinstance(v, dict) and isinstance(ref[k], dict):
            bad.extend(_unknown_keys(v, ref[k], f"{prefix}{k}."))
    return bad


def validate_config(cfg):
    """Check every numeric setting against the preconditions of the stage using it."""
    def need(cond, msg):
        if not cond:
            raise DataError(f"config: {msg}")

    need(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    need(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs must be >= 1")
    f = cfg["filter"]
    need(0 < f["year_frac"] <= 1, "filter.year_frac must be in (0, 1]")
    need(int(f["min_years"]) >= 10, "filter.min_years must be >= 10")
    s1 = cfg["stage1"]
    need(s1["nonstationary_source"] in ("OBS", "SIM", "both", "none"),
         "stage1.nonstationary_source must be OBS, SIM, both or none")
    need(np.isfinite(float(s1["t_ref"])), "stage1.t_ref must be finite")
    b = cfg["bootstrap"]
    need(int(b["B"]) >= 1, "bootstrap.B must be positive")
    need(float(b["taper_km"]) > 0, "bootstrap.taper_km must be positive")
    m = cfg["lmc"]
    need(int(m["n_starts"]) >= 1, "lmc.n_starts must be >= 1")
    lo, hi = m["rho_init_range"]
    need(0 < float(lo) <= float(hi), "lmc.rho_init_range must satisfy 0 < low <= high")
    pr = cfg["predict"]
    need(len(pr["T"]) >= 1 and all(float(t) > 1 for t in pr["T"]), "predict.T values must exceed 1")
    need(int(pr["n_draws"]) >= 2, "predict.n_draws must be >= 2")
    cv = cfg["cv"]
    need(cv["baseline"] in ("none", "single-source"), "cv.baseline must be none or single-source")
    need(int(cv["n_blocks"]) >= 2, "cv.n_blocks must be >= 2")
    sim = cfg["simulate"]
    need(sim["mode"] in ("full", "stack"), "simulate.mode must be full or stack")
    need(int(sim["n_obs"]) >= 1 and int(sim["n_sim"]) >= 0, "simulate site counts invalid")
    need(int(sim["n_years"]) >= 10, "simulate.n_years must be >= 10")
    need(int(cfg["identifiability"]["n_reps"]) >= 1, "identifiability.n_reps must be >= 1")
    sat = cfg["saturation"]
    need(all(int(k) >= 0 for k in sat["sizes"]), "saturation.sizes must be non-negative")
    need(int(sat["draws_per_size"]) >= 1, "saturation.draws_per_size must be >= 1")
    return cfg


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: invalid JSON ({exc})") from None
        bad = _unknown_keys(user, DEFAULTS)
        if bad:
            raise DataError(f"{p}: unknown config key(s) {', '.join(bad)}")
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides or {})
    if not cfg["paths"]["output_dir"]:
        cfg["paths"]["output_dir"] = os.environ.get(OUTPUT_ENV, "gevfusion_out")
    return validate_config(cfg)


def config_hash(cfg):
    """Hash of the settings that affect results (output location and worker count excluded)."""
    c = copy.deepcopy(cfg)
    c["paths"].pop("output_dir", None)
    c.pop("jobs", None)
    blob = json.dumps(c, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _overrides(args):
    """Nested config overrides from the flags that were given."""
    o = {}

    def put(section, key, value):
        if value is not None:
            (o.setdefault(section, {}) if section else o)[key] = value

    put(None, "seed", args.seed)
    put(None, "jobs", args.jobs)
    for key in ("sites", "maxima", "grid", "blocks", "output_dir"):
        put("paths", key, getattr(args, key))
    put("stage1", "nonstationary_source", args.nonstationary_source)
    put("stage1", "t_ref", args.t_ref)
    put("bootstrap", "B", args.B)
    put("bootstrap", "taper_km", args.taper_km)
    put("lmc", "n_starts", args.n_starts)
    if args.T:
        put("predict", "T", args.T)
    put("predict", "n_draws", args.n_draws)
    put("cv", "baseline", args.baseline)
    put("cv", "n_blocks", args.n_blocks)
    if args.no_refit:
        put("cv", "refit", False)
    if args.force:
        put("cv", "force", True)
    put("simulate", "mode", args.mode)
    put("simulate", "n_obs", args.n_obs)
    put("simulate", "n_sim", args.n_sim)
    put("simulate", "n_years", args.n_years)
    put("simulate", "truth", args.truth)
    put("identifiability", "n_reps", args.n_reps)
    if args.sizes:
        put("saturation", "sizes", args.sizes)
    put("saturation", "draws_per_size", args.draws_per_size)
    return o


# ---------------------------------------------------------------------------
# run context

class Run:
    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.seed = cfg["seed"]
        self.jobs = cfg["jobs"]
        self.out = Path(cfg["paths"]["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)

    def header(self, **extra):
        h = {"command": self.command, "config_hash": self.hash, "seed": self.seed}
        h.update(extra)
        return h

    def write(self, name, columns, rows, **extra):
        path = tables.write_table(self.out / name, columns, rows, self.header(**extra))
        log.info("wrote %s", path)
        return path

    def path(self, key):
        p = self.cfg["paths"][key]
        if not p:
            raise DataError(f"no {key} path given (set paths.{key} or --{key.replace('_', '-')})")
        return Path(p)

    def dataset(self):
        ds = load_dataset(self.path("sites"), self.path("maxima"))
        f = self.cfg["filter"]
        ds, report = completeness_filter(ds, f["year_frac"], int(f["min_years"]))
        if report.dropped_sites:
            log.warning("dropped %d site(s) with too few complete years: %s",
                        len(report.dropped_sites), ", ".join(report.dropped_sites))
        if report.empty:
            raise DataError("no site survives the completeness filter")
        return ds

    def artifact(self, name):
        p = self.out / name
        if not p.exists():
            raise DataError(f"missing artifact {p}; run the earlier stage first")
        return p

    def fits(self, ds):
        return tables.read_fit_table(self.artifact(FITS), ds)

    def stack(self, ds):
        fits = self.fits(ds)
        bad = [sid for sid, f in fits.items() if not f.converged]
        if bad:
            raise ConvergenceError(f"Stage-1 fits did not converge at: {', '.join(sorted(bad))}")
        return bootstrap.stack_stage1(ds, fits), fits

    def measurement_cov(self, stack):
        return bootstrap.load_measurement_cov(self.artifact(WFILE), stack)

    def fit_kwargs(self):
        m = self.cfg["lmc"]
        return {"n_starts": int(m["n_starts"]), "rho_init_range": tuple(map(float, m["rho_init_range"])),
                "jobs": self.jobs}

    def model(self, stack, name=MODEL):
        p, doc = lmc.load_model(self.artifact(name), stack)
        return p


def _fit_one(args):
    ser, nonstationary, t_ref = args
    return marginal.fit_gev(ser, nonstationary=nonstationary, t_ref=t_ref)


# ---------------------------------------------------------------------------
# commands

def cmd_fit_stage1(run):
    ds = run.dataset()
    ns = run.cfg["stage1"]["nonstationary_source"]
    t_ref = float(run.cfg["stage1"]["t_ref"])
    src = ds.site_map
    flags = [ns == "both" or src[s.site_id].source == ns for s in ds.series]
    results = pmap(_fit_one, [(s, f, t_ref) for s, f in zip(ds.series, flags)], run.jobs)
    fits = {s.site_id: r for s, r in zip(ds.series, results)}
    failed = sorted(k for k, f in fits.items() if not f.converged)
    run.write(FITS, tables.FIT_COLUMNS, tables.fit_rows(ds, fits))
    _write_trends(run, ds)
    if failed:
        raise ConvergenceError(f"Stage-1 fit did not converge at: {', '.join(failed)}")


def _write_trends(run, ds):
    rows = []
    for ser in sorted(ds.series, key=lambda s: s.site_id):
        t = marginal.trend_test(ser)
        rows.append([ser.site_id, t.s_stat, t.z, t.p_value, t.sen_slope])
    run.write(TRENDS, tables.TREND_COLUMNS, rows)


def cmd_trends(run):
    _write_trends(run, run.dataset())


def cmd_bootstrap_w(run):
    ds = run.dataset()
    stack, fits = run.stack(ds)
    b = run.cfg["bootstrap"]
    reps = bootstrap.block_bootstrap_stage1(ds, fits, int(b["B"]), run.seed, run.jobs)
    log.info("bootstrap: %d replicates kept, %d dropped", reps.replicates.shape[0], reps.n_dropped)
    mc = bootstrap.build_measurement_cov(reps, stack, float(b["taper_km"]),
                                         distance_matrix(stack.sites), seed=run.seed)
    if mc.repaired:
        log.warning("tapered W was not positive definite; eigenvalues clipped")
    path = run.out / WFILE
    bootstrap.save_measurement_cov(mc, path, {"config_hash": run.hash, "B_requested": reps.n_requested})
    log.info("wrote %s", path)


def _fit_and_save(run, stack, w, dist, name, seed):
    p, diag = lmc.fit_lmc(stack, w, dist, seed=seed, **run.fit_kwargs())
    log.info("%s: nll %.6f, best start %d of %d, %.1f s", name, diag.nll, diag.best_start,
             len(diag.nll_per_start), diag.wall_time)
    log.debug("per-start nll %s; messages %s", diag.nll_per_start.tolist(), diag.messages)
    extra = {"config_hash": run.hash, "converged_starts": int(diag.converged_per_start.sum())}
    if p.dim == 6:
        extra["cross_source_correlations"] = list(lmc.cross_source_correlations(p))
    lmc.save_model(p, run.out / name, diag.nll, seed, len(diag.nll_per_start), stack.layout_hash(), extra)
    return p


def cmd_fit_lmc(run):
    ds = run.dataset()
    stack, _ = run.stack(ds)
    mc = run.measurement_cov(stack)
    dist = distance_matrix(stack.sites)
    _fit_and_save(run, stack, mc, dist, MODEL, run.seed)
    if run.cfg["cv"]["baseline"] == "single-source":
        bst, bw, bd = validate.baseline_stack(stack, mc, dist)
        _fit_and_save(run, bst, bw, bd, BASELINE_MODEL, run.seed)


def _t_label(T):
    return krige._fmt_T(T)


def cmd_krige(run):
    ds = run.dataset()
    stack, _ = run.stack(ds)
    mc = run.measurement_cov(stack)
    p = run.model(stack)
    grid = tables.read_grid(run.path("grid"))
    Ts = [float(t) for t in run.cfg["predict"]["T"]]
    rows = krige.krige_grid(p, stack, mc, grid, Ts, int(run.cfg["predict"]["n_draws"]), run.seed,
                            distance_matrix(stack.sites), run.jobs)
    cols = ["point_id", "lat", "lon", "mu", "log_sigma", "xi", "mu_sim", "log_sigma_sim", "xi_sim"]
    for T in Ts:
        t = _t_label(T)
        cols += [f"rl_{t}", f"se_mc_{t}", f"se_delta_{t}"]
    out = []
    for r in rows:
        theta = list(r["theta"]) + [None] * (6 - len(r["theta"]))
        line = [r["point_id"], r["lat"], r["lon"]] + theta
        for T in Ts:
            t = _t_label(T)
            line += [r[f"rl_{t}"], r[f"se_mc_{t}"], r[f"se_delta_{t}"]]
        out.append(line)
    run.write("krige.csv", cols, out)


def _baseline_model(run, stack, w, dist):
    bst, bw, bd = validate.baseline_stack(stack, w, dist)
    path = run.out / BASELINE_MODEL
    if path.exists():
        try:
            return bst, bw, bd, lmc.load_model(path, bst)[0]
        except DataError:
            log.warning("baseline model is stale; refitting")
    return bst, bw, bd, _fit_and_save(run, bst, bw, bd, BASELINE_MODEL, run.seed)


def _report_rows(rows):
    return [[k, j, b, r] for k, j, b, r in rows]


def cmd_loocv(run):
    ds = run.dataset()
    stack, _ = run.stack(ds)
    mc = run.measurement_cov(stack)
    dist = distance_matrix(stack.sites)
    p = run.model(stack)
    T = float(run.cfg["predict"]["T"][0])
    n_draws = int(run.cfg["predict"]["n_draws"])
    joint, rep = validate.loo_block(p, stack, mc, dist, "OBS", T, n_draws, run.seed)
    run.write("loo_sites.csv", tables.LOO_COLUMNS, tables.loo_rows(joint), T=_t_label(T))
    if run.cfg["cv"]["baseline"] == "single-source":
        bst, bw, bd, pb = _baseline_model(run, stack, mc.w, dist)
        base, _ = validate.loo_block(pb, bst, bw, bd, "OBS", T, n_draws, run.seed)
        run.write("loo_sites_baseline.csv", tables.LOO_COLUMNS, tables.loo_rows(base), T=_t_label(T))
        rows, _, _ = validate.compare_reports(joint, base)
        run.write("cv_report.csv", ["metric", "joint", "baseline", "reduction"], _report_rows(rows),
                  T=_t_label(T))
        dec = validate.rmse_decomposition(joint, base, T)
        run.write("rmse_decomposition.csv", ["row", "rmse_rl", "reduction_pct"], dec, T=_t_label(T))
    else:
        run.write("cv_report.csv", ["metric", "joint"], list(rep.metrics().items()), T=_t_label(T))


def cmd_blockcv(run):
    ds = run.dataset()
    stack, _ = run.stack(ds)
    mc = run.measurement_cov(stack)
    dist = distance_matrix(stack.sites)
    cv = run.cfg["cv"]
    if run.cfg["paths"]["blocks"]:
        blocks = tables.read_blocks(run.path("blocks"))
    else:
        blocks = validate.contiguous_blocks([s for s in stack.sites if s.source == "OBS"],
                                            int(cv["n_blocks"]))
    T = float(run.cfg["predict"]["T"][0])
    n_draws = int(run.cfg["predict"]["n_draws"])
    refit = bool(cv["refit"])
    fk = run.fit_kwargs()
    fk.pop("jobs")
    models = [("joint", stack, mc.w, dist, MODEL)]
    if cv["baseline"] == "single-source":
        bst, bw, bd = validate.baseline_stack(stack, mc, dist)
        models.append(("baseline", bst, bw, bd, BASELINE_MODEL))
    rows = []
    for label, st, w, d, model_file in models:
        p_full = None if refit else run.model(st, model_file)
        res = validate.geographic_block_cv(st, w, blocks, d, "OBS", T, refit, p_full, fk,
                                           bool(cv["force"]), n_draws, run.seed, run.jobs)
        for fold in res.folds:
            for k, v in fold["report"].metrics().items():
                rows.append([label, fold["name"], len(fold["results"]), k, v])
        for k, v in res.pooled.metrics().items():
            rows.append([label, "pooled", res.pooled.n_sites, k, v])
    run.write("blockcv.csv", ["model", "fold", "n_sites", "metric", "value"], rows, T=_t_label(T),
              refit=int(refit))


def _truth(run):
    path = run.cfg["simulate"]["truth"]
    if path:
        return lmc.load_model(path)[0]
    return validate.reference_truth()


def _design(run):
    """Sites file when given (identifiability), otherwise the synthetic coastline design."""
    sim = run.cfg["simulate"]
    if run.command != "simulate" and run.cfg["paths"]["sites"]:
        return load_sites(run.path("sites"))
    return validate.coastal_design(int(sim["n_obs"]), int(sim["n_sim"]), int(sim["design_seed"]))


def cmd_simulate(run):
    sim = run.cfg["simulate"]
    p = _truth(run)
    design = _design(run)
    if sim["mode"] == "full":
        out = validate.simulate_dataset(p, design, "full", n_years=int(sim["n_years"]), seed=run.seed)
        save_dataset(out.dataset, run.out / "sites.csv", run.out / "maxima.csv")
        log.info("wrote %s and %s", run.out / "sites.csv", run.out / "maxima.csv")
    else:
        stack = bootstrap.stack_from_triplets(design, {s.id: np.zeros(3) for s in design}, p.dim)
        w = validate.synthetic_w(stack)
        out = validate.simulate_dataset(p, design, "stack", W=w, seed=run.seed)
        st = out.stack
        rows = [[st.sites[st.s_index[m]].id, st.sites[st.s_index[m]].source,
                 bootstrap.PARAM_NAMES[st.p_index[m] % 3], st.values[m]] for m in range(st.n_obs)]
        run.write("synthetic_stack.csv", ["site_id", "source", "q", "value"], rows)
    lat_rows = [[sid] + list(v) for sid, v in sorted(out.latent.items())]
    names = ["mu", "log_sigma", "xi", "mu_sim", "log_sigma_sim", "xi_sim"][:p.dim]
    run.write("synthetic_truth.csv", ["site_id"] + names, lat_rows)


def cmd_identifiability(run):
    p = _truth(run)
    design = _design(run)
    stack = bootstrap.stack_from_triplets(design, {s.id: np.zeros(3) for s in design}, p.dim)
    w = validate.synthetic_w(stack)
    fk = run.fit_kwargs()
    fk.pop("jobs")
    tab = validate.identifiability_study(p, w, design, int(run.cfg["identifiability"]["n_reps"]),
                                         run.seed, fk, run.jobs)
    run.write("identifiability.csv", ["quantity", "true", "median", "sd", "iqr", "q05", "q95"],
              tab.rows, n_failed=tab.n_failed)


def cmd_saturation(run):
    ds = run.dataset()
    stack, _ = run.stack(ds)
    mc = run.measurement_cov(stack)
    fk = run.fit_kwargs()
    fk.pop("jobs")
    sat = run.cfg["saturation"]
    rows = validate.saturation_experiment(stack, mc, sat["sizes"], int(sat["draws_per_size"]),
                                          distance_matrix(stack.sites), run.seed,
                                          float(run.cfg["predict"]["T"][0]), fk,
                                          int(run.cfg["predict"]["n_draws"]), run.jobs)
    run.write("saturation.csv", ["n_sim_sites", "draw", "rmse_rl", "reduction_pct"], rows)


COMMANDS = {
    "fit-stage1": (cmd_fit_stage1, "fit GEV margins per site and run trend tests"),
    "trends": (cmd_trends, "Mann-Kendall tests and Sen slopes per site"),
    "bootstrap-w": (cmd_bootstrap_w, "block-bootstrap the Stage-1 measurement covariance"),
    "fit-lmc": (cmd_fit_lmc, "fit the coregionalization model by multi-start maximum likelihood"),
    "krige": (cmd_krige, "predict parameters and return levels on a grid"),
    "loocv": (cmd_loocv, "leave-one-site-out cross-validation"),
    "blockcv": (cmd_blockcv, "geographic block cross-validation"),
    "simulate": (cmd_simulate, "generate a synthetic dataset"),
    "identifiability": (cmd_identifiability, "recovery of cross-source correlations by simulation"),
    "saturation": (cmd_saturation, "RMSE reduction versus simulation network size"),
}


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")
    g.add_argument("--sites")
    g.add_argument("--maxima")
    g.add_argument("--grid")
    g.add_argument("--blocks", help="CSV with columns block,site_id")
    g.add_argument("--output-dir", dest="output_dir", help=f"defaults to ${OUTPUT_ENV}")
    g.add_argument("-v", "--verbose", action="count", default=0)
    g.add_argument("-q", "--quiet", action="store_true")
    s = common.add_argument_group("stage settings")
    s.add_argument("--nonstationary-source", choices=["OBS", "SIM", "both", "none"])
    s.add_argument("--t-ref", type=float)
    s.add_argument("--B", type=int, help="bootstrap replicates")
    s.add_argument("--taper-km", type=float)
    s.add_argument("--n-starts", type=int)
    s.add_argument("--T", type=float, action="append", help="return period; repeatable")
    s.add_argument("--n-draws", type=int)
    s.add_argument("--baseline", choices=["none", "single-source"])
    s.add_argument("--n-blocks", type=int)
    s.add_argument("--no-refit", action="store_true", help="block CV reuses the full-data fit")
    s.add_argument("--force", action="store_true", help="allow folds with < 4 training sites")
    s.add_argument("--mode", choices=["full", "stack"])
    s.add_argument("--n-obs", type=int)
    s.add_argument("--n-sim", type=int)
    s.add_argument("--n-years", type=int)
    s.add_argument("--truth", help="model JSON used as simulation truth")
    s.add_argument("--n-reps", type=int)
    s.add_argument("--sizes", type=int, nargs="+")
    s.add_argument("--draws-per-size", type=int)

    parser = argparse.ArgumentParser(prog="gevfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        run = Run(args.command, cfg)
        COMMANDS[args.command][0](run)
    except DataError as exc:
        log.error("%s", exc)
        return 2
    except ConvergenceError as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
