"""CSV tables written and read by the command-line pipeline.

Every table starts with ``#`` comment lines carrying provenance (command,
config hash, seed); readers skip them.
"""

import csv
import math
from pathlib import Path

import numpy as np

from .data import _skip_comments
from .exceptions import DataError
from .krige import Location
from .marginal import GevFitResult, GevParams

FIT_COLUMNS = ["site_id", "source", "mu0", "mu1", "log_sigma", "xi", "se_mu0", "se_mu1",
               "se_log_sigma", "se_xi", "nll", "converged", "n_used", "t_ref"]
TREND_COLUMNS = ["site_id", "s_stat", "z", "p_value", "sen_slope"]
LOO_COLUMNS = ["site_id", "q", "pred", "pred_sd", "obs", "pit", "lpd"]


def fmt(x):
    """Stable text form: ``repr`` for floats, blank for missing values."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, np.integer):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_table(path, columns, rows, header=None):
    """Write ``rows`` (sequences in column order) after ``# key=value`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def read_table(path, required=()):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def read_header(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            out[k.strip()] = v.strip()
    return out


def _opt(x):
    return None if x in ("", None) else float(x)


def fit_rows(ds, fits):
    smap = ds.site_map
    rows = []
    for sid in sorted(fits):
        f = fits[sid]
        p = f.params
        se = f.se
        rows.append([sid, smap[sid].source, p.mu0, p.mu1, p.log_sigma, p.xi, se.get("mu0"),
                     se.get("mu1"), se.get("log_sigma"), se.get("xi"), f.nll, f.converged,
                     f.n_used, f.t_ref])
    return rows


def read_fit_table(path, ds=None):
    """Stage-1 fits keyed by site id; with ``ds`` the site sets must agree."""
    rows = read_table(path, FIT_COLUMNS)
    fits = {}
    for i, r in enumerate(rows, start=2):
        try:
            t_ref = _opt(r["t_ref"])
            params = GevParams(float(r["mu0"]), float(r["log_sigma"]), float(r["xi"]),
                               mu1=_opt(r["mu1"]), t_ref=t_ref if t_ref is not None else 2000.0)
            se = {k: float(r[f"se_{k}"]) for k in ("mu0", "mu1", "log_sigma", "xi") if r[f"se_{k}"]}
            fits[r["site_id"]] = GevFitResult(params, float(r["nll"]), r["converged"] == "1",
                                              int(r["n_used"]), se, t_ref)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: row {i}: {exc}") from None
    if ds is not None and set(fits) != {s.id for s in ds.sites}:
        raise DataError(f"{path}: stale fit table, site set differs from the dataset")
    return fits


def read_grid(path):
    rows = read_table(path, ["point_id", "lat", "lon"])
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            lat, lon = float(r["lat"]), float(r["lon"])
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: {exc}") from None
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise DataError(f"{path}: row {i}: coordinates out of range")
        out.append(Location(lat, lon, r["point_id"]))
    if not out:
        raise DataError(f"{path}: empty prediction grid")
    return out


def read_blocks(path):
    """Block file with columns ``block,site_id``; blocks keep first-seen order."""
    rows = read_table(path, ["block", "site_id"])
    blocks = {}
    for r in rows:
        blocks.setdefault(r["block"], []).append(r["site_id"])
    return list(blocks.items())


def loo_rows(results):
    rows = []
    for r in results:
        for q in ("mu", "log_sigma", "xi", "rl"):
            rows.append([r.site_id, q, r.pred(q), r.pred_sd(q), r.obs(q), r.pit[q], r.lpd])
    return rows
