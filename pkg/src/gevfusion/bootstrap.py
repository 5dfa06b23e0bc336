"""Stacking of Stage-1 estimates and the bootstrap measurement-error covariance.

The stack is parameter-major: all location estimates (sites in canonical
order), then all log-scale estimates, then all shape estimates. Row ``m``
observes latent component ``p_index[m]`` at site ``s_index[m]``; both indices
are zero-based. In the joint model components 0-2 are the observation-source
parameters and 3-5 the simulation-source parameters.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import marginal
from ._parallel import child_seeds, pmap
from .data import distance_matrix
from .exceptions import ConvergenceError, DataError

PARAM_NAMES = ("mu", "log_sigma", "xi")
MIN_REPLICATES = 50


@dataclass
class StackedObservations:
    values: np.ndarray
    p_index: np.ndarray
    s_index: np.ndarray
    sites: list
    n_latent: int = 6
    source_offset: dict = field(default_factory=lambda: {"OBS": 0, "SIM": 3})

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.p_index = np.asarray(self.p_index, dtype=int)
        self.s_index = np.asarray(self.s_index, dtype=int)
        if not (len(self.values) == len(self.p_index) == len(self.s_index)):
            raise DataError("stack arrays differ in length")

    @property
    def n_obs(self):
        return len(self.values)

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def site_ids(self):
        return [s.id for s in self.sites]

    def layout_hash(self):
        h = hashlib.sha256()
        h.update(str(self.n_latent).encode())
        for s in self.sites:
            h.update(f"{s.id}|{s.source}|{s.lat!r}|{s.lon!r};".encode())
        h.update(self.p_index.tobytes())
        h.update(self.s_index.tobytes())
        return h.hexdigest()[:16]

    def rows_of_site(self, site_idx):
        """Stack rows belonging to one site, in parameter order."""
        return np.flatnonzero(self.s_index == site_idx)

    def subset(self, site_ids):
        """Stack restricted to ``site_ids`` (canonical order kept) and the row map used."""
        keep = set(site_ids)
        new_sites = [s for s in self.sites if s.id in keep]
        old_to_new = {self.site_ids.index(s.id): i for i, s in enumerate(new_sites)}
        rows = np.array([m for m in range(self.n_obs) if self.s_index[m] in old_to_new], dtype=int)
        sub = StackedObservations(
            self.values[rows],
            self.p_index[rows],
            np.array([old_to_new[k] for k in self.s_index[rows]], dtype=int),
            new_sites,
            self.n_latent,
            dict(self.source_offset),
        )
        return sub, rows

    def single_source(self, source):
        """Stack of one source with components renumbered 0-2 (the 3-dimensional baseline)."""
        ids = [s.id for s in self.sites if s.source == source]
        sub, rows = self.subset(ids)
        sub.p_index = sub.p_index - self.source_offset[source]
        sub.n_latent = 3
        sub.source_offset = {source: 0}
        return sub, rows

    def with_values(self, values):
        return StackedObservations(np.asarray(values, dtype=float), self.p_index.copy(),
                                   self.s_index.copy(), list(self.sites), self.n_latent,
                                   dict(self.source_offset))


def build_layout(sites, n_latent=6):
    """Index arrays for the canonical parameter-major layout of ``sites``."""
    sites = sorted(sites, key=lambda s: s.id)
    n_sites = len(sites)
    offsets = {"OBS": 0, "SIM": 3} if n_latent == 6 else {s.source: 0 for s in sites}
    if n_latent == 3 and len(offsets) > 1:
        raise DataError("a 3-dimensional layout needs single-source sites")
    p = np.concatenate([[g + offsets[s.source] for s in sites] for g in range(3)]).astype(int)
    s = np.tile(np.arange(n_sites), 3)
    return sites, p, s, offsets


def stack_stage1(ds, fits, n_latent=6):
    """Stack per-site Stage-1 triplets (mu0, log sigma, xi); trend slopes are dropped.

    ``fits`` maps site id to :class:`~gevfusion.marginal.GevFitResult`.
    """
    sites, p, s, offsets = build_layout(ds.sites, n_latent)
    for site in sites:
        fit = fits.get(site.id)
        if fit is None:
            raise DataError(f"no Stage-1 fit for site {site.id}")
        if not fit.converged:
            raise DataError(f"Stage-1 fit did not converge at site {site.id}")
    trip = np.array([fits[site.id].params.triplet for site in sites])
    return StackedObservations(trip.T.reshape(-1), p, s, sites, n_latent, offsets)


def stack_from_triplets(sites, triplets, n_latent=6):
    """Stack arbitrary per-site triplets given as a mapping site id -> 3-vector."""
    sites, p, s, offsets = build_layout(sites, n_latent)
    trip = np.array([np.asarray(triplets[site.id], dtype=float) for site in sites])
    return StackedObservations(trip.T.reshape(-1), p, s, sites, n_latent, offsets)


# ---------------------------------------------------------------------------
# block bootstrap

def _source_year_sets(ds):
    smap = ds.series_map
    out = {}
    for source in ("OBS", "SIM"):
        ids = sorted(s.id for s in ds.sites if s.source == source)
        if not ids:
            continue
        years = np.unique(np.concatenate([smap[i].years for i in ids]))
        out[source] = (ids, years)
    return out


def draw_years(year_sets, rng):
    """One resample (with replacement) of the year set of each source."""
    return {src: years[rng.integers(0, len(years), len(years))] for src, (_, years) in year_sets.items()}


def refit_on_years(ds, fits, order, draws):
    """Stage-1 refit of every site on the resampled years of its source.

    Years a site lacks are skipped. Returns the stacked triplets, or ``None``
    when any site fails.
    """
    smap = ds.series_map
    source_of = {s.id: s.source for s in ds.sites}
    trip = np.empty((len(order), 3))
    for i, sid in enumerate(order):
        ser = smap[sid]
        want = draws[source_of[sid]]
        pos = np.clip(np.searchsorted(ser.years, want), 0, len(ser.years) - 1)
        hit = ser.years[pos] == want
        yrs, vals = ser.years[pos[hit]], ser.values[pos[hit]]
        fit = fits[sid]
        try:
            refit = marginal.fit_gev((yrs, vals), nonstationary=fit.nonstationary,
                                     t_ref=fit.params.t_ref, x0=marginal.packed(fit))
        except DataError:
            return None
        if not refit.converged:
            return None
        trip[i] = refit.params.triplet
    return trip.T.reshape(-1)


def _replicate(ds, fits, order, year_sets, seed):
    return refit_on_years(ds, fits, order, draw_years(year_sets, np.random.default_rng(seed)))


def _bootstrap_chunk(args):
    ds, fits, order, year_sets, seeds = args
    return [_replicate(ds, fits, order, year_sets, s) for s in seeds]


@dataclass
class BootstrapReplicates:
    replicates: np.ndarray
    n_requested: int
    n_dropped: int
    seed: int


def block_bootstrap_stage1(ds, fits, B=500, seed=0, jobs=1, max_drop_frac=0.2):
    """Resample years within each source and refit Stage 1 at every site.

    One year draw per source per replicate is shared by all sites of that
    source; draws are independent between sources. Replicates where any site
    fails to converge are dropped.

    Returns
    -------
    BootstrapReplicates
        ``replicates`` has one row per surviving replicate in stack order.
    """
    if B < 1:
        raise ValueError("B must be positive")
    year_sets = _source_year_sets(ds)
    for source, (_, years) in year_sets.items():
        if len(years) < 10:
            raise DataError(f"source {source} has fewer than 10 years to resample")
    order = sorted(s.id for s in ds.sites)
    seeds = child_seeds(seed, B)
    n_chunks = max(1, min(B, (jobs or 1) * 4))
    chunks = [seeds[i::n_chunks] for i in range(n_chunks)]
    results = pmap(_bootstrap_chunk, [(ds, fits, order, year_sets, c) for c in chunks], jobs)
    rows = [None] * B
    for k, res in enumerate(results):
        for j, r in enumerate(res):
            rows[k + j * n_chunks] = r
    kept = [r for r in rows if r is not None]
    dropped = B - len(kept)
    if dropped > max_drop_frac * B:
        raise ConvergenceError(f"{dropped} of {B} bootstrap replicates had non-converged fits")
    reps = np.array(kept) if kept else np.empty((0, 3 * len(order)))
    return BootstrapReplicates(reps, B, dropped, seed)


# ---------------------------------------------------------------------------
# tapering and repair

def wendland_c4(d, taper_km):
    """Wendland C4 taper (1 - r)_+^6 (35 r^2 + 18 r + 3) / 3 with r = d / taper_km."""
    if taper_km <= 0:
        raise ValueError("taper range must be positive")
    r = np.asarray(d, dtype=float) / taper_km
    out = np.where(r < 1.0, (1.0 - np.minimum(r, 1.0)) ** 6 * (35.0 * r * r + 18.0 * r + 3.0) / 3.0, 0.0)
    return out if np.ndim(out) else float(out)


def spd_repair(m):
    """Clip eigenvalues below ``1e-8 * lambda_max``.

    Returns ``(matrix, repaired)``; the input is returned untouched when it is
    already above the floor.
    """
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.shape[0] != m.shape[1] or np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * scale:
        raise ValueError("spd_repair needs a symmetric matrix")
    evals, evecs = np.linalg.eigh(m)
    eps = 1e-8 * max(evals.max(), 0.0)
    if evals.min() >= eps and eps > 0:
        return m, False
    clipped = np.maximum(evals, eps)
    out = (evecs * clipped) @ evecs.T
    return 0.5 * (out + out.T), True


@dataclass
class MeasurementCov:
    w: np.ndarray
    taper_km: float
    b_replicates: int
    repaired: bool
    seed: int | None = None
    layout_hash: str | None = None

    @property
    def n_obs(self):
        return self.w.shape[0]

    def restrict(self, rows):
        rows = np.asarray(rows, dtype=int)
        return MeasurementCov(self.w[np.ix_(rows, rows)], self.taper_km, self.b_replicates,
                              self.repaired, self.seed, None)


def build_measurement_cov(replicates, stack, taper_km=300.0, dist=None, seed=None):
    """Tapered, SPD-repaired empirical covariance of bootstrap replicates.

    Parameters
    ----------
    replicates : ndarray or BootstrapReplicates
        Rows are replicate stacks in the layout of ``stack``.
    taper_km : float
        Wendland taper range in km; entries for site pairs at least this far
        apart are exactly zero.
    """
    if isinstance(replicates, BootstrapReplicates):
        seed = replicates.seed if seed is None else seed
        replicates = replicates.replicates
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim != 2 or reps.shape[0] < MIN_REPLICATES:
        raise ConvergenceError(f"at least {MIN_REPLICATES} bootstrap replicates required, got {reps.shape[0]}")
    if reps.shape[1] != stack.n_obs:
        raise DataError("replicate width does not match the stack")
    centred = reps - reps.mean(axis=0)
    cov = centred.T @ centred / (reps.shape[0] - 1)
    if dist is None:
        dist = distance_matrix(stack.sites)
    taper = wendland_c4(dist[np.ix_(stack.s_index, stack.s_index)], taper_km)
    w = 0.5 * ((cov * taper) + (cov * taper).T)
    w, repaired = spd_repair(w)
    if repaired:
        # restore exact zeros beyond the taper range, then shift if that broke PSD
        w = np.where(taper > 0, w, 0.0)
        lo = np.linalg.eigvalsh(w).min()
        floor = 1e-8 * np.linalg.eigvalsh(w).max()
        if lo < floor:
            w = w + (floor - lo) * np.eye(len(w))
    return MeasurementCov(w, float(taper_km), int(reps.shape[0]), repaired, seed, stack.layout_hash())


def save_measurement_cov(mc, path, extra_header=None):
    """Upper-triangle ``m,n,value`` triplets after a ``#`` header block."""
    n = mc.n_obs
    lines = [
        f"# n_obs={n}",
        f"# lambda_km={mc.taper_km!r}",
        f"# B={mc.b_replicates}",
        f"# seed={mc.seed}",
        f"# repaired={int(mc.repaired)}",
        f"# layout_hash={mc.layout_hash}",
    ]
    for k, v in (extra_header or {}).items():
        lines.append(f"# {k}={v}")
    lines.append("m,n,value")
    iu, ju = np.triu_indices(n)
    vals = mc.w[iu, ju]
    nz = vals != 0.0
    lines.extend(f"{i},{j},{v!r}" for i, j, v in zip(iu[nz], ju[nz], vals[nz].tolist()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_measurement_cov(path, stack=None):
    """Read a W file; with ``stack`` the recorded layout must match."""
    header = {}
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                header[k.strip()] = v.strip()
            elif line != "m,n,value":
                i, j, v = line.split(",")
                triplets.append((int(i), int(j), float(v)))
    try:
        n = int(header["n_obs"])
    except (KeyError, ValueError):
        raise DataError(f"{path}: missing n_obs header") from None
    w = np.zeros((n, n))
    for i, j, v in triplets:
        w[i, j] = v
        w[j, i] = v
    seed = header.get("seed")
    mc = MeasurementCov(w, float(header.get("lambda_km", "nan")), int(header.get("B", 0)),
                        header.get("repaired") == "1",
                        None if seed in (None, "None") else int(seed), header.get("layout_hash"))
    if stack is not None:
        if n != stack.n_obs:
            raise DataError(f"{path}: W has n_obs={n} but the stack has {stack.n_obs}")
        if mc.layout_hash not in (None, "None") and mc.layout_hash != stack.layout_hash():
            raise DataError(f"{path}: stale W, layout hash {mc.layout_hash} != {stack.layout_hash()}")
    return mc
