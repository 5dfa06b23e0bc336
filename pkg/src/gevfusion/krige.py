"""Cokriging of the latent GEV parameters and return levels at new locations."""

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import lmc
from ._parallel import pmap
from .data import distance_matrix
from .exceptions import ConvergenceError
from .marginal import GevParams, return_level, return_level_array, return_level_gradient

NEG_VAR_TOL = 1e-10


@dataclass(frozen=True)
class KrigingResult:
    theta: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class ReturnLevelEstimate:
    rl: float
    se_mc: float
    se_delta: float
    T: float
    n_draws: int
    seed: int | None


@dataclass(frozen=True)
class Location:
    lat: float
    lon: float
    id: str = ""


class Kriger:
    """Fitted model with ``V`` factorized once, reusable across prediction points."""

    def __init__(self, p, stack, W, dist=None):
        self.p = p
        self.stack = stack
        if dist is None:
            dist = distance_matrix(stack.sites)
        v = lmc.sigma_obs(p, stack, dist) + lmc._w_array(W)
        self.chol, self.jitter = lmc.factorize(v)
        self.chol = np.tril(self.chol)
        r = stack.values - p.beta[stack.p_index]
        self.alpha = solve_triangular(self.chol, solve_triangular(self.chol, r, lower=True),
                                      lower=True, trans="T")
        self.a = p.A
        self.prior = self.a @ self.a.T

    def cross(self, d0):
        """``C`` matrices (n_obs x dim) for site-to-target distances ``d0`` (n_sites x G)."""
        d_rows = d0[self.stack.s_index]
        ap = self.a[self.stack.p_index]
        kern = np.exp(-d_rows[:, :, None] / self.p.rho[None, None, :])
        return np.einsum("mi,mgi,ki->gmk", ap, kern, self.a)

    def predict_many(self, locations, offset=0):
        d0 = distance_matrix(self.stack.sites, locations)
        c = self.cross(d0)
        theta = self.p.beta[None, :] + np.einsum("gmk,m->gk", c, self.alpha)
        out = []
        for g in range(len(locations)):
            z = solve_triangular(self.chol, c[g], lower=True)
            try:
                cov = _clean_cov(self.prior - z.T @ z)
            except ConvergenceError as exc:
                raise ConvergenceError(f"grid point {offset + g}: {exc}") from None
            out.append(KrigingResult(theta[g], cov))
        return out

    def predict(self, location):
        return self.predict_many([location])[0]


def _clean_cov(cov):
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov).copy()
    if np.any(d < -NEG_VAR_TOL):
        raise ConvergenceError(f"negative kriging variance {d.min():.3e}; the fit is broken")
    neg = d < 0
    if neg.any():
        idx = np.flatnonzero(neg)
        cov[idx, idx] = 0.0
    return cov


def krige_point(p, stack, W, s0, dist=None):
    """Kriging mean and covariance of all latent components at location ``s0``."""
    return Kriger(p, stack, W, dist).predict(s0)


def _sample_psd(mean, cov, n_draws, rng):
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.max(np.abs(evals)))) if evals.size else 1.0
    if evals.min(initial=0.0) < -NEG_VAR_TOL * scale:
        raise ConvergenceError("posterior covariance is not positive semidefinite")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = rng.standard_normal((n_draws, len(mean)))
    return mean + z @ root.T


def return_level_from_kriging(kr, T, n_draws=10000, seed=0):
    """Return level at the kriged parameters with delta-method and Monte Carlo SEs.

    Uses the first three components and their covariance block.
    """
    theta = np.asarray(kr.theta[:3], dtype=float)
    cov = np.asarray(kr.cov[:3, :3], dtype=float)
    gp = GevParams(*theta)
    rl = return_level(gp, T)
    grad = return_level_gradient(gp, T)
    se_delta = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    draws = _sample_psd(theta, cov, n_draws, np.random.default_rng(seed))
    rls = return_level_array(draws[:, 0], draws[:, 1], draws[:, 2], T)
    se_mc = float(np.std(rls, ddof=1)) if n_draws > 1 else 0.0
    return ReturnLevelEstimate(rl, se_mc, se_delta, float(T), int(n_draws), seed)


def point_seed(seed, point_id):
    """Per-point Monte Carlo seed that does not depend on grid order."""
    return int(np.random.SeedSequence([seed, zlib.crc32(str(point_id).encode())]).generate_state(1)[0])


def _krige_chunk(args):
    kg, points, Ts, n_draws, seed, offset = args
    krs = kg.predict_many(points, offset)
    rows = []
    for pt, kr in zip(points, krs):
        row = {"point_id": pt.id, "lat": pt.lat, "lon": pt.lon, "theta": kr.theta}
        for T in Ts:
            est = return_level_from_kriging(kr, T, n_draws, point_seed(seed, pt.id))
            row[f"rl_{_fmt_T(T)}"] = est.rl
            row[f"se_mc_{_fmt_T(T)}"] = est.se_mc
            row[f"se_delta_{_fmt_T(T)}"] = est.se_delta
        rows.append(row)
    return rows


def _fmt_T(T):
    return str(int(T)) if float(T).is_integer() else repr(float(T))


def krige_grid(p, stack, W, grid, T=(100,), n_draws=10000, seed=0, dist=None, jobs=1, chunk=256):
    """Predict every grid point; returns one dict per point in input order.

    ``grid`` holds objects with ``id``, ``lat`` and ``lon``. Each point's Monte
    Carlo draws are seeded from ``(seed, point id)``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty prediction grid")
    Ts = [T] if np.isscalar(T) else list(T)
    kg = Kriger(p, stack, W, dist)
    args = [(kg, grid[i:i + chunk], Ts, n_draws, seed, i) for i in range(0, len(grid), chunk)]
    out = []
    for rows in pmap(_krige_chunk, args, jobs):
        out.extend(rows)
    return out
