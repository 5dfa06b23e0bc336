"""Linear model of coregionalization under partial observation.

The latent field is ``theta(s) = beta + A delta(s)`` with ``A`` lower
triangular and independent unit-variance exponential processes ``delta_i``
of range ``rho_i`` (km). Only the components listed in a
:class:`~gevfusion.bootstrap.StackedObservations` are observed, each with
measurement covariance ``W`` held fixed.

The packed parameter vector is ``(beta, vech(A), log rho)``: 33 entries for
the six-dimensional joint model and 12 for a three-dimensional baseline.
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import lapack

from ._parallel import child_seeds, pmap
from .exceptions import ConvergenceError, DataError

LOG_2PI = math.log(2.0 * math.pi)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LOG_RHO_BOUNDS = (math.log(1.0), math.log(1e6))
_PENALTY = 1e12


def n_params(dim):
    return 2 * dim + dim * (dim + 1) // 2


def dim_from_n_params(n):
    for dim in range(1, 20):
        if n_params(dim) == n:
            return dim
    raise ValueError(f"no LMC dimension has {n} parameters")


@dataclass(frozen=True)
class LmcParams:
    beta: np.ndarray
    a_lower: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).copy()
        a_lower = np.asarray(self.a_lower, dtype=float).copy()
        rho = np.asarray(self.rho, dtype=float).copy()
        dim = len(beta)
        if len(rho) != dim or len(a_lower) != dim * (dim + 1) // 2:
            raise ValueError("inconsistent LMC parameter sizes")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(a_lower)) and np.all(np.isfinite(rho))):
            raise ValueError("LMC parameters must be finite")
        if np.any(rho <= 0):
            raise ValueError("ranges must be strictly positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "a_lower", a_lower)
        object.__setattr__(self, "rho", rho)

    @property
    def dim(self):
        return len(self.beta)

    @property
    def A(self):
        a = np.zeros((self.dim, self.dim))
        a[np.tril_indices(self.dim)] = self.a_lower
        return a

    @property
    def marginal_cov(self):
        a = self.A
        return a @ a.T

    @classmethod
    def from_matrix(cls, beta, A, rho):
        A = np.asarray(A, dtype=float)
        if np.any(np.triu(A, 1) != 0):
            raise ValueError("A must be lower triangular")
        return cls(beta, A[np.tril_indices(A.shape[0])], rho)

    def __eq__(self, other):
        if not isinstance(other, LmcParams):
            return NotImplemented
        return (np.array_equal(self.beta, other.beta) and np.array_equal(self.a_lower, other.a_lower)
                and np.array_equal(self.rho, other.rho))

    __hash__ = None


def pack(p):
    return np.concatenate([p.beta, p.a_lower, np.log(p.rho)])


def unpack(theta, dim=None):
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("packed parameters contain non-finite entries")
    dim = dim or dim_from_n_params(len(theta))
    k = dim * (dim + 1) // 2
    return LmcParams(theta[:dim], theta[dim:dim + k], np.exp(theta[dim + k:]))


@dataclass
class FitDiagnostics:
    nll_per_start: np.ndarray
    converged_per_start: np.ndarray
    best_start: int
    grad_norm_at_opt: float
    n_fn_evals: int
    n_grad_evals: int
    wall_time: float
    messages: list = field(default_factory=list)

    @property
    def nll(self):
        return float(self.nll_per_start[self.best_start])


# ---------------------------------------------------------------------------
# covariance assembly

def cross_cov(p, d):
    """6x6 (or dim x dim) cross-covariance between locations ``d`` km apart."""
    a = p.A
    return (a * np.exp(-d / p.rho)) @ a.T


def sigma_obs(p, stack, dist):
    """Observed coregionalization covariance without forming the full latent matrix."""
    ap = p.A[stack.p_index]
    d = dist[np.ix_(stack.s_index, stack.s_index)]
    out = np.zeros((stack.n_obs, stack.n_obs))
    for i in range(p.dim):
        a = ap[:, i]
        if not np.any(a):
            continue
        out += np.outer(a, a) * np.exp(-d / p.rho[i])
    return out


def _w_array(W):
    return W.w if hasattr(W, "w") else np.asarray(W, dtype=float)


def factorize(v):
    """Cholesky of ``v`` with escalating diagonal jitter.

    Returns ``(lower_factor, jitter_used)``.
    """
    scale = float(np.mean(np.diag(v)))
    tried = []
    for tau in JITTERS:
        m = v if tau == 0.0 else v + tau * scale * np.eye(len(v))
        c, info = lapack.dpotrf(m, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return c, tau
        tried.append(tau)
    raise ConvergenceError(f"V is not positive definite after jitters {tried}")


class _Workspace:
    """Precomputed per-dataset quantities shared by likelihood evaluations."""

    def __init__(self, stack, W, dist, dim=None):
        self.values = stack.values
        self.p_index = stack.p_index
        self.dim = dim or stack.n_latent
        self.n = stack.n_obs
        self.d = np.ascontiguousarray(dist[np.ix_(stack.s_index, stack.s_index)])
        n_sites = dist.shape[0]
        reps, rem = divmod(self.n, n_sites)
        # parameter-major stacks repeat the site order in every block; tiling
        # the site-level kernel is then much cheaper than exponentiating n^2 entries
        self.tile_reps = reps if rem == 0 and np.array_equal(stack.s_index, np.tile(np.arange(n_sites), reps)) else 0
        self.site_d = np.asarray(dist, dtype=float)
        self.w = _w_array(W)
        if self.w.shape != (self.n, self.n):
            raise DataError(f"W is {self.w.shape} but the stack has {self.n} observations")
        self.groups = [np.flatnonzero(self.p_index == j) for j in range(self.dim)]
        self.tril = np.tril_indices(self.dim)

    def kernels(self, rho):
        if self.tile_reps:
            return [np.tile(np.exp(-self.site_d / r), (self.tile_reps, self.tile_reps)) for r in rho]
        return [np.exp(-self.d / r) for r in rho]

    def nll_grad(self, theta, want_grad=True):
        p = unpack(theta, self.dim)
        ap = p.A[self.p_index]
        ek = self.kernels(p.rho)
        v = self.w.copy()
        for i in range(self.dim):
            a = ap[:, i]
            if np.any(a):
                v += np.outer(a, a) * ek[i]
        c, _ = factorize(v)
        r = self.values - p.beta[self.p_index]
        alpha = lapack.dpotrs(c, r, lower=1)[0]
        logdet = 2.0 * np.sum(np.log(np.diag(c)))
        f = 0.5 * (self.n * LOG_2PI + logdet + r @ alpha)
        if not want_grad:
            return f, None
        vinv, info = lapack.dpotri(c, lower=1)
        if info != 0:
            raise ConvergenceError("inverse of V failed")
        vinv = np.tril(vinv) + np.tril(vinv, -1).T
        k = vinv - np.outer(alpha, alpha)
        g_beta = np.array([-alpha[g].sum() for g in self.groups])
        g_a = np.zeros((self.dim, self.dim))
        g_lrho = np.zeros(self.dim)
        for i in range(self.dim):
            a = ap[:, i]
            if not np.any(a):
                continue
            ke = k * ek[i]
            gvec = ke @ a
            for j in range(i, self.dim):
                g_a[j, i] = gvec[self.groups[j]].sum()
            g_lrho[i] = 0.5 * a @ ((ke * self.d) @ a) / p.rho[i]
        return f, np.concatenate([g_beta, g_a[self.tril], g_lrho])

    def objective(self, theta):
        try:
            f, g = self.nll_grad(theta)
        except ConvergenceError:
            return _PENALTY, np.zeros_like(theta)
        if not np.isfinite(f):
            return _PENALTY, np.zeros_like(theta)
        return f, g


def nll(theta, stack, W, dist):
    """Gaussian negative log-likelihood of the stacked estimates."""
    theta = pack(theta) if isinstance(theta, LmcParams) else np.asarray(theta, dtype=float)
    return _Workspace(stack, W, dist).nll_grad(theta, want_grad=False)[0]


def nll_grad(theta, stack, W, dist):
    """Analytic gradient of :func:`nll` with respect to the packed parameters."""
    theta = pack(theta) if isinstance(theta, LmcParams) else np.asarray(theta, dtype=float)
    return _Workspace(stack, W, dist).nll_grad(theta)[1]


def nll_and_grad(theta, stack, W, dist):
    theta = pack(theta) if isinstance(theta, LmcParams) else np.asarray(theta, dtype=float)
    return _Workspace(stack, W, dist).nll_grad(theta)


# ---------------------------------------------------------------------------
# fitting

def start_values(stack, rng, rho_init_range=(50.0, 5000.0), dim=None):
    """Data-driven start: group means, block-diagonal loadings, log-uniform ranges."""
    dim = dim or stack.n_latent
    beta = np.zeros(dim)
    sd = np.ones(dim)
    for j in range(dim):
        vals = stack.values[stack.p_index == j]
        if len(vals):
            beta[j] = vals.mean()
            sd[j] = vals.std(ddof=1) if len(vals) > 1 else 1.0
        sd[j] = sd[j] if sd[j] > 0 else 1.0
    a = np.zeros((dim, dim))
    for j in range(dim):
        a[j, :j] = rng.normal(0.0, 0.1 * sd[j], j)
        a[j, j] = sd[j]
    lo, hi = rho_init_range
    rho = np.exp(rng.uniform(math.log(lo), math.log(hi), dim))
    return pack(LmcParams.from_matrix(beta, a, rho))


def _run_start(args):
    stack, w, dist, x0, gtol, ftol, maxiter = args
    ws = _Workspace(stack, w, dist)
    bounds = [(None, None)] * (len(x0) - ws.dim) + [LOG_RHO_BOUNDS] * ws.dim
    x0 = x0.copy()
    x0[-ws.dim:] = np.clip(x0[-ws.dim:], *LOG_RHO_BOUNDS)
    res = optimize.minimize(ws.objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"gtol": gtol, "ftol": ftol, "maxiter": maxiter, "maxfun": 4 * maxiter})
    f, g = ws.objective(res.x)
    ok = bool(res.success) and f < _PENALTY
    return res.x, float(f), ok, float(np.max(np.abs(g))), int(res.nfev), str(res.message)


def fit_lmc(stack, W, dist, n_starts=20, seed=0, rho_init_range=(50.0, 5000.0), jobs=1,
            extra_starts=None, gtol=1e-5, ftol=1e-10, maxiter=3000):
    """Multi-start L-BFGS-B maximum likelihood fit.

    Parameters
    ----------
    stack : StackedObservations
    W : MeasurementCov or ndarray
    dist : ndarray
        Site distance matrix (km) in the stack's site order.
    n_starts : int
        Random starts; ranges drawn log-uniformly from ``rho_init_range``.
    extra_starts : list of LmcParams, optional
        Additional deterministic starts tried after the random ones.

    Returns
    -------
    (LmcParams, FitDiagnostics)
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    t0 = time.perf_counter()
    w = _w_array(W)
    starts = [start_values(stack, np.random.default_rng(s), rho_init_range)
              for s in child_seeds(seed, n_starts)]
    starts += [pack(p) for p in (extra_starts or [])]
    jobs_args = [(stack, w, dist, x0, gtol, ftol, maxiter) for x0 in starts]
    results = pmap(_run_start, jobs_args, jobs)
    nlls = np.array([r[1] for r in results])
    conv = np.array([r[2] for r in results])
    if not conv.any():
        raise ConvergenceError(f"no start converged: {sorted({r[5] for r in results})}")
    masked = np.where(conv, nlls, np.inf)
    best = int(np.argmin(masked))
    x, _, _, gnorm, _, _ = results[best]
    nfev = int(sum(r[4] for r in results))
    diag = FitDiagnostics(nlls, conv, best, gnorm, nfev, nfev, time.perf_counter() - t0,
                          [r[5] for r in results])
    return unpack(x, stack.n_latent), diag


def cross_source_correlations(p):
    """Correlations between matching observation- and simulation-source parameters."""
    if p.dim != 6:
        raise ValueError("cross-source correlations need the six-dimensional model")
    m = p.marginal_cov
    d = np.diag(m)
    if np.any(d <= 0):
        raise ValueError("zero marginal variance")
    return tuple(float(m[j, j + 3] / math.sqrt(d[j] * d[j + 3])) for j in range(3))


# ---------------------------------------------------------------------------
# persistence

def save_model(p, path, nll_value=None, seed=None, n_starts=None, layout_hash=None, extra=None):
    doc = {
        "dim": p.dim,
        "beta": p.beta.tolist(),
        "A": p.A.tolist(),
        "rho": p.rho.tolist(),
        "nll": nll_value,
        "seed": seed,
        "n_starts": n_starts,
        "layout_hash": layout_hash,
    }
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path, stack=None):
    """Read a fitted model; with ``stack`` the recorded layout hash must match."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if stack is not None and doc.get("layout_hash") not in (None, stack.layout_hash()):
        raise DataError(f"{path}: stale model, layout hash {doc['layout_hash']} != {stack.layout_hash()}")
    return LmcParams.from_matrix(doc["beta"], doc["A"], doc["rho"]), doc
