"""Nested Laplace approximation: hyperparameter posterior, grid, marginals.

The hyperparameter log-posterior at ``theta`` is evaluated as

    log pi(theta) + log pi(x* | theta) + log pi(y | x*) - log pi_G(x* | theta, y)

at the mode ``x*`` of the Gaussian approximation. Normalising constants that
do not depend on ``theta`` are dropped only where noted (the jitter terms of
intrinsic components); the likelihood keeps all of its constants.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.optimize import brentq, minimize
from scipy.special import ndtr

from .approx import GaussianApprox, fit
from .errors import (
    GridExplosion,
    GuardExceeded,
    LaplaceGMRFError,
    NewtonDiverged,
    NonPDHessian,
    NotPositiveDefinite,
    OptimDiverged,
    SchemaError,
)
from .gmrf import LOG_2PI, constrain_sum_to_zero, factorize, solve
from .latent import HyperParam, LatentModelSpec, assemble_prior, log_prior_theta, resolve_theta
from .likelihood import ObservationModel
from .marginal import QUANTILE_LEVELS, Marginal

log = logging.getLogger(__name__)

GRID_STEP = 1.0
GRID_THRESHOLD = 2.5
MAX_GRID_POINTS = 10_000
FD_STEP = 1e-4
SUPPORT_POINTS = 75
SUPPORT_WIDTH = 5.0
LAPLACE_N_MAX = 50
#: standardised evaluation points per grid point for the laplace strategy
LAPLACE_POINTS = 21
CONSTANT_CONVENTION = (
    "log posterior of theta keeps all likelihood and Gaussian normalising constants; "
    "theta-free jitter constants of intrinsic components are dropped"
)


@dataclass(frozen=True)
class LatentGaussianModel:
    """A latent model paired with its observation model."""

    latent: LatentModelSpec
    obs: ObservationModel

    def __post_init__(self):
        if self.obs.A.shape[1] != self.latent.total_dim:
            raise SchemaError(f"A has {self.obs.A.shape[1]} columns but the latent field has dimension {self.latent.total_dim}")
        names = [h.name for h in self.hypers]
        if len(set(names)) != len(names):
            raise SchemaError("latent and observation hyperparameter names collide")

    @property
    def hypers(self) -> tuple:
        return self.latent.hypers + self.obs.hypers

    @property
    def free_hypers(self) -> tuple:
        return tuple(h for h in self.hypers if not h.fixed)

    @property
    def dim_theta(self) -> int:
        return len(self.free_hypers)

    @property
    def n(self) -> int:
        return self.latent.total_dim

    def initial_theta(self) -> np.ndarray:
        return np.array([h.initial for h in self.free_hypers], dtype=float)

    def split(self, theta):
        values = resolve_theta(self.hypers, theta)
        lat = {h.name: values[h.name] for h in self.latent.hypers}
        obs = {h.name: values[h.name] for h in self.obs.hypers}
        return values, lat, obs


class PosteriorTerms(NamedTuple):
    log_prior_theta: float
    log_prior_x: float
    loglik: float
    log_gauss: float


def log_post_theta(theta, model: LatentGaussianModel, x0=None, *, with_terms: bool = False):
    """Laplace approximation to ``log pi(theta | y)`` (unnormalised).

    Returns ``(value, GaussianApprox)``; with ``with_terms=True`` the four
    additive pieces are returned as a third element.
    """
    values, lat, obsv = model.split(theta)
    Q, mu, corr = assemble_prior(model.latent, lat)
    C = model.latent.constraint_matrix()
    ga = fit(Q, mu, model.obs, obsv, x0, constraints=C)
    Fq = factorize(Q)
    r = ga.mode - mu
    lp_x = 0.5 * (Fq.logdet + corr) - 0.5 * model.n * LOG_2PI - 0.5 * float(r @ Q.matvec(r))
    if C is not None:
        _, info = constrain_sum_to_zero(mu, Fq, C)
        lp_x += info.log_density_correction
    lp_theta = log_prior_theta(model.hypers, values)
    log_gauss = ga.log_norm_const
    value = lp_theta + lp_x + ga.loglik - log_gauss
    if with_terms:
        return value, ga, PosteriorTerms(lp_theta, lp_x, ga.loglik, log_gauss)
    return value, ga


# --------------------------------------------------------------------------
# optimisation


def _fd_gradient(f, x, h=FD_STEP):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_hessian(f, x, h=FD_STEP, f0=None):
    """Central finite-difference Hessian of a scalar function."""
    d = x.size
    H = np.empty((d, d))
    f0 = f(x) if f0 is None else f0
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h**2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h * h)
    return 0.5 * (H + H.T)


@dataclass
class OptimResult:
    theta: np.ndarray
    hessian: np.ndarray
    log_post: float
    n_eval: int
    hessian_fallback: bool
    fit: GaussianApprox | None
    message: str = ""


def optimize_theta(model: LatentGaussianModel, theta_init=None, *, gtol: float = 1e-6, h: float = FD_STEP) -> OptimResult:
    """Maximise the hyperparameter log-posterior.

    BFGS with central finite-difference gradients, followed by a few Newton
    polishing steps on the finite-difference Hessian. The returned Hessian is
    the negative FD Hessian at the optimum; if it is not positive definite it
    is replaced by ``diag(|H_jj|)`` and ``hessian_fallback`` is set.
    """
    d = model.dim_theta
    if d == 0:
        val, ga = log_post_theta([], model)
        return OptimResult(np.zeros(0), np.zeros((0, 0)), val, 1, False, ga)
    theta0 = model.initial_theta() if theta_init is None else np.asarray(theta_init, dtype=float)
    if not np.all(np.isfinite(theta0)):
        raise OptimDiverged("initial theta is not finite")
    state = {"x": None, "n": 0, "best": (-np.inf, None, None)}

    def neg(theta):
        state["n"] += 1
        try:
            val, ga = log_post_theta(theta, model, state["x"])
        except (NewtonDiverged, NotPositiveDefinite) as exc:
            log.debug("log_post_theta failed at %s: %s", theta, exc)
            return np.inf
        state["x"] = ga.mode
        if val > state["best"][0]:
            state["best"] = (val, np.array(theta, dtype=float), ga)
        return -val

    res = minimize(neg, theta0, jac=lambda t: _fd_gradient(neg, t, h), method="BFGS", options={"gtol": gtol, "maxiter": 200})
    theta = np.asarray(res.x, dtype=float)
    if not np.all(np.isfinite(theta)) or not np.isfinite(res.fun):
        raise OptimDiverged(f"hyperparameter optimisation failed: {res.message}")
    # Newton polish on the finite-difference Hessian of the negated objective
    for _ in range(8):
        f0 = neg(theta)
        Hn = fd_hessian(neg, theta, h, f0)
        if not np.all(np.isfinite(Hn)) or np.any(np.linalg.eigvalsh(Hn) <= 0):
            break
        step = -np.linalg.solve(Hn, _fd_gradient(neg, theta, h))
        cand = theta + step
        if neg(cand) > f0:
            break
        theta = cand
        if np.max(np.abs(step)) < 1e-7:
            break
    f0 = neg(theta)
    H = fd_hessian(neg, theta, h, f0)
    fallback = False
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        fallback = True
        H = np.diag(np.abs(np.diag(H)))
        if np.any(np.diag(H) <= 0):
            H = H + np.eye(d)
        warnings.warn("negative Hessian at the mode is not positive definite; using |diag|", NonPDHessian, stacklevel=2)
    val, ga = log_post_theta(theta, model, state["x"])
    return OptimResult(theta, H, val, state["n"], fallback, ga, str(res.message))


# --------------------------------------------------------------------------
# grid exploration


class GridPoint(NamedTuple):
    theta: np.ndarray
    z: tuple
    log_post: float
    weight: float


@dataclass(frozen=True, eq=False)
class ThetaGrid:
    mode_theta: np.ndarray
    hessian: np.ndarray
    scaling: np.ndarray
    points: tuple
    step: float
    drop_threshold: float
    fits: tuple = field(repr=False, default=())
    warnings: tuple = ()

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.points]).reshape(len(self.points), -1)

    @property
    def dim(self) -> int:
        return self.mode_theta.size


def _normalised_weights(log_posts):
    lp = np.asarray(log_posts, dtype=float)
    w = np.exp(lp - lp.max())
    total = math.fsum(w)
    return w / total


def explore_grid(
    theta_star,
    H,
    model: LatentGaussianModel | None = None,
    *,
    log_post=None,
    step: float = GRID_STEP,
    threshold: float = GRID_THRESHOLD,
    max_points: int = MAX_GRID_POINTS,
    x0=None,
    n_jobs: int = 1,
) -> ThetaGrid:
    """Explore ``theta(z) = theta* + L_H^{-T} z`` on the lattice ``z in step * Z^d``.

    Each axis is walked outward until the log-posterior drop from ``theta*``
    reaches ``threshold``; all combinations of the kept axis values are then
    evaluated and kept when their drop is below ``threshold``.

    ``log_post`` may be given instead of ``model`` as a callable returning
    ``(value, fit_or_None)``; every grid point is evaluated from the same warm
    start ``x0`` so the result does not depend on evaluation order.
    """
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
    d = theta_star.size
    H = np.asarray(H, dtype=float).reshape(d, d)
    if log_post is None:
        if model is None:
            raise ValueError("explore_grid needs a model or a log_post callable")

        def log_post(theta):
            return log_post_theta(theta, model, x0)

    notes = []

    def evaluate(z):
        theta = theta_star + (sla.solve_triangular(LH.T, np.asarray(z, float), lower=False) if d else 0.0)
        try:
            val, ga = log_post(theta)
        except (NewtonDiverged, NotPositiveDefinite) as exc:
            return theta, None, None, f"grid point z={tuple(z)} skipped: {type(exc).__name__}: {exc}"
        return theta, val, ga, None

    if d == 0:
        theta, val, ga, msg = evaluate(())
        if msg:
            raise NewtonDiverged(msg)
        pt = GridPoint(theta_star.copy(), (), float(val), 1.0)
        return ThetaGrid(theta_star, H, np.zeros((0, 0)), (pt,), step, threshold, (ga,), ())

    try:
        LH = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("grid Hessian is not positive definite") from exc

    # drops within rounding of the threshold count as reaching it, so ties are
    # resolved the same way on both sides of a symmetric posterior
    cut = threshold - 1e-9 * max(1.0, abs(threshold))

    _, val0, ga0, msg = evaluate(np.zeros(d))
    if msg:
        raise NewtonDiverged(f"log posterior cannot be evaluated at the mode: {msg}")
    results = {tuple([0] * d): (theta_star.copy(), val0, ga0)}
    axis_values = []
    for j in range(d):
        kept = [0]
        for sign in (1, -1):
            k = 1
            while True:
                z = [0] * d
                z[j] = sign * k
                theta, val, ga, msg = evaluate(np.array(z, float) * step)
                if msg:
                    notes.append(msg)
                    break
                results[tuple(z)] = (theta, val, ga)
                if val0 - val >= cut:
                    break
                kept.append(sign * k)
                k += 1
                if k * step > 1e3:
                    raise GridExplosion(f"axis {j} never dropped below the threshold")
        axis_values.append(sorted(kept))

    n_combos = math.prod(len(v) for v in axis_values)
    if n_combos > max_points:
        raise GridExplosion(f"{n_combos} candidate grid points exceed max_grid_points={max_points}")
    todo = [z for z in product(*axis_values) if z not in results]
    if todo:
        zs = [np.array(z, float) * step for z in todo]
        if n_jobs and n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                outs = list(pool.map(evaluate, zs))
        else:
            outs = [evaluate(z) for z in zs]
        for z, (theta, val, ga, msg) in zip(todo, outs):
            if msg:
                notes.append(msg)
            else:
                results[z] = (theta, val, ga)

    keep = sorted(z for z, (_, val, _) in results.items() if val0 - val < cut)
    if any(results[z][1] > val0 + 1e-6 for z in keep):
        notes.append("a grid point has higher log posterior than theta*")
    vals = [results[z][1] for z in keep]
    w = _normalised_weights(vals)
    points = tuple(GridPoint(results[z][0], z, float(results[z][1]), float(wk)) for z, wk in zip(keep, w))
    fits = tuple(results[z][2] for z in keep)
    for note in notes:
        log.warning(note)
    return ThetaGrid(theta_star, H, LH, points, step, threshold, fits, tuple(notes))


# --------------------------------------------------------------------------
# latent marginals


def _support(mean, sd):
    return np.linspace(mean - SUPPORT_WIDTH * sd, mean + SUPPORT_WIDTH * sd, SUPPORT_POINTS)


def _norm_logpdf(x, m, s):
    z = (x - m) / s
    return -0.5 * z * z - np.log(s) - 0.5 * LOG_2PI


def latent_marginals_gaussian(grid: ThetaGrid, fits: Sequence[GaussianApprox] | None = None, indices=None) -> list:
    """Mixture of per-point Gaussian marginals weighted by the grid weights.

    Mean and sd of each mixture are exact; quantiles interpolate the exact
    mixture CDF tabulated on the support.
    """
    fits = grid.fits if fits is None else fits
    w = grid.weights
    modes = np.array([f.mode for f in fits])
    sds = np.array([f.marg_sd for f in fits])
    if indices is None:
        indices = range(modes.shape[1])
    out = []
    for i in indices:
        m, s = modes[:, i], sds[:, i]
        mean = float(w @ m)
        var = float(w @ (s * s + m * m)) - mean * mean
        sd = math.sqrt(max(var, 0.0))
        xs = _support(mean, sd)
        dens = np.exp(_norm_logpdf(xs[:, None], m[None, :], s[None, :])) @ w
        with np.errstate(divide="ignore"):
            logd = np.log(dens)
        q = _cdf_quantiles(lambda v, m=m, s=s: float(ndtr((v - m) / s) @ w), mean, sd)
        out.append(Marginal(xs, logd, mean, sd, q))
    return out


def _cdf_quantiles(cdf, mean, sd, levels=QUANTILE_LEVELS) -> dict:
    """Quantiles by bracketed root finding on a continuous CDF."""
    out = {}
    for p in levels:
        lo, hi = mean - 10.0 * sd, mean + 10.0 * sd
        while cdf(lo) > p:
            lo -= 10.0 * sd
        while cdf(hi) < p:
            hi += 10.0 * sd
        out[p] = float(brentq(lambda v: cdf(v) - p, lo, hi, xtol=1e-14 * max(1.0, abs(mean)), rtol=4 * np.finfo(float).eps))
    return out


_GH_NODES, _GH_WEIGHTS = hermegauss(60)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(2.0 * math.pi)
_CDF_T = np.linspace(-12.0, 12.0, 4801)


class _ConditionalSetup(NamedTuple):
    Q: object
    Qfull: object
    obs_values: dict
    C: np.ndarray | None


def _log_laplace_conditional(model, setup, ga, i, v):
    """Unnormalised log pi(x_i = v | theta, y) via the Laplace ratio."""
    n = model.n
    Q, Qfull = setup.Q, setup.Qfull
    A = model.obs.A
    if n == 1:
        x = np.array([v])
        ll, _, _ = model.obs.loglik_rows(A @ x + model.obs.offset, setup.obs_values)
        return -0.5 * Qfull[0, 0] * v * v + math.fsum(ll), x
    keep = np.delete(np.arange(n), i)
    Q_rest = Q.submatrix(keep)
    q_col = np.asarray(Qfull[keep, i].todense()).ravel()
    F_rest = factorize(Q_rest)
    mu_c = -solve(F_rest, q_col * v)
    A_csc = A.tocsc()
    obs_c = model.obs.with_design(A_csc[:, keep], model.obs.offset + np.asarray(A_csc[:, i].todense()).ravel() * v)
    C, rhs = None, None
    if setup.C is not None:
        C = setup.C[:, keep]
        rhs = -setup.C[:, i] * v
        nz = np.any(C != 0.0, axis=1)
        C, rhs = (C[nz], rhs[nz]) if nz.any() else (None, None)
    x0 = ga.mode[keep]
    ga_c = fit(Q_rest, mu_c, obs_c, setup.obs_values, x0, constraints=C, constraint_rhs=rhs)
    x = np.insert(ga_c.mode, i, v)
    return -0.5 * float(x @ (Qfull @ x)) + ga_c.loglik - ga_c.log_norm_const, x


def latent_marginal_laplace(i: int, grid: ThetaGrid, model: LatentGaussianModel, *, n_points: int = LAPLACE_POINTS, laplace_n_max: int = LAPLACE_N_MAX) -> Marginal:
    """Laplace-strategy marginal for latent index ``i``.

    At every grid point the conditional ``pi(x_i | theta, y)`` is evaluated
    on standardised points around the Gaussian marginal, represented as that
    Gaussian times a cubic-spline correction, normalised, and mixed with the
    grid weights. Moments use Gauss-Hermite quadrature of each component.
    """
    if model.n > laplace_n_max:
        raise GuardExceeded(f"laplace strategy limited to {laplace_n_max} latent variables, model has {model.n}")
    w = grid.weights
    ts = np.linspace(-SUPPORT_WIDTH, SUPPORT_WIDTH, n_points)
    comps = []
    for pt, ga in zip(grid.points, grid.fits):
        _, lat, obsv = model.split(pt.theta)
        Q, _, _ = assemble_prior(model.latent, lat)
        setup = _ConditionalSetup(Q, Q.full(), obsv, model.latent.constraint_matrix())
        m, s = float(ga.mode[i]), float(ga.marg_sd[i])
        corr = np.empty(n_points)
        ok = np.ones(n_points, dtype=bool)
        for j, t in enumerate(ts):
            v = m + s * t
            try:
                lv, _ = _log_laplace_conditional(model, setup, ga, i, v)
            except (NewtonDiverged, NotPositiveDefinite) as exc:
                log.warning("laplace point x_%d=%g skipped: %s", i, v, exc)
                ok[j] = False
                continue
            corr[j] = lv + 0.5 * t * t
        if ok.sum() < 4:
            raise NewtonDiverged(f"too few laplace evaluation points succeeded for index {i}")
        tt, cc = ts[ok], corr[ok]
        cc = cc - cc[np.argmin(np.abs(tt))]
        spline = CubicSpline(tt, cc, bc_type="natural")
        lo, hi = tt[0], tt[-1]

        def correction(t, spline=spline, lo=lo, hi=hi):
            return spline(np.clip(t, lo, hi))

        e = np.exp(correction(_GH_NODES))
        Z = float(_GH_WEIGHTS @ e)
        m1 = float(_GH_WEIGHTS @ (_GH_NODES * e)) / Z
        m2 = float(_GH_WEIGHTS @ (_GH_NODES**2 * e)) / Z
        # CDF as the Gaussian CDF plus the integral of phi * (exp(c) - 1), which is
        # identically zero when the correction vanishes
        excess = cumulative_trapezoid(np.exp(-0.5 * _CDF_T**2 - 0.5 * LOG_2PI) * np.expm1(correction(_CDF_T)), _CDF_T, initial=0.0)
        comps.append((m, s, correction, Z, m + s * m1, s * s * (m2 - m1 * m1), excess))

    mean = math.fsum(wk * c[4] for wk, c in zip(w, comps))
    second = math.fsum(wk * (c[5] + c[4] ** 2) for wk, c in zip(w, comps))
    sd = math.sqrt(max(second - mean * mean, 0.0))
    xs = _support(mean, sd)
    dens = np.zeros_like(xs)
    for wk, (m, s, correction, Z, _, _, _) in zip(w, comps):
        t = (xs - m) / s
        dens += wk * np.exp(_norm_logpdf(xs, m, s) + correction(t)) / Z
    with np.errstate(divide="ignore"):
        logd = np.log(dens)

    def cdf(v):
        return math.fsum(
            wk * (ndtr((v - m) / s) + np.interp((v - m) / s, _CDF_T, excess)) / Z
            for wk, (m, s, _, Z, _, _, excess) in zip(w, comps)
        )

    return Marginal(xs, logd, mean, sd, _cdf_quantiles(cdf, mean, sd))


# --------------------------------------------------------------------------
# hyperparameter marginals


@dataclass(frozen=True)
class HyperMarginal:
    hyper: HyperParam
    internal: Marginal
    natural: Marginal


#: log-density drop at which extrapolated tails stop
TAIL_DROP = 12.0


def _axis_log_density(grid: ThetaGrid, j: int):
    """Collapse grid weights onto a regular lattice along theta_j.

    Weights are split linearly between the two nearest lattice nodes, which
    preserves total mass and the first moment. The lattice spacing is the
    grid step in units of the marginal standard deviation ``sqrt(H^-1_jj)``.
    """
    Hinv = np.linalg.inv(grid.hessian)
    h = grid.step * math.sqrt(Hinv[j, j])
    u = (grid.thetas[:, j] - grid.mode_theta[j]) / h
    lo = np.floor(u + 1e-9).astype(int)
    frac = np.clip(u - lo, 0.0, 1.0)
    frac[frac < 1e-9] = 0.0
    kmin, kmax = lo.min(), lo.max() + 1
    mass = np.zeros(kmax - kmin + 1)
    np.add.at(mass, lo - kmin, grid.weights * (1.0 - frac))
    np.add.at(mass, lo - kmin + 1, grid.weights * frac)
    nodes = np.arange(kmin, kmax + 1)
    keep = mass > 0
    return grid.mode_theta[j] + h * nodes[keep], np.log(mass[keep] / h), h


#: longest tail extension beyond the outermost lattice node, in lattice steps
TAIL_STEPS = 10


def _tail(xs, ys, direction):
    """Coefficients ``(edge, y_edge, slope, curv)`` of the log-density beyond the last node.

    A quadratic through the three outermost nodes when it is concave and
    decreasing outward there, otherwise the line through the two outermost
    nodes (made to decrease if it does not).
    """
    if direction < 0:
        xs, ys = -xs[::-1], ys[::-1]
    edge, y_edge = xs[-1], ys[-1]
    slope, curv = 0.0, 0.0
    if len(xs) >= 3:
        a, b, _ = np.polyfit(xs[-3:], ys[-3:], 2)
        slope, curv = 2.0 * a * edge + b, 2.0 * a
    if len(xs) < 3 or curv > 0 or slope >= 0:
        slope, curv = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2]), 0.0
    if slope >= 0:
        slope = -1.0 / (xs[-1] - xs[0])
    return edge, y_edge, slope, curv


def _tail_length(y_edge, slope, curv, target):
    need = y_edge - target
    if need <= 0:
        return 0.0
    if curv == 0.0:
        return need / -slope
    return (slope + math.sqrt(slope * slope - 2.0 * curv * need)) / -curv


def _tail_eval(d, y_edge, slope, curv):
    return y_edge + slope * d + 0.5 * curv * d * d


def hyper_marginals(grid: ThetaGrid, hypers: Sequence[HyperParam]) -> list:
    """Posterior marginals of every free hyperparameter, internal and natural scale.

    The log-density along each axis is interpolated with a monotone cubic
    (PCHIP) between lattice nodes and continued beyond the outermost nodes by
    the tail model of ``_tail`` until it has dropped by ``TAIL_DROP`` from the
    maximum or ``TAIL_STEPS`` lattice steps have been added.
    """
    out = []
    for j, hp in enumerate(hypers):
        xs, ys, h = _axis_log_density(grid, j)
        if len(xs) < 2:
            # single node: Gaussian from the Hessian
            sd = math.sqrt(np.linalg.inv(grid.hessian)[j, j])
            support = _support(grid.mode_theta[j], sd)
            internal = Marginal.from_density(support, np.exp(_norm_logpdf(support, grid.mode_theta[j], sd)))
            out.append(HyperMarginal(hp, internal, _natural_marginal(hp, internal)))
            continue
        target = ys.max() - TAIL_DROP
        lo_t = _tail(xs, ys, -1)
        hi_t = _tail(xs, ys, +1)
        lo = xs[0] - min(_tail_length(*lo_t[1:], target), TAIL_STEPS * h)
        hi = xs[-1] + min(_tail_length(*hi_t[1:], target), TAIL_STEPS * h)
        support = np.linspace(lo, hi, SUPPORT_POINTS)
        logd = PchipInterpolator(xs, ys, extrapolate=False)(support)
        left, right = support < xs[0], support > xs[-1]
        logd[left] = _tail_eval(xs[0] - support[left], *lo_t[1:])
        logd[right] = _tail_eval(support[right] - xs[-1], *hi_t[1:])
        internal = Marginal.from_density(support, np.exp(logd - np.max(logd)))
        out.append(HyperMarginal(hp, internal, _natural_marginal(hp, internal)))
    return out


def _natural_marginal(hp: HyperParam, m: Marginal) -> Marginal:
    """Transform an internal-scale marginal; moments come from internal-scale quadrature.

    The density is divided by the Jacobian and renormalised on the mapped
    (non-uniform) support.
    """
    th = m.support
    dens = m.density
    nat = hp.to_natural(th)
    mean = float(trapezoid(nat * dens, th))
    var = float(trapezoid((nat - mean) ** 2 * dens, th))
    d_nat = dens * np.exp(-hp.log_jacobian(th))
    d_nat = d_nat / trapezoid(d_nat, nat)
    with np.errstate(divide="ignore"):
        logd_nat = np.log(d_nat)
    q = {k: float(hp.to_natural(v)) for k, v in m.quantiles.items()}
    return Marginal(nat, logd_nat, mean, math.sqrt(max(var, 0.0)), q)


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True, eq=False)
class InlaResult:
    model: LatentGaussianModel
    grid: ThetaGrid
    optim: OptimResult
    latent: tuple
    hyper: tuple
    strategy: str
    warnings: tuple = ()

    def latent_summary(self) -> np.ndarray:
        return np.array([m.summary() for m in self.latent])


def inla(
    model: LatentGaussianModel,
    *,
    strategy: str = "gaussian",
    step: float = GRID_STEP,
    threshold: float = GRID_THRESHOLD,
    max_points: int = MAX_GRID_POINTS,
    theta_init=None,
    n_jobs: int = 1,
    laplace_n_max: int = LAPLACE_N_MAX,
) -> InlaResult:
    """Run the full pipeline: optimise theta, explore the grid, build marginals."""
    if strategy not in ("gaussian", "laplace"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "laplace" and model.n > laplace_n_max:
        raise GuardExceeded(f"laplace strategy limited to {laplace_n_max} latent variables, model has {model.n}")
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonPDHessian)
        opt = optimize_theta(model, theta_init)
    notes.extend(str(c.message) for c in caught)
    x0 = opt.fit.mode if opt.fit is not None else None
    grid = explore_grid(opt.theta, opt.hessian, model, step=step, threshold=threshold, max_points=max_points, x0=x0, n_jobs=n_jobs)
    notes.extend(grid.warnings)
    if strategy == "gaussian":
        latent = latent_marginals_gaussian(grid)
    else:
        latent = [latent_marginal_laplace(i, grid, model, laplace_n_max=laplace_n_max) for i in range(model.n)]
    hyper = hyper_marginals(grid, model.free_hypers) if model.dim_theta else []
    notes.extend(f"non-monotone Newton run at grid point {k}" for k, f in enumerate(grid.fits) if f.non_monotone)
    return InlaResult(model, grid, opt, tuple(latent), tuple(hyper), strategy, tuple(notes))
