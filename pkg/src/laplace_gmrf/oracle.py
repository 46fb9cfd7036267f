"""Brute-force reference computations used to check the approximations.

Nothing here depends on the sparse factorisation, the Newton fit or the
hyperparameter engine: posteriors come from dense tensor-product trapezoid
quadrature of the joint density and linear algebra from dense numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import gammaln, polygamma, psi

from .errors import BoxTooNarrow, DimensionMismatch, DomainError, GridTooLarge, GuardExceeded
from .latent import LatentModelSpec, assemble_prior, log_prior_theta, resolve_theta
from .likelihood import ObservationModel
from .marginal import Marginal, quantiles_from_cdf

MIN_POINTS = 41
MAX_NODES = 10_000_000
EDGE_MASS = 1e-3
DENSE_MAX_N = 50
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureSpec:
    """Box and resolution of the tensor-product quadrature.

    Each range is ``(lo, hi, points)``; theta ranges are on the internal scale
    and follow the order of the free hyperparameters.
    """

    latent_ranges: tuple
    theta_ranges: tuple = ()

    def __post_init__(self):
        ranges = tuple(map(tuple, self.latent_ranges)) + tuple(map(tuple, self.theta_ranges))
        for lo, hi, k in ranges:
            if k < MIN_POINTS:
                raise GridTooLarge(f"quadrature needs at least {MIN_POINTS} points per dimension, got {k}")
            if not hi > lo:
                raise ValueError(f"empty range ({lo}, {hi})")
        if math.prod(int(k) for _, _, k in ranges) > MAX_NODES:
            raise GridTooLarge(f"quadrature grid exceeds {MAX_NODES} nodes")

    def axes(self):
        return [np.linspace(lo, hi, int(k)) for lo, hi, k in tuple(self.latent_ranges) + tuple(self.theta_ranges)]

    def refined(self, factor: int = 2) -> "QuadratureSpec":
        """Same box with ``factor`` times as many intervals per dimension."""
        up = lambda rs: tuple((lo, hi, (int(k) - 1) * factor + 1) for lo, hi, k in rs)
        return QuadratureSpec(up(self.latent_ranges), up(self.theta_ranges))


@dataclass(frozen=True)
class BrutePosterior:
    latent: tuple
    hyper: tuple
    hyper_natural_mean: tuple
    log_evidence: float


def _trap_weights(x):
    w = np.empty_like(x)
    d = np.diff(x)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


def _dense_log_prior_x(latent, values, X):
    """Log-density of rows of ``X`` under the dense prior of ``latent``."""
    Qs, _, corr = assemble_prior(latent, values)
    Q = Qs.toarray()
    sign, logdet = np.linalg.slogdet(Q)
    if sign <= 0:
        raise DomainError("prior precision is not positive definite")
    quad = np.einsum("ij,jk,ik->i", X, Q, X)
    return 0.5 * (logdet + corr) - 0.5 * Q.shape[0] * LOG_2PI - 0.5 * quad


def brute_posterior(latent: LatentModelSpec, obs: ObservationModel, spec: QuadratureSpec) -> BrutePosterior:
    """Posterior marginals and log evidence by tensor-product trapezoid quadrature.

    The integrand is ``pi(theta) pi(x | theta) pi(y | x)`` with the same
    normalising constants as the engine. Sum-to-zero constraints are not
    supported (the constrained density lives on a lower-dimensional set).

    Raises
    ------
    GuardExceeded
        If the latent dimension plus the number of free hyperparameters exceeds 3.
    BoxTooNarrow
        If an outermost cell along any axis holds at least 1e-3 of the mass.
    """
    n = latent.total_dim
    hypers = latent.hypers + obs.hypers
    free = [h for h in hypers if not h.fixed]
    d = len(free)
    if n + d > 3:
        raise GuardExceeded(f"brute-force quadrature limited to 3 dimensions, model has {n + d}")
    if latent.constraint_matrix() is not None:
        raise GuardExceeded("brute-force quadrature does not support linear constraints")
    if len(spec.latent_ranges) != n or len(spec.theta_ranges) != d:
        raise DimensionMismatch(f"quadrature box has {len(spec.latent_ranges)}+{len(spec.theta_ranges)} axes, model needs {n}+{d}")
    axes = spec.axes()
    xs_axes, th_axes = axes[:n], axes[n:]
    X = np.stack(np.meshgrid(*xs_axes, indexing="ij"), axis=-1).reshape(-1, n)
    wx = np.ones(1)
    for a in xs_axes:
        wx = np.multiply.outer(wx, _trap_weights(a)).ravel()
    eta = np.asarray(obs.A @ X.T).T + obs.offset  # (nodes, rows)
    lat_names = {h.name for h in latent.hypers}

    th_nodes = np.stack(np.meshgrid(*th_axes, indexing="ij"), axis=-1).reshape(-1, d) if d else np.zeros((1, 0))
    logj = np.empty((th_nodes.shape[0], X.shape[0]))
    for k, th in enumerate(th_nodes):
        values = resolve_theta(hypers, th)
        lp_x = _dense_log_prior_x(latent, {kk: v for kk, v in values.items() if kk in lat_names}, X)
        obs_vals = {h.name: values[h.name] for h in obs.hypers}
        ll, _, _ = obs.loglik_rows(eta, obs_vals)
        logj[k] = log_prior_theta(hypers, values) + lp_x + ll.sum(axis=1)
    wt = np.ones(1)
    for a in th_axes:
        wt = np.multiply.outer(wt, _trap_weights(a)).ravel()
    top = logj.max()
    p = np.exp(logj - top)
    mass = p * wt[:, None] * wx[None, :]
    Z = mass.sum()
    log_evidence = top + math.log(Z)

    shape = tuple(len(a) for a in th_axes) + tuple(len(a) for a in xs_axes)
    dens = (p / Z).reshape(shape) if shape else p / Z
    mass = (mass / Z).reshape(shape)
    all_axes = list(th_axes) + list(xs_axes)
    marginals = []
    for ax, a in enumerate(all_axes):
        other = tuple(i for i in range(len(all_axes)) if i != ax)
        cell = mass.sum(axis=other)
        edge = max(cell[0], cell[-1])
        if edge >= EDGE_MASS:
            raise BoxTooNarrow(f"{edge:.2e} of the posterior mass sits at the edge of axis {ax}")
        # marginal density: integrate the other axes with their trapezoid weights
        w_other = np.ones(1)
        for i in other:
            w_other = np.multiply.outer(w_other, _trap_weights(all_axes[i])).ravel()
        moved = np.moveaxis(dens, ax, 0).reshape(len(a), -1)
        f = moved @ w_other
        marginals.append(_marginal_from_table(a, f))
    hyper = tuple(marginals[:d])
    nat_means = tuple(float(trapezoid(h.to_natural(m.support) * m.density, m.support)) for h, m in zip(free, hyper))
    return BrutePosterior(tuple(marginals[d:]), hyper, nat_means, float(log_evidence))


def _marginal_from_table(x, f):
    f = f / trapezoid(f, x)
    mean = float(trapezoid(x * f, x))
    sd = math.sqrt(max(float(trapezoid((x - mean) ** 2 * f, x)), 0.0))
    cdf = cumulative_trapezoid(f, x, initial=0.0)
    with np.errstate(divide="ignore"):
        logf = np.log(f)
    return Marginal(x, logf, mean, sd, quantiles_from_cdf(x, cdf / cdf[-1]))


# --------------------------------------------------------------------------
# gamma / log-normal correction weight


def lognormal_match(shape: float, rate: float) -> tuple:
    """Log-scale mean and variance of Gamma(shape, rate)."""
    return float(psi(shape) - math.log(rate)), float(polygamma(1, shape))


def _gamma_logpdf(v, a, b):
    return a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(v) - b * v


def _lognormal_logpdf(v, mu, s2):
    lv = np.log(v)
    return -lv - 0.5 * np.log(2.0 * np.pi * s2) - 0.5 * (lv - mu) ** 2 / s2


def frailty_correction_weight(v, gamma_shape: float, gamma_rate: float):
    """Ratio of the Gamma(shape, rate) density to its log-scale moment-matched log-normal.

    Vectorised over ``v``. Scalars in, float out.
    """
    if gamma_shape <= 0 or gamma_rate <= 0:
        raise DomainError("gamma shape and rate must be positive")
    arr = np.asarray(v, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("frailty value must be positive")
    mu, s2 = lognormal_match(gamma_shape, gamma_rate)
    with np.errstate(over="ignore"):
        w = np.exp(_gamma_logpdf(arr, gamma_shape, gamma_rate) - _lognormal_logpdf(arr, mu, s2))
    return float(w) if np.ndim(v) == 0 else w


def frailty_weight_integral(gamma_shape: float, gamma_rate: float, points: int = 20_001, width: float = 12.0) -> float:
    """Trapezoid integral of ``weight * lognormal`` on the log scale."""
    mu, s2 = lognormal_match(gamma_shape, gamma_rate)
    u = np.linspace(mu - width * math.sqrt(s2), mu + width * math.sqrt(s2), points)
    # lower tail of a small-shape gamma is heavier than the log-normal's; widen to cover it
    u = np.concatenate([np.linspace(mu - 60.0, u[0], points // 4, endpoint=False), u])
    v = np.exp(u)
    w = frailty_correction_weight(v, gamma_shape, gamma_rate)
    with np.errstate(over="ignore", invalid="ignore"):
        f = np.where(np.isfinite(w), w * np.exp(_lognormal_logpdf(v, mu, s2)) * v, 0.0)
    return float(trapezoid(f, u))


def frailty_weight_mc_mean(gamma_shape: float, gamma_rate: float, draws: int = 1_000_000, seed: int = 0) -> float:
    """Monte Carlo mean of the weight under the matched log-normal."""
    mu, s2 = lognormal_match(gamma_shape, gamma_rate)
    rng = np.random.default_rng(seed)
    v = np.exp(rng.normal(mu, math.sqrt(s2), size=draws))
    return math.fsum(frailty_correction_weight(v, gamma_shape, gamma_rate)) / draws


# --------------------------------------------------------------------------
# dense linear algebra


def dense_reference(op_name: str, *inputs):
    """Dense counterparts of the sparse operations, for ``n <= 50``.

    Operations
    ----------
    ``factorize(Q)`` -> ``(L, logdet)`` with ``Q = L L^T``;
    ``solve(Q, b)``; ``marginal_variances(Q)``; ``logdet(Q)``;
    ``kronecker(A, B)``; ``constrained_mean(Q, mean, C, e)`` (conditioning by kriging);
    ``mvn_logpdf(Q, mean, x)``.
    """
    mats = [np.asarray(a.toarray() if hasattr(a, "toarray") else a, dtype=float) for a in inputs]
    for m in mats:
        if m.ndim == 2 and max(m.shape) > DENSE_MAX_N and op_name != "kronecker":
            raise DimensionMismatch(f"dense reference limited to n <= {DENSE_MAX_N}, got {m.shape}")
    if op_name == "kronecker":
        A, B = mats
        if A.shape[0] * B.shape[0] > DENSE_MAX_N * 4:
            raise DimensionMismatch("kronecker reference limited to 200 rows")
        return np.kron(A, B)
    Q = mats[0]
    if Q.shape[0] != Q.shape[1]:
        raise DimensionMismatch(f"square matrix required, got {Q.shape}")
    if op_name == "factorize":
        L = np.linalg.cholesky(Q)
        return L, 2.0 * float(np.sum(np.log(np.diag(L))))
    if op_name == "logdet":
        return 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(Q)))))
    if op_name == "solve":
        b = mats[1]
        if b.shape[0] != Q.shape[0]:
            raise DimensionMismatch("right-hand side length does not match")
        return np.linalg.solve(Q, b)
    if op_name == "marginal_variances":
        return np.diag(np.linalg.inv(Q)).copy()
    if op_name == "constrained_mean":
        mean, C = mats[1], np.atleast_2d(mats[2])
        e = mats[3] if len(mats) > 3 else np.zeros(C.shape[0])
        S = np.linalg.inv(Q)
        return mean - S @ C.T @ np.linalg.solve(C @ S @ C.T, C @ mean - e)
    if op_name == "mvn_logpdf":
        mean, x = mats[1], mats[2]
        r = x - mean
        _, ld = np.linalg.slogdet(Q)
        return 0.5 * ld - 0.5 * Q.shape[0] * LOG_2PI - 0.5 * float(r @ Q @ r)
    raise ValueError(f"unknown dense reference operation {op_name!r}")
