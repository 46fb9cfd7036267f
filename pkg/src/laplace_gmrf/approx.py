"""Mode-matched Gaussian approximation of the latent conditional.

For fixed hyperparameters the log-density of ``x`` given the data is

    f(x) = -1/2 (x - mu)^T Q (x - mu) + sum_i log pi(y_i | eta_i),   eta = A x + offset.

Newton iterations on ``f`` use the expected curvature ``A^T diag(d2neg) A``;
each step solves a sparse system with the updated precision. Linear
constraints ``C x = e`` are imposed by kriging after every solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, NewtonDiverged
from .gmrf import (
    LOG_2PI,
    CholeskyFactor,
    ConstraintCorrection,
    SparsePrecision,
    constrain_sum_to_zero,
    factorize,
    marginal_variances,
    solve,
)
from .likelihood import ObservationModel

NEWTON_TOL = 1e-8
MAX_ITER = 50
MAX_HALVINGS = 10
D2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    """Gaussian approximation ``N(mode, Qpost^{-1})`` (conditioned on constraints if any).

    ``log_norm_const`` is the log-density of the approximation at its mode.
    ``loglik`` and ``objective`` are evaluated at the mode; ``objective``
    excludes the prior normalising constant.
    """

    mode: np.ndarray
    Qpost: SparsePrecision
    factor: CholeskyFactor
    marg_sd: np.ndarray
    log_norm_const: float
    loglik: float
    objective: float
    n_iter: int
    halvings: int
    history: tuple
    constraint: ConstraintCorrection | None = None

    @property
    def n(self) -> int:
        return self.mode.shape[0]

    @property
    def non_monotone(self) -> bool:
        """True when a full Newton step had to be shortened."""
        return self.halvings > 0


class _Objective:
    def __init__(self, Qprior, mu, obs, theta):
        self.Q = Qprior.full()
        self.mu = mu
        self.obs = obs
        self.theta = theta
        self.A = obs.A
        self.At = obs.A.T.tocsr()
        self.observed = obs.column >= 0

    def __call__(self, x):
        r = x - self.mu
        eta = self.A @ x + self.obs.offset
        ll, d1, d2 = self.obs.loglik_rows(eta, self.theta)
        loglik = math.fsum(ll)
        return -0.5 * float(r @ (self.Q @ r)) + loglik, loglik, eta, d1, d2

    def curvature(self, d2):
        c = np.where(self.observed, np.maximum(d2, D2_FLOOR), 0.0)
        return c, (self.At @ sp.diags(c) @ self.A)


def _project(x, C, e):
    # Euclidean projection onto {C x = e}; feasibility is kept by every later step
    r = C @ x - e
    return x - C.T @ np.linalg.solve(C @ C.T, r)


def fit(
    Qprior: SparsePrecision,
    mu_prior,
    obs: ObservationModel,
    theta=None,
    x0=None,
    *,
    constraints=None,
    constraint_rhs=None,
    newton_tol: float = NEWTON_TOL,
    max_iter: int = MAX_ITER,
    max_halvings: int = MAX_HALVINGS,
) -> GaussianApprox:
    """Find the mode of the latent conditional and return the matched Gaussian.

    Parameters
    ----------
    Qprior, mu_prior
        Prior precision and mean of the latent field.
    obs : ObservationModel
    theta
        Observation hyperparameters (vector of free slots or name mapping).
    x0 : array_like, optional
        Starting point; defaults to ``mu_prior``.
    constraints, constraint_rhs
        Optional ``k x n`` matrix ``C`` and right-hand side ``e`` for ``C x = e``.

    Raises
    ------
    NewtonDiverged
        If ``max_iter`` is reached or no step length up to ``max_halvings``
        halvings avoids decreasing the objective.
    """
    n = Qprior.n
    mu = np.asarray(mu_prior, dtype=float)
    if mu.shape != (n,) or obs.A.shape[1] != n:
        raise DimensionMismatch(f"prior of dimension {n}, mean {mu.shape}, A {obs.A.shape}")
    x = mu.copy() if x0 is None else np.array(x0, dtype=float)
    C = None
    if constraints is not None:
        C = np.atleast_2d(np.asarray(constraints, dtype=float))
        e = np.zeros(C.shape[0]) if constraint_rhs is None else np.asarray(constraint_rhs, dtype=float)
        x = _project(x, C, e)

    objective = _Objective(Qprior, mu, obs, theta)
    Qmu = objective.Q @ mu
    f_x, ll_x, eta, d1, d2 = objective(x)
    history = [f_x]
    halvings = 0
    for it in range(1, max_iter + 1):
        c, AtCA = objective.curvature(d2)
        Qpost = SparsePrecision((Qprior.lower + sp.tril(AtCA, format="csc")).tocsc())
        F = factorize(Qpost)
        b = Qmu + objective.At @ (d1 + c * (eta - obs.offset))
        x_new = solve(F, b)
        if C is not None:
            x_new, _ = constrain_sum_to_zero(x_new, F, C, e)
        step = x_new - x
        t = 1.0
        for h in range(max_halvings + 1):
            x_try = x + t * step
            f_try, ll_try, eta_try, d1_try, d2_try = objective(x_try)
            if f_try >= f_x - 1e-10 * max(1.0, abs(f_x)):
                break
            t *= 0.5
        else:
            raise NewtonDiverged(f"objective decreased after {max_halvings} step halvings (iteration {it})")
        halvings += h
        x, f_x, ll_x, eta, d1, d2 = x_try, f_try, ll_try, eta_try, d1_try, d2_try
        history.append(f_x)
        if np.max(np.abs(t * step), initial=0.0) <= newton_tol:
            break
    else:
        raise NewtonDiverged(f"no convergence in {max_iter} Newton iterations")

    # curvature at the accepted mode
    c, AtCA = objective.curvature(d2)
    Qpost = SparsePrecision((Qprior.lower + sp.tril(AtCA, format="csc")).tocsc())
    F = factorize(Qpost)
    var = marginal_variances(F)
    log_norm = 0.5 * F.logdet - 0.5 * n * LOG_2PI
    info = None
    if C is not None:
        _, info = constrain_sum_to_zero(x, F, C, e)
        var = var - info.variance_reduction()
        log_norm += 0.5 * info.k * LOG_2PI + 0.5 * info.logdet_W
    return GaussianApprox(
        mode=x,
        Qpost=Qpost,
        factor=F,
        marg_sd=np.sqrt(np.maximum(var, 0.0)),
        log_norm_const=log_norm,
        loglik=ll_x,
        objective=f_x,
        n_iter=it,
        halvings=halvings,
        history=tuple(history),
        constraint=info,
    )


def log_density_at(ga: GaussianApprox, x) -> float:
    """Log-density of the approximation at ``x`` (feasible ``x`` when constrained)."""
    x = np.asarray(x, dtype=float)
    if x.shape != ga.mode.shape:
        raise DimensionMismatch(f"x has shape {x.shape}, expected {ga.mode.shape}")
    r = x - ga.mode
    return ga.log_norm_const - 0.5 * float(r @ ga.Qpost.matvec(r))
