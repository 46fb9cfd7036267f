"""Observation models: per-family log-likelihoods and the A-matrix predictor.

Every family function is vectorised over ``y`` and ``eta`` and returns
``(loglik, d1, d2neg)`` where ``d1`` and ``d2neg`` are the first derivative
and the negated second derivative with respect to the linear predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln

from .errors import DimensionMismatch, InvalidCount, ResponseOverlap, SchemaError, UnsupportedFamily
from .latent import HyperParam, Prior, log_precision, resolve_theta

FAMILIES = ("gaussian", "binomial", "poisson")
LOG_2PI = math.log(2.0 * math.pi)


class LikelihoodEval(NamedTuple):
    loglik: float
    d1: np.ndarray
    d2neg: np.ndarray


def loglik_gaussian(y, eta, log_prec):
    tau = np.exp(log_prec)
    r = np.asarray(y, dtype=float) - eta
    ll = 0.5 * (log_prec - LOG_2PI) - 0.5 * tau * r * r
    return ll, tau * r, np.broadcast_to(tau, np.shape(ll)).astype(float)


def _check_counts(y, n=None):
    y = np.asarray(y, dtype=float)
    bad = (y < 0) | (y != np.floor(y))
    if n is not None:
        bad |= y > n
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))[0]
        raise InvalidCount(f"invalid count {np.atleast_1d(y)[idx]!r}", row=int(idx) if np.ndim(y) else None)
    return y


def loglik_binomial_logit(y, n, eta):
    """Binomial with logit link; numerically stable in both tails."""
    n = np.asarray(n, dtype=float)
    y = _check_counts(y, n)
    eta = np.asarray(eta, dtype=float)
    log_p = -np.logaddexp(0.0, -eta)
    log_1mp = -np.logaddexp(0.0, eta)
    lchoose = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
    # y * log p is 0 when y == 0 even if log p is -inf
    ll = lchoose + np.where(y > 0, y * log_p, 0.0) + np.where(n - y > 0, (n - y) * log_1mp, 0.0)
    p = expit(eta)
    return ll, y - n * p, n * p * (1.0 - p)


def loglik_poisson(y, eta, offset=0.0):
    y = _check_counts(y)
    lin = np.asarray(eta, dtype=float) + offset
    lam = np.exp(lin)
    ll = y * lin - lam - gammaln(y + 1.0)
    return ll, y - lam, lam


def predictor(A, x, offset=None) -> np.ndarray:
    """Linear predictor ``eta = A x + offset``."""
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"A has {A.shape[1]} columns but x has length {x.shape[0]}")
    eta = np.asarray(A @ x, dtype=float).ravel()
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if offset.shape not in ((), eta.shape):
            raise DimensionMismatch(f"offset shape {offset.shape} does not match {eta.shape}")
        eta = eta + offset
    return eta


@dataclass(frozen=True)
class ObservationModel:
    """Data rows, their families and the linear map from latent field to predictors.

    ``y_matrix`` is ``N x F`` with ``nan`` for missing; each row has at most
    one observed entry and its column selects the family. ``column`` is the
    resulting per-row family index (``-1`` for rows with no response).
    The Poisson offset enters the predictor like any other offset.
    """

    families: tuple
    y_matrix: np.ndarray
    A: sp.csr_matrix
    ntrials: np.ndarray | None = None
    offset: np.ndarray | None = None
    hypers: tuple = ()
    column: np.ndarray = field(init=False, repr=False, compare=False)
    _hyper_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        fams = tuple(self.families)
        for f in fams:
            if f not in FAMILIES:
                raise UnsupportedFamily(f"unsupported family {f!r}; supported: {', '.join(FAMILIES)}")
        Y = np.array(self.y_matrix, dtype=float, copy=True)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[1] != len(fams):
            raise DimensionMismatch(f"y_matrix has {Y.shape[1]} columns for {len(fams)} families")
        N = Y.shape[0]
        A = sp.csr_matrix(self.A, dtype=float)
        if A.shape[0] != N:
            raise DimensionMismatch(f"A has {A.shape[0]} rows but there are {N} data rows")
        obs = ~np.isnan(Y)
        if np.any(obs.sum(axis=1) > 1):
            row = int(np.flatnonzero(obs.sum(axis=1) > 1)[0])
            raise ResponseOverlap(f"row {row + 1} has more than one observed response")
        column = np.where(obs.any(axis=1), obs.argmax(axis=1), -1)
        ntrials = None if self.ntrials is None else np.asarray(self.ntrials, dtype=float).reshape(N)
        offset = np.zeros(N) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(N)
        hypers = tuple(self.hypers)
        if not hypers:
            hypers = tuple(
                log_precision(f"{_family_label(fams, j)}.log_prec", Prior("loggamma", (1.0, 5e-5)))
                for j, f in enumerate(fams)
                if f == "gaussian"
            )
        hyper_of = {}
        gauss_cols = [j for j, f in enumerate(fams) if f == "gaussian"]
        if len(hypers) != len(gauss_cols):
            raise SchemaError(f"{len(hypers)} observation hyperparameters for {len(gauss_cols)} gaussian columns")
        for j, h in zip(gauss_cols, hypers):
            hyper_of[j] = h
        for j, f in enumerate(fams):
            rows = column == j
            if f == "binomial" and rows.any():
                if ntrials is None:
                    raise SchemaError("binomial family needs ntrials")
                _check_rows(lambda: loglik_binomial_logit(Y[rows, j], ntrials[rows], 0.0), rows)
            if f == "poisson" and rows.any():
                _check_rows(lambda: loglik_poisson(Y[rows, j], 0.0), rows)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "y_matrix", Y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "ntrials", ntrials)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "hypers", hypers)
        object.__setattr__(self, "column", column)
        object.__setattr__(self, "_hyper_of", hyper_of)

    @property
    def n_rows(self) -> int:
        return self.y_matrix.shape[0]

    @property
    def free_hypers(self) -> tuple:
        return tuple(h for h in self.hypers if not h.fixed)

    def with_design(self, A, offset) -> "ObservationModel":
        """Same responses with a different design (used for conditional fits)."""
        return ObservationModel(self.families, self.y_matrix, A, self.ntrials, offset, self.hypers)

    def loglik_rows(self, eta, theta=None):
        """Per-row ``(loglik, d1, d2neg)`` given the full predictor ``eta`` (offset included).

        ``eta`` may be 1-D (one predictor vector) or 2-D with rows as
        independent evaluations; missing rows contribute zeros.
        """
        values = resolve_theta(self.hypers, theta)
        eta = np.asarray(eta, dtype=float)
        ll = np.zeros(eta.shape)
        d1 = np.zeros(eta.shape)
        d2 = np.zeros(eta.shape)
        Y = self.y_matrix
        for j, fam in enumerate(self.families):
            rows = self.column == j
            if not rows.any():
                continue
            y = Y[rows, j]
            e = eta[..., rows]
            try:
                if fam == "gaussian":
                    out = loglik_gaussian(y, e, values[self._hyper_of[j].name])
                elif fam == "binomial":
                    out = loglik_binomial_logit(y, self.ntrials[rows], e)
                else:
                    out = loglik_poisson(y, e)
            except InvalidCount as exc:
                raise InvalidCount(str(exc), row=int(np.flatnonzero(rows)[exc.row or 0]) + 1) from exc
            ll[..., rows], d1[..., rows], d2[..., rows] = out
        return ll, d1, d2


def _family_label(fams, j):
    return f"{fams[j]}{j + 1}" if len(fams) > 1 else fams[j]


def _check_rows(fn, rows):
    try:
        fn()
    except InvalidCount as exc:
        raise InvalidCount(str(exc).split(": ", 1)[-1], row=int(np.flatnonzero(rows)[exc.row or 0]) + 1) from exc


def total_loglik(obs: ObservationModel, x, theta=None) -> LikelihoodEval:
    """Sum of per-row log-likelihoods at latent ``x`` with per-row derivatives.

    ``d1`` and ``d2neg`` are with respect to each row's linear predictor and
    are stacked in row order. The sum is a fixed-order reduction over rows.
    """
    eta = predictor(obs.A, x, obs.offset)
    ll, d1, d2 = obs.loglik_rows(eta, theta)
    return LikelihoodEval(float(math.fsum(ll)), d1, d2)
