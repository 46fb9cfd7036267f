"""One-dimensional posterior marginals on a finite support."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import PchipInterpolator

QUANTILE_LEVELS = (0.025, 0.5, 0.975)


def quantiles_from_cdf(support, cdf, levels=QUANTILE_LEVELS) -> dict:
    """Invert a tabulated CDF with monotone cubic interpolation."""
    cdf = np.asarray(cdf, dtype=float)
    support = np.asarray(support, dtype=float)
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    c, s = cdf[keep], support[keep]
    if c.size < 2:
        return {q: float(s[0]) for q in levels}
    inv = PchipInterpolator(c, s, extrapolate=False)
    out = {}
    for q in levels:
        v = inv(q)
        out[q] = float(s[0] if q <= c[0] else s[-1] if q >= c[-1] else v)
    return out


@dataclass(frozen=True)
class Marginal:
    """A tabulated density with its summaries.

    ``log_density`` is normalised so the trapezoid integral over ``support``
    is one (to the accuracy of the construction).
    """

    support: np.ndarray
    log_density: np.ndarray
    mean: float
    sd: float
    quantiles: dict = field(default_factory=dict)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def integral(self) -> float:
        return float(trapezoid(self.density, self.support))

    @property
    def median(self) -> float:
        return self.quantiles[0.5]

    @classmethod
    def from_density(cls, support, density, *, mean=None, sd=None, cdf=None) -> "Marginal":
        """Normalise a tabulated density and compute any summaries not supplied."""
        support = np.asarray(support, dtype=float)
        density = np.clip(np.asarray(density, dtype=float), 0.0, None)
        Z = trapezoid(density, support)
        density = density / Z
        if mean is None:
            mean = float(trapezoid(support * density, support))
        if sd is None:
            var = float(trapezoid((support - mean) ** 2 * density, support))
            sd = float(np.sqrt(max(var, 0.0)))
        if cdf is None:
            cdf = cumulative_trapezoid(density, support, initial=0.0)
            cdf = cdf / cdf[-1]
        with np.errstate(divide="ignore"):
            logd = np.log(density)
        return cls(support, logd, float(mean), float(sd), quantiles_from_cdf(support, cdf))

    def summary(self) -> tuple:
        q = self.quantiles
        return (self.mean, self.sd, q[0.025], q[0.5], q[0.975])
