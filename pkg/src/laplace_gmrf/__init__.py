"""Approximate Bayesian inference for latent Gaussian Markov random field models."""

from .approx import GaussianApprox, fit, log_density_at
from .engine import (
    InlaResult,
    LatentGaussianModel,
    ThetaGrid,
    explore_grid,
    hyper_marginals,
    inla,
    latent_marginal_laplace,
    latent_marginals_gaussian,
    log_post_theta,
    optimize_theta,
)
from .gmrf import (
    CholeskyFactor,
    SparsePrecision,
    constrain_sum_to_zero,
    factorize,
    marginal_variances,
    sample,
    solve,
)
from .latent import (
    ComponentSpec,
    HyperParam,
    LatentModelSpec,
    Prior,
    assemble_prior,
    make_component,
)
from .likelihood import ObservationModel, total_loglik
from .marginal import Marginal

__version__ = "0.1.0"
