import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import quad

from conftest import DATA, load_model
from laplace_gmrf.errors import BoxTooNarrow, DimensionMismatch, DomainError, GridTooLarge, GuardExceeded
from laplace_gmrf.latent import LatentModelSpec, Prior, log_precision, make_component
from laplace_gmrf.likelihood import ObservationModel
from laplace_gmrf.oracle import (
    MIN_POINTS,
    QuadratureSpec,
    brute_posterior,
    dense_reference,
    frailty_correction_weight,
    frailty_weight_integral,
    frailty_weight_mc_mean,
    lognormal_match,
)


def scalar_conjugate(fixed=True, prior=None):
    hyper = log_precision("x.log_prec", prior or Prior("loggamma", (1.0, 5e-5)), initial=0.0, fixed=fixed)
    lat = LatentModelSpec((make_component("x", "iid", 1, hyper=(hyper,)),))
    obs = ObservationModel(("gaussian",), np.array([[2.0]]), sp.identity(1, format="csr"),
                           hypers=(log_precision("g.log_prec", initial=0.0, fixed=True),))
    return lat, obs


class TestQuadratureSpec:
    def test_too_few_points(self):
        with pytest.raises(GridTooLarge):
            QuadratureSpec(((0.0, 1.0, MIN_POINTS - 1),))

    def test_too_many_nodes(self):
        with pytest.raises(GridTooLarge):
            QuadratureSpec(((0.0, 1.0, 301),) * 3)

    def test_refined(self):
        s = QuadratureSpec(((0.0, 1.0, 41),), ((-1.0, 1.0, 51),)).refined(2)
        assert [len(a) for a in s.axes()] == [81, 101]


class TestBrutePosterior:
    def test_scalar_conjugate(self):
        lat, obs = scalar_conjugate()
        post = brute_posterior(lat, obs, QuadratureSpec(((-6.0, 8.0, 4001),)))
        (m,) = post.latent
        assert m.mean == pytest.approx(1.0, abs=1e-6)
        assert m.sd == pytest.approx(math.sqrt(0.5), abs=1e-6)
        assert post.log_evidence == pytest.approx(-0.5 * math.log(4 * math.pi) - 1.0, abs=1e-6)

    def test_evidence_with_free_precision(self):
        prior = Prior("loggamma", (2.0, 1.0))
        lat, obs = scalar_conjugate(fixed=False, prior=prior)
        post = brute_posterior(lat, obs, QuadratureSpec(((-8.0, 8.0, 801),), ((-7.0, 6.0, 801),)))
        # y | theta ~ N(0, 1 + exp(-theta))
        f = lambda t: math.exp(prior.logpdf(t) + stats.norm.logpdf(2.0, 0.0, math.sqrt(1.0 + math.exp(-t))))
        expected, _ = quad(f, -30, 30, limit=200)
        assert post.log_evidence == pytest.approx(math.log(expected), abs=1e-4)
        assert post.hyper[0].integral() == pytest.approx(1.0, abs=1e-6)

    def test_refinement_converges(self):
        parsed, data, model = load_model(DATA / "tiny" / "poisson1.json")
        spec = QuadratureSpec(((0.5, 4.0, 201),), ((-3.0, 5.0, 201),))
        a = brute_posterior(model.latent, model.obs, spec)
        b = brute_posterior(model.latent, model.obs, spec.refined(2))
        assert abs(a.latent[0].mean - b.latent[0].mean) < 1e-4
        assert abs(a.latent[0].sd - b.latent[0].sd) < 1e-4
        assert abs(a.hyper_natural_mean[0] - b.hyper_natural_mean[0]) < 1e-4 * b.hyper_natural_mean[0]

    def test_box_too_narrow(self):
        lat, obs = scalar_conjugate()
        with pytest.raises(BoxTooNarrow):
            brute_posterior(lat, obs, QuadratureSpec(((0.5, 1.5, 101),)))

    def test_dimension_guard(self):
        lat = LatentModelSpec((make_component("u", "iid", 3),))
        obs = ObservationModel(("poisson",), np.ones((3, 1)), sp.identity(3, format="csr"))
        with pytest.raises(GuardExceeded):
            brute_posterior(lat, obs, QuadratureSpec(((-1, 1, 41),) * 3, ((-1, 1, 41),)))

    def test_constraints_rejected(self):
        lat = LatentModelSpec((make_component("s", "rw1", 2, hyper=(log_precision("s.log_prec", fixed=True),), constraint="sum-to-zero"),))
        obs = ObservationModel(("poisson",), np.ones((2, 1)), sp.identity(2, format="csr"))
        with pytest.raises(GuardExceeded):
            brute_posterior(lat, obs, QuadratureSpec(((-1, 1, 41),) * 2))

    def test_axis_count_checked(self):
        lat, obs = scalar_conjugate()
        with pytest.raises(DimensionMismatch):
            brute_posterior(lat, obs, QuadratureSpec(((-1, 1, 41),) * 2))


class TestDenseReference:
    def test_identity(self):
        L, logdet = dense_reference("factorize", np.eye(4))
        np.testing.assert_array_equal(L, np.eye(4))
        assert logdet == 0.0
        np.testing.assert_array_equal(dense_reference("solve", np.eye(4), np.arange(4.0)), np.arange(4.0))
        np.testing.assert_array_equal(dense_reference("marginal_variances", np.eye(4)), np.ones(4))

    def test_mvn_logpdf(self, rng):
        M = np.array([[2.0, 0.3], [0.3, 1.0]])
        x, mu = rng.normal(size=2), rng.normal(size=2)
        expected = stats.multivariate_normal(mu, np.linalg.inv(M)).logpdf(x)
        assert dense_reference("mvn_logpdf", M, mu, x) == pytest.approx(expected, rel=1e-12)

    def test_size_limit(self):
        with pytest.raises(DimensionMismatch):
            dense_reference("logdet", np.eye(51))

    def test_unknown_operation(self):
        with pytest.raises(ValueError):
            dense_reference("eig", np.eye(2))


class TestFrailtyWeight:
    def test_matched_moments(self):
        mu, s2 = lognormal_match(4.0, 2.0)
        draws = np.log(stats.gamma(4.0, scale=0.5).rvs(size=400_000, random_state=1))
        assert mu == pytest.approx(draws.mean(), abs=5e-3)
        assert s2 == pytest.approx(draws.var(), rel=1e-2)

    @pytest.mark.parametrize("shape,rate", [(1.0, 1.0), (4.0, 4.0), (10.0, 2.0), (0.5, 2.0)])
    def test_weighted_lognormal_is_the_gamma(self, shape, rate):
        # weight * lognormal is the gamma density, so it integrates to one
        assert frailty_weight_integral(shape, rate) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("shape,rate,expected", [(1.0, 1.0, 0.9993850928700524), (4.0, 4.0, 1.0000110926357821),
                                                     (10.0, 2.0, 1.0000565139535849)])
    def test_monte_carlo_mean_seed_zero(self, shape, rate, expected):
        assert frailty_weight_mc_mean(shape, rate) == pytest.approx(expected, rel=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            frailty_correction_weight(0.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            frailty_correction_weight(1.0, -1.0, 1.0)


@given(shape=st.floats(0.2, 50.0), rate=st.floats(0.05, 50.0))
def test_weight_finite_and_positive_at_matched_location(shape, rate):
    mu, _ = lognormal_match(shape, rate)
    w = frailty_correction_weight(math.exp(mu), shape, rate)
    assert math.isfinite(w) and w > 0.0
