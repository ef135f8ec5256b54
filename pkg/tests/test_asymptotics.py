import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import autocovariance_variance, random_chain, truncated_potential
from smkl.asymptotics import (
    a_operator,
    clt_variance,
    fisher_q,
    fisher_r,
    fisher_s,
    potential,
    sandwich_oracle,
    sandwich_plugin,
    triple_conditional_moments,
)
from smkl.empirical import build
from smkl.errors import IdentityViolation, SingularBread, UnvisitedState
from smkl.kernels import (
    ChainKernel,
    ExponentialRFamily,
    GammaRFamily,
    SaturatedQFamily,
    SModel,
    SojournKernel,
    TiltQFamily,
)
from smkl.oracle import PopulationLaw, kl_projection
from smkl.simulator import RenewalPath, SimConfig, simulate

Q3 = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_potential_matches_truncated_series(size, seed):
    rng = np.random.default_rng(seed)
    Q = random_chain(rng, size, alpha=2.0)
    pot = potential(Q)
    g = rng.normal(size=size)
    np.testing.assert_allclose(pot.apply(g), truncated_potential(Q, pot.pi, g), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_a_operator_is_martingale_difference(size, seed):
    rng = np.random.default_rng(seed)
    Q = random_chain(rng, size, alpha=2.0)
    f = rng.normal(size=(size, size))
    Af = a_operator(potential(Q), f)
    assert np.abs((Q * Af).sum(axis=1)).max() < 1e-10
    p2 = potential(Q).pi[:, None] * Q
    assert np.sum(p2 * Af**2) == pytest.approx(autocovariance_variance(Q, f), rel=1e-8, abs=1e-12)


def test_a_operator_vector_valued():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 3, 2))
    pot = potential(Q3)
    Af = a_operator(pot, f)
    for k in range(2):
        np.testing.assert_allclose(Af[..., k], a_operator(pot, f[..., k]), atol=1e-14)


def test_clt_variance_pair_only_is_markov_variance():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.point_mass(3))
    f = np.arange(9.0).reshape(3, 3)
    v = clt_variance(law, f, f**2, "count")
    assert v == pytest.approx(autocovariance_variance(Q3, f), rel=1e-9)


def test_clt_variance_constant_is_zero():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.exponential(2.0, 3))
    mean, second = triple_conditional_moments(law.sojourn, lambda x, y, u: 0 * u + 3.0)
    assert abs(clt_variance(law, mean, second)) < 1e-12


def test_exponential_on_gamma_sandwich_closed_form():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.gamma(2.0, 3.0, 3))
    fam = ExponentialRFamily(3)
    rep = sandwich_oracle(law, fam, [1.5], "count")
    # delta method: k = 1/E U, var(U) = 2/9 -> k^4 var(U) = 1.125
    assert rep.covariance[0, 0] == pytest.approx(1.125, abs=1e-10)
    assert sandwich_oracle(law, fam, [1.5], "horizon").covariance[0, 0] == pytest.approx(
        1.125 * law.m)


@pytest.mark.parametrize("regime", ["count", "horizon"])
def test_correct_models_collapse_to_inverse_fisher(regime):
    chain = ChainKernel(Q3)
    sat = SaturatedQFamily(3)
    theta_q = sat.theta_from_matrix(Q3)
    R = SojournKernel.gamma(2.0, 3.0, 3)
    law = PopulationLaw(chain, R)
    scale = law.m if regime == "horizon" else 1.0
    cov = sandwich_oracle(law, sat, theta_q, regime).covariance
    np.testing.assert_allclose(cov, scale * np.linalg.inv(fisher_q(law, sat, theta_q)), atol=1e-8)
    g = GammaRFamily(3)
    cov = sandwich_oracle(law, g, [2.0, 3.0], regime).covariance
    np.testing.assert_allclose(cov, scale * np.linalg.inv(fisher_r(law, g, [2.0, 3.0])), atol=1e-8)
    sm = SModel(sat, g)
    th = np.concatenate([theta_q, [2.0, 3.0]])
    cov = sandwich_oracle(law, sm, th, regime).covariance
    np.testing.assert_allclose(cov, scale * np.linalg.inv(fisher_s(law, sm, th)), atol=1e-8)


def test_fisher_identity_fails_under_misspecification():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.gamma(2.0, 3.0, 3))
    with pytest.raises(IdentityViolation):
        fisher_r(law, ExponentialRFamily(3), [1.5])


def test_singular_bread():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.point_mass(3))
    fam = TiltQFamily(Q3, np.zeros((3, 3)))
    with pytest.raises(SingularBread):
        sandwich_oracle(law, fam, [0.0])


def test_unidentified_tilt_is_rejected():
    from smkl.errors import SingularHessian

    law = PopulationLaw(ChainKernel(Q3), SojournKernel.point_mass(3))
    # the two statistics sum to a constant, so only their difference is identified
    fam = TiltQFamily(np.full((3, 3), 1 / 3), np.stack([np.eye(3), 1 - np.eye(3)]))
    with pytest.raises(SingularHessian):
        kl_projection(law, fam)


def test_sandwich_is_symmetric_psd():
    law = PopulationLaw(ChainKernel(Q3), SojournKernel.gamma(2.0, 3.0, 3))
    fam = TiltQFamily(np.full((3, 3), 1 / 3), np.stack([np.eye(3), np.triu(np.ones((3, 3)), 1)]))
    model = SModel(fam, GammaRFamily(3, free=("rate",), shape=1.0))
    k = kl_projection(law, model).k_star
    cov = sandwich_oracle(law, model, k).covariance
    np.testing.assert_allclose(cov, cov.T, atol=0)
    assert np.linalg.eigvalsh(cov).min() > 0


def test_plugin_close_to_oracle_on_long_path():
    chain = ChainKernel(Q3)
    R = SojournKernel.gamma(2.0, 3.0, 3)
    fam = ExponentialRFamily(3)
    emp = build(simulate(chain, R, SimConfig("count", 200_000, seed=1)), 3)
    from smkl.estimators import fit_r

    rep = sandwich_plugin(emp, fam, fit_r(emp, fam).theta_hat)
    assert rep.provenance == "plugin"
    assert rep.covariance[0, 0] == pytest.approx(1.125, rel=0.05)


def test_plugin_unvisited_state():
    path = RenewalPath(np.array([0, 1, 0, 1]), np.arange(4.0), "count", 3, 3)
    with pytest.raises(UnvisitedState):
        sandwich_plugin(build(path, 3), ExponentialRFamily(3), [1.0])
