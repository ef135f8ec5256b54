import numpy as np
import pytest

from smkl.errors import ExcessiveFailures, NoConvergence, OracleFailure, PerturbationInvalid
from smkl.experiments import (
    PerturbationDirection,
    Scenario,
    lan_diagnostic,
    marginal_gap_sd,
    martingale_clt_check,
    perturbed_chain,
    remark6_diagnostic,
    run_mc,
)
from smkl.kernels import (
    ChainKernel,
    ExponentialRFamily,
    SaturatedQFamily,
    SojournKernel,
    TiltQFamily,
)
from smkl.oracle import PopulationLaw

Q2 = ChainKernel(np.array([[0.7, 0.3], [0.4, 0.6]]))
Q3 = ChainKernel(np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]]))
H3 = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]])


def _scenario(M=40, seed=11):
    return Scenario(Q2, SojournKernel.exponential(1.5, 2), ExponentialRFamily(2), "count",
                    5000, M, seed)


def test_run_mc_is_deterministic_and_order_free():
    a = run_mc(_scenario())
    b = run_mc(_scenario(), workers=4)
    assert a.to_json() == b.to_json()
    assert a.to_csv() == b.to_csv()
    assert a.failures == 0 and len(a.records) == 40


def test_report_fields_and_csv():
    rep = run_mc(_scenario(M=10))
    d = rep.to_dict()
    assert set(d) >= {"k_star", "mean_scaled_error", "empirical_cov", "predicted_cov",
                      "cov_rel_error", "normality", "failures"}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "replication,seed,theta_0,N,converged"
    assert len(lines) == 11
    assert lines[1].split(",")[1] == str(11 ^ 0)


def test_scenario_needs_two_replications():
    with pytest.raises(ValueError):
        Scenario(Q2, SojournKernel.point_mass(2), ExponentialRFamily(2), "count", 10, 1)


def test_oracle_failure_is_wrapped():
    # a tilt statistic of zero leaves the criterion flat
    fam = TiltQFamily(Q3.matrix, np.zeros((3, 3)))
    s = Scenario(Q3, SojournKernel.point_mass(3), fam, "count", 100, 2)
    with pytest.raises(OracleFailure):
        run_mc(s)


def test_excessive_failures(monkeypatch):
    import smkl.experiments as ex

    def broken(emp, target, init=None):
        raise NoConvergence("forced")

    monkeypatch.setattr(ex, "fit", broken)
    with pytest.raises(ExcessiveFailures):
        run_mc(_scenario(M=5))


def test_normality_correct_model_r():
    s = Scenario(Q2, SojournKernel.exponential(1.5, 2), ExponentialRFamily(2), "count",
                 20000, 2000, 99)
    rep = run_mc(s)
    assert abs(rep.normality["skewness"][0]) < 0.15
    assert abs(rep.normality["excess_kurtosis"][0]) < 0.3
    assert rep.cov_rel_error < 0.1


# ---------------------------------------------------------------- LAN


def test_zero_direction_gives_zero_ratio():
    R = SojournKernel.exponential(2.0, 2)
    d = PerturbationDirection(Q2, R)
    rep = lan_diagnostic(Q2, R, d, 1000, 5, 1)
    assert rep.mean == 0.0 and rep.variance == 0.0 and rep.predicted_variance == 0.0


def test_direction_centering():
    R = SojournKernel.exponential(np.array([1.0, 3.0]), 2)
    d = PerturbationDirection(Q2, R, pair=[[1.0, -2.0], [0.5, 4.0]],
                              triple=lambda x, y, u: np.exp(-u) + x)
    assert np.abs((Q2.matrix * d.v).sum(axis=1)).max() < 1e-12
    for x in range(2):
        for y in range(2):
            assert abs(R.expect(lambda u: d.w(x, y, u), x, y)) < 1e-10


def test_perturbation_invalid_when_n_small():
    R = SojournKernel.point_mass(2)
    d = PerturbationDirection(Q2, R, pair=[[0.0, 100.0], [0.0, 0.0]])
    with pytest.raises(PerturbationInvalid):
        perturbed_chain(Q2, d.v, 1.0)


def test_lan_small_run_sensible():
    R = SojournKernel.point_mass(3)
    d = PerturbationDirection(Q3, R, pair=3 * H3)
    rep = lan_diagnostic(Q3, R, d, 20000, 200, 5)
    assert rep.mean < 0
    assert rep.variance_rel_error < 0.3 and rep.mean_rel_error < 0.3


# ---------------------------------------------------------------- CLT


def test_clt_constant_function():
    R = SojournKernel.exponential(2.0, 2)
    rep = martingale_clt_check(Q2, R, lambda x, y, u: 0 * u + 1.0, 2000, 5, 0)
    assert abs(rep.variance) < 1e-20 and abs(rep.predicted_variance) < 1e-12


def test_clt_pair_function_point_mass():
    R = SojournKernel.point_mass(2)
    f = np.array([[1.0, -1.0], [2.0, 0.0]])
    rep = martingale_clt_check(Q2, R, lambda x, y, u: f[x, y] + 0 * u, 5000, 300, 2, "count")
    assert rep.variance_rel_error < 0.25


# ---------------------------------------------------------------- marginal pair


def test_marginal_gap_vanishes_for_saturated():
    fam = SaturatedQFamily(3)
    theta = fam.theta_from_matrix(Q3.matrix)
    assert np.max(marginal_gap_sd(fam, theta)) < 1e-6


def test_marginal_gap_tilt_is_positive_but_small():
    fam = TiltQFamily(Q3.matrix, H3)
    sd = marginal_gap_sd(fam, [0.5])[0]
    assert 0 < sd < 0.2


def test_remark6_structure():
    fam = TiltQFamily(Q3.matrix, H3)
    rep = remark6_diagnostic(fam, [0.5], SojournKernel.point_mass(3), (1000, 4000), 20, 3)
    assert len(rep.median_scaled_gap) == 2 and rep.failures == 0
    assert isinstance(rep.monotone_decrease, bool)
    assert rep.predicted_median_scaled_gap > 0


def test_remark6_theta_free_stationary_law():
    # circulant tilt: every Q_theta is doubly stochastic, so the uniform law is stationary
    fam = TiltQFamily(np.full((3, 3), 1 / 3), np.roll(np.eye(3), 1, axis=1))
    rep = remark6_diagnostic(fam, [0.3], SojournKernel.point_mass(3), (1000, 4000), 10, 4)
    assert max(rep.median_scaled_gap) < 1e-6


def test_population_law_mean():
    law = PopulationLaw(Q2, SojournKernel.gamma(2.0, 3.0, 2))
    assert law.m == pytest.approx(2 / 3)
