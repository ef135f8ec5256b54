"""Fitting an exponential holding-time model to gamma holding times.

The truth is a two-state chain whose sojourns are gamma(2, 3). We fit
a constant-rate exponential model anyway, find the rate it converges
to, predict the spread of the estimate from the sandwich formula, and
then check that prediction with a small simulation study.

Run:  python demos/misspecified_sojourns.py
"""

import numpy as np

import smkl

chain = smkl.ChainKernel(np.array([[0.7, 0.3], [0.4, 0.6]]))
truth = smkl.SojournKernel.gamma(2.0, 3.0, chain.size)
model = smkl.ExponentialRFamily(chain.size)
law = smkl.PopulationLaw(chain, truth)

# The exponential fit targets one over the mean sojourn, whatever the true shape.
proj = smkl.kl_projection(law, model)
print(f"pseudo-true rate      : {proj.k_star[0]:.6f}   (1 / E[U] = {1 / law.m:.6f})")

# Count regime: sqrt(n) (rate_hat - 1.5) has this limiting variance.
sw = smkl.sandwich_oracle(law, model, proj.k_star, regime="count")
naive = 1.5**2  # what the inverse Fisher information would claim
print(f"sandwich variance     : {sw.covariance[0, 0]:.6f}")
print(f"model-based variance  : {naive:.6f}  <- too large by a factor {naive / sw.covariance[0, 0]:.1f}")

# One path, then the plug-in sandwich built from that path alone.
path = smkl.simulate(chain, truth, smkl.SimConfig("count", 200_000, seed=1))
emp = smkl.build(path, chain.size)
est = smkl.fit_r(emp, model)
plug = smkl.sandwich_plugin(emp, model, est.theta_hat)
print(f"one-path estimate     : {est.theta_hat[0]:.5f}, plug-in variance {plug.covariance[0, 0]:.4f}")

# A short Monte Carlo run.
scenario = smkl.Scenario(chain, truth, model, "count", 20_000, 300, base_seed=5)
rep = smkl.run_mc(scenario)
print(f"Monte Carlo variance  : {rep.empirical_cov[0, 0]:.4f} over {rep.replications} paths "
      f"(relative error {rep.cov_rel_error:.3f})")
