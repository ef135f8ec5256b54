"""Partial and full maximum likelihood estimators for Models Q, R and S.

Also the closed-form estimators available in special cases (constant
exponential rate, Gaussian AR(1)) and the marginal pair-likelihood
estimator that models ``P2`` instead of ``Q``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateSeries
from .kernels import QFamily, RFamily, SaturatedQFamily, SModel, stationary_distribution
from .likelihood import check_local_max, criterion, multistart_maximize

GRAD_TOL = 1e-9


@dataclass
class EstimateReport:
    theta_hat: np.ndarray
    model_tag: str
    iterations: int
    grad_norm: float
    hessian_at_solution: np.ndarray
    converged: bool
    objective: float = float("nan")
    flags: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["theta_hat"] = np.asarray(self.theta_hat).tolist()
        d["hessian_at_solution"] = np.asarray(self.hessian_at_solution).tolist()
        return d

    def to_json(self):
        return json.dumps(self.to_dict())


def _fit(target, src, tag, init, tol=GRAD_TOL, flags=()):
    theta0 = target.initial(src) if init is None else np.atleast_1d(np.asarray(init, float))
    res = multistart_maximize(lambda t: criterion(target, src, t), theta0,
                              target.lower, target.upper, tol=tol)
    check_local_max(res.hess)
    return EstimateReport(res.theta, tag, res.iterations, res.grad_norm, res.hess,
                          res.converged, res.value, list(flags))


def _unvisited_flags(emp):
    rows = np.flatnonzero(emp.pair_counts.sum(axis=1) == 0)
    return [f"unvisited_row:{int(x)}" for x in rows]


def fit_q(emp, fam, init=None):
    """Maximize ``P2_hat[log q_theta]``.

    For :class:`SaturatedQFamily` rows without observations are held at
    the uniform row and flagged.
    """
    flags = _unvisited_flags(emp)
    if isinstance(fam, SaturatedQFamily) and flags:
        return _fit_saturated_partial(emp, fam, init, flags)
    return _fit(fam, emp, "Q", init, flags=flags)


def _fit_saturated_partial(emp, fam, init, flags):
    # unvisited rows carry no information: hold them at the uniform row
    S = fam.n_states
    visited = emp.pair_counts.sum(axis=1) > 0
    keep = np.repeat(visited, S - 1)
    theta = np.zeros(fam.dim) if init is None else np.asarray(init, float).copy()
    theta[~keep] = 0.0

    def fun(t):
        full = theta.copy()
        full[keep] = t
        f, g, H = criterion(fam, emp, full)
        return f, g[keep], H[np.ix_(keep, keep)]

    res = multistart_maximize(fun, theta[keep], fam.lower[keep], fam.upper[keep], tol=GRAD_TOL)
    check_local_max(res.hess)
    theta[keep] = res.theta
    _, g, H = criterion(fam, emp, theta)
    return EstimateReport(theta, "Q", res.iterations, float(np.abs(g).max()), H,
                          res.converged, res.value, flags)


def fit_r(emp, fam, init=None):
    """Maximize ``P3_hat[log r_theta]``."""
    if not isinstance(fam, RFamily):
        raise TypeError("fit_r needs an RFamily")
    return _fit(fam, emp, "R", init)


def fit_s(emp, model, init=None):
    """Maximize ``P2_hat[log q_theta] + P3_hat[log r_theta]``."""
    if not isinstance(model, SModel):
        raise TypeError("fit_s needs an SModel")
    return _fit(model, emp, "S", init, flags=_unvisited_flags(emp))


def fit_exponential_closed_form(emp):
    """Constant-rate exponential estimator ``1 / mean(U)``."""
    return 1.0 / emp.mhat


# --------------------------------------------------------------------------
# Gaussian AR(1) on the real line
# --------------------------------------------------------------------------


def fit_ar1_least_squares(series):
    """``sum X_{j-1} X_j / sum X_{j-1}^2``."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise DegenerateSeries("need at least two observations")
    den = np.dot(x[:-1], x[:-1])
    if not den > 0:
        raise DegenerateSeries("sum of squared lagged values is zero")
    return float(np.dot(x[:-1], x[1:]) / den)


class GaussianAR1Family:
    """Transition density ``q_theta(x, y) = phi_tau(y - theta x)`` on the real line."""

    dim = 1

    def __init__(self, tau=1.0, lower=-1e6, upper=1e6):
        self.tau = float(tau)
        self.lower = np.array([lower], float)
        self.upper = np.array([upper], float)

    def logpdf(self, theta, x, y):
        r = y - theta * x
        return -0.5 * np.log(2 * np.pi * self.tau**2) - 0.5 * r**2 / self.tau**2

    def score(self, theta, x, y):
        return x * (y - theta * x) / self.tau**2

    def hessian(self, theta, x, y):
        return -(x**2) / self.tau**2

    def criterion(self, series, theta):
        x = np.asarray(series, float)
        a, b = x[:-1], x[1:]
        (t,) = theta
        return (float(np.mean(self.logpdf(t, a, b))),
                np.array([np.mean(self.score(t, a, b))]),
                np.array([[np.mean(self.hessian(t, a, b))]]))


def fit_ar1_gaussian(series, tau=1.0, init=0.0):
    """Newton solve of the Gaussian AR(1) score equation ``sum x (y - theta x) = 0``."""
    x = np.asarray(series, dtype=float)
    if len(x) < 2 or not np.dot(x[:-1], x[:-1]) > 0:
        raise DegenerateSeries("series too short or identically zero")
    fam = GaussianAR1Family(tau)
    res = multistart_maximize(lambda t: fam.criterion(x, t), [init], fam.lower, fam.upper,
                              tol=GRAD_TOL * max(1.0, np.mean(x**2) / tau**2))
    check_local_max(res.hess)
    return EstimateReport(res.theta, "Q", res.iterations, res.grad_norm, res.hess,
                          res.converged, res.value)


# --------------------------------------------------------------------------
# Marginal pair likelihood
# --------------------------------------------------------------------------


def _log_stationary(fam, theta):
    return np.log(stationary_distribution(fam.matrix(theta)))


def _fd_step(theta):
    return 1e-6 * (1.0 + np.abs(theta))


def stationary_log_derivative(fam, theta):
    """``d log p_{1 theta}(x) / d theta``, shape ``(S, d)``, by central differences."""
    theta = np.atleast_1d(np.asarray(theta, float))
    h = _fd_step(theta)
    out = np.empty((fam.n_states, fam.dim))
    for i in range(fam.dim):
        e = np.zeros(fam.dim)
        e[i] = h[i]
        out[:, i] = (_log_stationary(fam, theta + e) - _log_stationary(fam, theta - e)) / (2 * h[i])
    return out


def _marginal_grad(fam, theta, p1):
    return p1 @ stationary_log_derivative(fam, theta)


def fit_marginal_pair(emp, fam, init=None):
    """Maximize ``P2_hat[log p_{1 theta}(x) + log q_theta(x, y)]``.

    ``p_{1 theta}`` is the stationary law of ``Q_theta``. Its parameter
    derivative is taken by central finite differences with step
    ``1e-6 (1 + |theta|)``; the Hessian of that term differences the
    finite-difference gradient with step ``1e-4 (1 + |theta|)``.
    """
    if not isinstance(fam, QFamily):
        raise TypeError("fit_marginal_pair needs a QFamily")
    p1 = emp.p1

    def fun(theta):
        f, g, H = criterion(fam, emp, theta)
        f += float(p1 @ _log_stationary(fam, theta))
        g = g + _marginal_grad(fam, theta, p1)
        k = 1e-4 * (1.0 + np.abs(theta))
        Hm = np.empty((fam.dim, fam.dim))
        for i in range(fam.dim):
            e = np.zeros(fam.dim)
            e[i] = k[i]
            Hm[:, i] = (_marginal_grad(fam, theta + e, p1)
                        - _marginal_grad(fam, theta - e, p1)) / (2 * k[i])
        return f, g, H + 0.5 * (Hm + Hm.T)

    theta0 = fam.initial(emp) if init is None else np.atleast_1d(np.asarray(init, float))
    res = multistart_maximize(fun, theta0, fam.lower, fam.upper, tol=GRAD_TOL)
    check_local_max(res.hess)
    return EstimateReport(res.theta, "marginal2", res.iterations, res.grad_norm, res.hess,
                          res.converged, res.value)


def fit(emp, target, init=None):
    """Dispatch to :func:`fit_q`, :func:`fit_r` or :func:`fit_s` by target type."""
    if isinstance(target, SModel):
        return fit_s(emp, target, init)
    if isinstance(target, RFamily):
        return fit_r(emp, target, init)
    if isinstance(target, QFamily):
        return fit_q(emp, target, init)
    raise TypeError(f"unsupported target {type(target).__name__}")
