"""Potential operator, martingale approximation and sandwich covariances.

For a finite irreducible aperiodic chain the potential ``G = sum_i Q^i``
on centered functions is the fundamental matrix
``Z = (I - Q + 1 pi^T)^{-1}`` restricted to ``{g : pi^T g = 0}``.

Pair functions are arrays of shape ``(S, S)`` or ``(S, S, k)``. The
martingale part of a pair function ``f`` is

    Af(x, y) = fbar(x, y) - h(x) + Gh(y) - QGh(x),

with ``fbar = f - P2[f]`` and ``h = Q fbar`` (row conditional means),
which satisfies ``Q Af = 0`` and ``P2[(Af)^2]`` = long-run variance of
``f(X_{j-1}, X_j)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IdentityViolation,
    SingularBread,
    SingularMatrix,
    UnvisitedState,
)
from .kernels import (
    ChainKernel,
    QFamily,
    RFamily,
    SModel,
    feature_expectations,
)

COND_LIMIT = 1e12
MIN_CELL = 5


@dataclass(frozen=True, eq=False)
class PotentialOperator:
    """Fundamental matrix of an irreducible aperiodic chain."""

    chain: ChainKernel
    fundamental: np.ndarray = field(init=False)

    def __post_init__(self):
        Q = self.chain.matrix
        pi = self.chain.stationary
        S = Q.shape[0]
        M = np.eye(S) - Q + np.outer(np.ones(S), pi)
        if np.linalg.cond(M) > COND_LIMIT:
            raise SingularMatrix("I - Q + 1 pi^T is numerically singular")
        Z = np.linalg.inv(M)
        Z.setflags(write=False)
        object.__setattr__(self, "fundamental", Z)

    @property
    def Q(self):
        return self.chain.matrix

    @property
    def pi(self):
        return self.chain.stationary

    def apply(self, g):
        """``G(g - pi[g])`` for ``g`` of shape ``(S,)`` or ``(S, k)``."""
        g = np.asarray(g, dtype=float)
        centred = g - np.tensordot(self.pi, g, axes=(0, 0))
        return self.fundamental @ centred


def potential(chain):
    """Potential operator of ``chain`` (a :class:`ChainKernel` or a matrix).

    Matrices are validated through :class:`ChainKernel`, which rejects
    reducible and periodic chains.
    """
    if not isinstance(chain, ChainKernel):
        chain = ChainKernel(chain)
    return PotentialOperator(chain)


def a_operator(pot, f):
    """Martingale part ``Af`` of a pair function (see module docstring)."""
    f = np.asarray(f, dtype=float)
    Q, pi = pot.Q, pot.pi
    p2 = pi[:, None] * Q
    fbar = f - np.tensordot(p2, f, axes=([0, 1], [0, 1]))
    h = np.einsum("xy,xy...->x...", Q, fbar)
    Gh = pot.apply(h)
    QGh = np.tensordot(Q, Gh, axes=(1, 0))
    return fbar - h[:, None] + Gh[None, :] - QGh[:, None]


def pair_outer(w, f, g=None):
    """``sum_{x,y} w(x,y) f(x,y) g(x,y)^T`` for vector-valued pair functions."""
    g = f if g is None else g
    return np.einsum("xy,xyk,xyl->kl", w, f, g)


# --------------------------------------------------------------------------
# Fisher information and conditional score means
# --------------------------------------------------------------------------


def _check_identity(neg_hess, outer, what):
    gap = float(np.max(np.abs(neg_hess - outer)))
    if gap > 1e-8 * max(1.0, float(np.max(np.abs(outer)))):
        raise IdentityViolation(f"{what}: -E[Hessian] and E[score score^T] disagree",
                                gap=gap)
    return 0.5 * (outer + outer.T)


def fisher_q(law, fam, theta):
    """Partial information ``-P2[chi_dot] = P2[chi chi^T]`` for Model Q.

    ``law`` supplies ``P2``; with ``law=None`` the stationary law of
    ``Q_theta`` itself is used. Raises :class:`IdentityViolation` when the
    two forms disagree (the family does not contain the truth).
    """
    p2 = ChainKernel(fam.matrix(theta)).pair_law if law is None else law.p2
    chi = fam.score_matrix(theta)
    neg = -np.einsum("xy,xykl->kl", p2, fam.hessian_matrix(theta))
    return _check_identity(neg, pair_outer(p2, chi), "Model Q")


def fisher_r(law, fam, theta):
    """Partial information ``-P3[rho_dot] = P3[rho rho^T]`` for Model R.

    ``P3 = P2 (x) R`` with ``P2`` from ``law`` and ``R`` the law's sojourn
    kernel.
    """
    _, _, outer, hess = fam.cell_expectations(theta, *law.cell_moments())
    neg = -np.einsum("xy,xykl->kl", law.p2, hess)
    return _check_identity(neg, np.einsum("xy,xykl->kl", law.p2, outer), "Model R")


def fisher_s(law, model, theta):
    """Information ``I + J`` of the joint model at ``theta``."""
    _, chi, chid = model.q_parts(theta)
    _, _, outer_r, hess_r = feature_expectations(*model.r_coefs(theta), *law.cell_moments())
    neg = -np.einsum("xy,xykl->kl", law.p2, chid + hess_r)
    outer = pair_outer(law.p2, chi) + np.einsum("xy,xykl->kl", law.p2, outer_r)
    return _check_identity(neg, outer, "Model S")


def conditional_score_mean(sojourn, fam, theta):
    """``R rho_theta(x, y)``: exact conditional mean of the score under ``sojourn``."""
    _, e_score, _, _ = fam.cell_expectations(theta, *sojourn.feature_moments())
    return e_score


# --------------------------------------------------------------------------
# Sandwich covariances
# --------------------------------------------------------------------------


@dataclass
class SandwichReport:
    k_star: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    regime: str
    provenance: str
    m: float = 1.0
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "k_star": np.asarray(self.k_star).tolist(),
            "bread": np.asarray(self.bread).tolist(),
            "meat": np.asarray(self.meat).tolist(),
            "covariance": np.asarray(self.covariance).tolist(),
            "regime": self.regime,
            "provenance": self.provenance,
            "m": self.m,
            "flags": list(self.flags),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def _parts(target, theta, m1, m2):
    """Pair-level score part ``f`` (chi + R rho), bread integrand and
    conditional score covariance, all per cell."""
    S = target.n_states
    d = target.dim
    zero_v = np.zeros((S, S, d))
    zero_m = np.zeros((S, S, d, d))
    if isinstance(target, QFamily):
        return target.score_matrix(theta), target.hessian_matrix(theta), zero_m, zero_v
    if isinstance(target, RFamily):
        _, e_score, e_outer, e_hess = target.cell_expectations(theta, m1, m2)
        return e_score, e_hess, e_outer, e_score
    if isinstance(target, SModel):
        _, chi, chid = target.q_parts(theta)
        _, e_score, e_outer, e_hess = feature_expectations(*target.r_coefs(theta), m1, m2)
        return chi + e_score, chid + e_hess, e_outer, e_score
    raise TypeError(f"unsupported target {type(target).__name__}")


def _assemble(bread, meat, m, regime):
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularBread("expected Hessian is singular", cond=float(cond))
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv.T
    if regime == "horizon":
        cov = m * cov
    elif regime != "count":
        raise ValueError(f"unknown regime {regime!r}")
    return 0.5 * (cov + cov.T)


def sandwich_oracle(law, target, k_star, regime="horizon"):
    """Exact asymptotic covariance of ``sqrt(n) (theta_hat - k_star)``.

    Bread is ``P[Hessian of log-density]``; meat is
    ``P2[A f A f^T] + P3[(rho - R rho)(rho - R rho)^T]`` with ``f = chi``
    (Model Q), ``R rho`` (Model R) or ``chi + R rho`` (Model S). The
    horizon regime multiplies by the mean sojourn ``m``; the count regime
    does not.
    """
    theta = np.atleast_1d(np.asarray(k_star, float))
    m1, m2 = law.cell_moments()
    f, hess, e_outer, r_mean = _parts(target, theta, m1, m2)
    w = law.p2
    pot = potential(law.chain)
    Af = a_operator(pot, f)
    cond_var = e_outer - r_mean[..., :, None] * r_mean[..., None, :]
    meat = pair_outer(w, Af) + np.einsum("xy,xykl->kl", w, cond_var)
    bread = np.einsum("xy,xykl->kl", w, hess)
    meat = 0.5 * (meat + meat.T)
    cov = _assemble(bread, meat, law.m, regime)
    return SandwichReport(theta, bread, meat, cov, regime, "oracle", law.m)


def sandwich_plugin(emp, target, theta_hat, regime=None):
    """Plug-in version of :func:`sandwich_oracle` from one observed path.

    Uses the row-normalized pair counts as the chain, its potential, the
    empirical pair weights, per-cell sample means of the sojourn score
    (cells with fewer than 5 observations borrow the pooled mean and are
    flagged) and ``mhat`` for ``m``.
    """
    regime = emp.regime if regime is None else regime
    theta = np.atleast_1d(np.asarray(theta_hat, float))
    rows = emp.pair_counts.sum(axis=1)
    if np.any(rows == 0):
        raise UnvisitedState("every state must be visited",
                             unvisited=np.flatnonzero(rows == 0))
    chain = ChainKernel(emp.pair_counts / rows[:, None])
    w = emp.p2
    m1, m2 = emp.cell_moments()
    f, hess, e_outer, r_mean = _parts(target, theta, m1, m2)
    flags = []
    if not isinstance(target, QFamily):
        sparse = emp.pair_counts < MIN_CELL
        if np.any(sparse & (emp.pair_counts > 0)):
            pooled = np.einsum("xy,xyk->k", w, r_mean)
            used = np.where(sparse[..., None], pooled, r_mean)
            f = f - r_mean + used
            # second moment about the borrowed centre
            e_outer = (e_outer - r_mean[..., :, None] * used[..., None, :]
                       - used[..., :, None] * r_mean[..., None, :]
                       + 2 * used[..., :, None] * used[..., None, :])
            r_mean = used
            flags += [f"pooled_cell:{int(x)},{int(y)}"
                      for x, y in np.argwhere(sparse & (emp.pair_counts > 0))]
    Af = a_operator(potential(chain), f)
    cond_var = e_outer - r_mean[..., :, None] * r_mean[..., None, :]
    meat = pair_outer(w, Af) + np.einsum("xy,xykl->kl", w, cond_var)
    meat = 0.5 * (meat + meat.T)
    bread = np.einsum("xy,xykl->kl", w, hess)
    cov = _assemble(bread, meat, emp.mhat, regime)
    return SandwichReport(theta, bread, meat, cov, regime, "plugin", emp.mhat, flags)


# --------------------------------------------------------------------------
# Additive functionals
# --------------------------------------------------------------------------


def triple_conditional_moments(sojourn, f):
    """Per-cell ``E[f(x, y, U)]`` and ``E[f(x, y, U)^2]`` by quadrature.

    ``f(x, y, u)`` is vectorized in ``u`` and scalar-valued.
    """
    S = sojourn.size
    mean = np.empty((S, S))
    second = np.empty((S, S))
    for x in range(S):
        for y in range(S):
            v = sojourn.expect(lambda u, x=x, y=y: np.stack(
                [f(x, y, u), f(x, y, u) ** 2], axis=-1), x, y)
            mean[x, y], second[x, y] = v
    return mean, second


def clt_variance(law, cell_mean, cell_second, regime="horizon"):
    """Limit variance of ``n^{-1/2} sum_{j<=N} (f - P3[f])``.

    ``cell_mean`` is ``Rf`` and ``cell_second`` is ``R[f^2]``; the result
    is ``P2[(A Rf)^2] + P3[(f - Rf)^2]``, divided by ``m`` in the horizon
    regime.
    """
    pot = potential(law.chain)
    ARf = a_operator(pot, cell_mean)
    w = law.p2
    v = float(np.sum(w * ARf**2) + np.sum(w * (cell_second - cell_mean**2)))
    return v / law.m if regime == "horizon" else v
