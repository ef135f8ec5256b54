"""Expected log-likelihoods of the Q, R and S models and a damped Newton solver.

One code path serves both the empirical criteria (weights ``P2_hat`` and
sample feature moments) and the population KL information (weights
``P2`` and exact feature moments): anything exposing ``p2`` and
``cell_moments()`` can be passed as ``src``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundaryHit, DivergentIntegral, NoConvergence, SingularHessian
from .kernels import QFamily, RFamily, SModel, feature_expectations


def _weighted(w, vals):
    """``sum_{x,y} w(x,y) vals(x,y,...)`` ignoring cells of zero weight."""
    mask = w > 0
    sel = vals[mask]
    if not np.all(np.isfinite(sel)):
        raise DivergentIntegral("log-density not finite on the support")
    return np.tensordot(w[mask], sel, axes=(0, 0))


def criterion(target, src, theta):
    """Value, gradient and Hessian of ``src[log density_theta]``.

    ``target`` is a :class:`QFamily` (pair criterion), an
    :class:`RFamily` (triple criterion) or an :class:`SModel` (their sum).
    """
    w = src.p2
    if isinstance(target, QFamily):
        with np.errstate(divide="ignore"):
            return (float(_weighted(w, target.log_matrix(theta))),
                    _weighted(w, target.score_matrix(theta)),
                    _weighted(w, target.hessian_matrix(theta)))
    m1, m2 = src.cell_moments()
    if isinstance(target, RFamily):
        e_log, e_score, _, e_hess = target.cell_expectations(theta, m1, m2)
    elif isinstance(target, SModel):
        logq, chi, chid = target.q_parts(theta)
        e_log, e_score, _, e_hess = feature_expectations(*target.r_coefs(theta), m1, m2)
        with np.errstate(divide="ignore"):
            e_log = e_log + logq
        e_score = e_score + chi
        e_hess = e_hess + chid
    else:
        raise TypeError(f"unsupported target {type(target).__name__}")
    return float(_weighted(w, e_log)), _weighted(w, e_score), _weighted(w, e_hess)


@dataclass
class NewtonResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    hess: np.ndarray
    iterations: int
    converged: bool

    @property
    def grad_norm(self):
        return float(np.max(np.abs(self.grad)))


def newton_maximize(fun, theta0, lower, upper, tol=1e-9, max_iter=200):
    """Damped Newton ascent projected onto the box ``[lower, upper]``.

    ``fun(theta)`` returns ``(value, grad, hess)``. Steps are halved until
    the objective does not decrease; a Hessian that is not negative
    definite is shifted by a multiple of the identity. Raises
    :class:`NoConvergence` after ``max_iter`` iterations and
    :class:`BoundaryHit` when the iterate is pinned to the box with the
    gradient pointing outwards.
    """
    theta = np.clip(np.asarray(theta0, dtype=float), lower, upper)
    f, g, H = fun(theta)
    for it in range(max_iter + 1):
        if np.max(np.abs(g)) < tol:
            return NewtonResult(theta, f, g, H, it, True)
        if it == max_iter:
            break
        pinned = ((theta <= lower) & (g < 0)) | ((theta >= upper) & (g > 0))
        free = ~pinned
        if pinned.any() and np.max(np.abs(g[free]), initial=0.0) < tol:
            raise BoundaryHit("iterate pinned to the parameter box", theta=theta, grad=g)
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        negH = -0.5 * (Hf + Hf.T)
        eig_min = np.linalg.eigvalsh(negH).min()
        if eig_min <= 1e-12 * max(1.0, np.abs(negH).max()):
            negH = negH + (abs(eig_min) + 1e-6 * max(1.0, np.abs(negH).max())) * np.eye(len(gf))
        step = np.zeros_like(theta)
        step[free] = np.linalg.solve(negH, gf)
        slack = 1e-13 * (1.0 + abs(f))
        t = 1.0
        for _ in range(60):
            cand = np.clip(theta + t * step, lower, upper)
            try:
                fc, gc, Hc = fun(cand)
            except DivergentIntegral:
                fc = -np.inf
            if np.isfinite(fc) and fc >= f - slack:
                break
            t *= 0.5
        else:
            raise NoConvergence("line search failed", theta=theta, grad=g)
        if np.array_equal(cand, theta):
            # no representable progress left
            converged = np.max(np.abs(gc)) < tol
            if not converged and (pinned.any() or np.any((cand <= lower) | (cand >= upper))):
                raise BoundaryHit("iterate pinned to the parameter box", theta=theta, grad=gc)
            if not converged:
                raise NoConvergence("no further progress possible", theta=theta, grad=gc)
            return NewtonResult(cand, fc, gc, Hc, it + 1, True)
        theta, f, g, H = cand, fc, gc, Hc
    raise NoConvergence("Newton iteration limit reached", theta=theta, grad=g,
                        iterations=max_iter)


def check_local_max(hess, tol=0.0):
    """Raise :class:`SingularHessian` unless ``hess`` is negative definite."""
    sym = 0.5 * (hess + hess.T)
    eig = np.linalg.eigvalsh(sym)
    if eig.max() >= -tol * max(1.0, np.abs(eig).max()):
        raise SingularHessian("Hessian at the solution is not negative definite",
                              max_eigenvalue=float(eig.max()))
    return eig


def multistart_maximize(fun, theta0, lower, upper, rng=None, n_starts=4, **kw):
    """Newton from ``theta0``; on failure retry from zero and ``n_starts`` box draws.

    The best converged run wins (highest value, then lexicographically
    smallest parameter).
    """
    try:
        return newton_maximize(fun, theta0, lower, upper, **kw)
    except (NoConvergence, BoundaryHit) as first:
        err = first
    rng = np.random.default_rng(0) if rng is None else rng
    lo = np.where(np.isfinite(lower), lower, -5.0)
    hi = np.where(np.isfinite(upper), upper, 5.0)
    starts = [np.clip(np.zeros_like(lo), lower, upper)]
    starts += [rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo)) for _ in range(n_starts)]
    results = []
    for s in starts:
        try:
            results.append(newton_maximize(fun, s, lower, upper, **kw))
        except (NoConvergence, BoundaryHit) as e:
            err = e
    results = [r for r in results if r.converged]
    if not results:
        raise err
    results.sort(key=lambda r: (-r.value, tuple(r.theta)))
    return results[0]
