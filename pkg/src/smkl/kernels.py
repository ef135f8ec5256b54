"""True-model kernels and fitted parametric families.

The state space is ``{0, ..., size-1}``. Transition densities of the
embedded chain are taken with respect to counting measure, sojourn
densities with respect to Lebesgue measure on ``(0, inf)`` (or the Dirac
mass at one for the point-mass kernel).

All shipped sojourn families have log-densities that are linear in the
feature vector ``phi(u) = (1, u, log u)`` with cell-dependent
coefficients. Conditional expectations of log-densities, scores and
Hessians therefore reduce to the first two conditional moments of
``phi(U)``, which are available in closed form for every shipped true
sojourn kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
from scipy import integrate, special
from scipy.sparse.csgraph import connected_components

from .errors import (
    KernelError,
    NotStochastic,
    OutOfDomain,
    Periodic,
    QuadratureFailure,
    Reducible,
)

N_FEATURES = 3
QUAD_RTOL = 1e-10


def features(u):
    """Stack ``(1, u, log u)`` along a new trailing axis."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        return np.stack([np.ones_like(u), u, np.log(u)], axis=-1)


# --------------------------------------------------------------------------
# Embedded chain
# --------------------------------------------------------------------------


def _check_stochastic(Q, tol=1e-9):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise NotStochastic("transition matrix must be square", shape=Q.shape)
    if Q.shape[0] < 1 or np.any(~np.isfinite(Q)) or np.any(Q < 0):
        raise NotStochastic("transition matrix entries must be finite and >= 0")
    dev = np.abs(Q.sum(axis=1) - 1.0)
    if np.any(dev > tol):
        raise NotStochastic("row sums differ from one", max_deviation=float(dev.max()))
    return Q


def closed_classes(Q):
    """Return the closed communicating classes of ``Q`` as index arrays."""
    adj = np.asarray(Q) > 0
    ncomp, labels = connected_components(adj, directed=True, connection="strong")
    out = []
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        leaves = adj[members][:, labels != c].any()
        if not leaves:
            out.append(members)
    return out


def period(Q):
    """Period of an irreducible chain (1 means aperiodic)."""
    adj = np.asarray(Q) > 0
    size = adj.shape[0]
    # BFS levels from state 0; period = gcd of level[x] + 1 - level[y] over edges.
    level = np.full(size, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for x in frontier:
            for y in np.flatnonzero(adj[x]):
                if level[y] < 0:
                    level[y] = level[x] + 1
                    nxt.append(int(y))
        frontier = nxt
    d = 0
    for x, y in zip(*np.nonzero(adj)):
        d = gcd(d, int(abs(level[x] + 1 - level[y])))
    return d


def stationary_distribution(Q):
    """Stationary law of a row-stochastic matrix with one closed class.

    Raises :class:`NotStochastic` when a row sum is off by more than 1e-9
    and :class:`Reducible` when there is more than one closed class.
    States outside the closed class get probability zero.
    """
    Q = _check_stochastic(Q)
    size = Q.shape[0]
    classes = closed_classes(Q)
    if len(classes) != 1:
        raise Reducible("chain has more than one closed communicating class",
                        n_classes=len(classes))
    members = classes[0]
    sub = Q[np.ix_(members, members)]
    k = len(members)
    A = np.vstack([sub.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    p = np.linalg.lstsq(A, b, rcond=None)[0]
    # one refinement step of the linear solve, then a power step
    r = b - A @ p
    p = p + np.linalg.lstsq(A, r, rcond=None)[0]
    p = np.clip(p, 0.0, None)
    p = p @ sub
    p /= p.sum()
    pi = np.zeros(size)
    pi[members] = p
    return pi


@dataclass(frozen=True, eq=False)
class ChainKernel:
    """Irreducible aperiodic transition matrix with its stationary law."""

    matrix: np.ndarray
    stationary: np.ndarray = field(init=False)

    def __post_init__(self):
        Q = _check_stochastic(self.matrix).copy()
        # snap rows to exact stochasticity after the tolerance check
        Q /= Q.sum(axis=1, keepdims=True)
        pi = stationary_distribution(Q)
        if np.any(pi <= 0):
            raise Reducible("chain is not irreducible (transient states present)")
        if period(Q) != 1:
            raise Periodic("chain is periodic; geometric ergodicity requires aperiodicity",
                           period=period(Q))
        Q.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "matrix", Q)
        object.__setattr__(self, "stationary", pi)

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def pair_law(self):
        """``P2 = diag(pi) Q``."""
        return self.stationary[:, None] * self.matrix

    @classmethod
    def random(cls, size, rng, alpha=1.0):
        """Rows drawn from a symmetric Dirichlet(alpha) law."""
        return cls(rng.dirichlet(np.full(size, alpha), size=size))


# --------------------------------------------------------------------------
# Sojourn kernels
# --------------------------------------------------------------------------

SOJOURN_KINDS = ("exponential", "gamma", "point")


def _cell_array(value, size, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        a = np.full((size, size), float(a))
    elif a.shape == (size,):
        a = np.repeat(a[:, None], size, axis=1)
    elif a.shape != (size, size):
        raise KernelError(f"{name} must be a scalar, a per-state vector or a "
                          f"per-pair matrix", shape=a.shape)
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise KernelError(f"{name} must be finite and > 0")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SojournKernel:
    """Conditional inter-arrival law ``R(x, y, du)``.

    ``exponential`` and ``gamma`` kinds store per-pair ``shape`` and
    ``rate`` matrices (the exponential kind has unit shape); the
    ``point`` kind puts all mass at ``u = 1``.
    """

    kind: str
    size: int
    shape: np.ndarray | None = None
    rate: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SOJOURN_KINDS:
            raise KernelError(f"unknown sojourn kind {self.kind!r}")
        if self.kind == "point":
            return
        shape = np.ones((self.size, self.size)) if self.kind == "exponential" else self.shape
        object.__setattr__(self, "shape", _cell_array(shape, self.size, "shape"))
        object.__setattr__(self, "rate", _cell_array(self.rate, self.size, "rate"))

    @classmethod
    def exponential(cls, rate, size):
        """Exponential sojourns; ``rate`` may be a scalar, ``lambda(x)`` or per pair."""
        return cls("exponential", size, rate=rate)

    @classmethod
    def gamma(cls, shape, rate, size):
        return cls("gamma", size, shape=shape, rate=rate)

    @classmethod
    def point_mass(cls, size):
        return cls("point", size)

    def mean(self, x=None, y=None):
        """Conditional mean of ``U`` given ``(x, y)``; full matrix when no index given."""
        if self.kind == "point":
            m = np.ones((self.size, self.size))
        else:
            m = self.shape / self.rate
        return m if x is None else m[x, y]

    def sample(self, rng, x, y):
        """Draw one sojourn per ``(x[i], y[i])``.

        Exponential draws use the inverse CDF ``-log(1 - V) / rate``;
        gamma draws use numpy's standard gamma generator scaled by the rate.
        """
        x = np.asarray(x)
        y = np.asarray(y)
        if self.kind == "point":
            return np.ones(x.shape)
        rate = self.rate[x, y]
        if self.kind == "exponential":
            v = rng.random(x.shape)
            return -np.log1p(-v) / rate
        return rng.standard_gamma(self.shape[x, y]) / rate

    def logpdf(self, u, x, y):
        u = np.asarray(u, dtype=float)
        if self.kind == "point":
            return np.where(u == 1.0, 0.0, -np.inf)
        a = self.shape[x, y]
        b = self.rate[x, y]
        with np.errstate(divide="ignore"):
            return a * np.log(b) - special.gammaln(a) + (a - 1) * np.log(u) - b * u

    def pdf(self, u, x, y):
        return np.exp(self.logpdf(u, x, y))

    def feature_moments(self):
        """Closed-form ``E[phi(U) | x, y]`` and ``E[phi phi^T | x, y]``.

        Returns arrays of shape ``(size, size, 3)`` and ``(size, size, 3, 3)``.
        """
        S = self.size
        if self.kind == "point":
            phi = np.array([1.0, 1.0, 0.0])
            m1 = np.broadcast_to(phi, (S, S, 3)).copy()
            m2 = np.broadcast_to(np.outer(phi, phi), (S, S, 3, 3)).copy()
            return m1, m2
        a, b = self.shape, self.rate
        logb = np.log(b)
        e_u = a / b
        e_log = special.digamma(a) - logb
        e_uu = a * (a + 1) / b**2
        e_ulog = e_u * (special.digamma(a + 1) - logb)
        e_loglog = special.polygamma(1, a) + e_log**2
        one = np.ones_like(a)
        m1 = np.stack([one, e_u, e_log], axis=-1)
        m2 = np.empty((S, S, 3, 3))
        m2[..., 0, :] = m1
        m2[..., :, 0] = m1
        m2[..., 1, 1] = e_uu
        m2[..., 1, 2] = m2[..., 2, 1] = e_ulog
        m2[..., 2, 2] = e_loglog
        return m1, m2

    def expect(self, func, x, y):
        """Adaptive quadrature of ``E[func(U) | x, y]`` on the log-time scale.

        ``func`` maps an array of sojourn times to an array whose trailing
        shape is the value shape. Tolerance is 1e-10 relative.
        """
        if self.kind == "point":
            return np.asarray(func(np.ones(1)), dtype=float)[0]
        a = float(self.shape[x, y])
        b = float(self.rate[x, y])
        logc = a * np.log(b) - special.gammaln(a)

        def integrand(s):
            u = np.exp(s)
            w = np.exp(logc + a * s - b * u)
            return np.asarray(func(np.atleast_1d(u)), dtype=float)[0] * w

        # mode of the log-time density sits at log(a / b)
        centre = np.log(a / b)
        lo = centre - 60.0 / a - 10.0
        hi = centre + np.log1p(60.0 / a) + 5.0
        val, err, info = integrate.quad_vec(
            integrand, lo, hi, epsabs=1e-13, epsrel=QUAD_RTOL, full_output=True,
            limit=2000,
        )
        if not info.success or np.any(err > 10 * QUAD_RTOL * np.maximum(1.0, np.abs(val))):
            raise QuadratureFailure("adaptive quadrature did not reach tolerance",
                                    cell=(int(x), int(y)), error=float(np.max(err)))
        return val


def conditional_mean_sojourn(R, x, y):
    """Exact ``E[U | X_{j-1}=x, X_j=y]`` (time units)."""
    return float(R.mean(x, y))


# --------------------------------------------------------------------------
# Parametric families
# --------------------------------------------------------------------------


class _Boxed:
    """Box domain shared by all families."""

    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def _set_box(self, lower, upper):
        self.lower = np.broadcast_to(np.asarray(lower, float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, float), (self.dim,)).copy()
        if np.any(self.lower >= self.upper):
            raise KernelError("empty parameter box")

    def check(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.dim,):
            raise OutOfDomain(f"expected parameter of dimension {self.dim}",
                              shape=theta.shape)
        if np.any(theta < self.lower) or np.any(theta > self.upper) or np.any(~np.isfinite(theta)):
            raise OutOfDomain("parameter outside the box domain", theta=theta,
                              lower=self.lower, upper=self.upper)
        return theta

    def sample_box(self, rng, margin=0.05):
        """Uniform draw from the box shrunk by ``margin`` of its width.

        Infinite sides are replaced by +-5.
        """
        lo = np.where(np.isfinite(self.lower), self.lower, -5.0)
        hi = np.where(np.isfinite(self.upper), self.upper, 5.0)
        w = hi - lo
        return rng.uniform(lo + margin * w, hi - margin * w)


class QFamily(_Boxed):
    """Parametric transition density ``q_theta(x, y)`` on a finite state space.

    Subclasses implement :meth:`log_matrix`, :meth:`score_matrix` and
    :meth:`hessian_matrix`; evaluators at single pairs index into those.
    """

    n_states: int
    kind = "q"

    def log_matrix(self, theta):
        raise NotImplementedError

    def score_matrix(self, theta):
        """Array ``(S, S, d)`` of ``d/dtheta log q_theta(x, y)``."""
        raise NotImplementedError

    def hessian_matrix(self, theta):
        """Array ``(S, S, d, d)`` of second derivatives of ``log q_theta``."""
        raise NotImplementedError

    def matrix(self, theta):
        return np.exp(self.log_matrix(theta))

    def logpdf(self, theta, x, y):
        return self.log_matrix(theta)[x, y]

    def score(self, theta, x, y):
        return self.score_matrix(theta)[x, y]

    def hessian(self, theta, x, y):
        return self.hessian_matrix(theta)[x, y]

    def initial(self, src=None):
        return np.clip(np.zeros(self.dim), self.lower, self.upper)


class TiltQFamily(QFamily):
    """``q_theta(x, y) ∝ Q0(x, y) exp(theta . h(x, y))``.

    ``stat`` has shape ``(S, S)`` for a scalar parameter or ``(d, S, S)``.
    Normalization is by exact row sums.
    """

    def __init__(self, base, stat, lower=-10.0, upper=10.0):
        base = _check_stochastic(base)
        stat = np.asarray(stat, dtype=float)
        if stat.ndim == 2:
            stat = stat[None]
        S = base.shape[0]
        if stat.shape[1:] != (S, S):
            raise KernelError("statistic must match the base chain", shape=stat.shape)
        self.n_states = S
        self.dim = stat.shape[0]
        self.base = base
        self.stat = np.moveaxis(stat, 0, -1)  # (S, S, d)
        with np.errstate(divide="ignore"):
            self._logbase = np.log(base)
        self._support = base > 0
        self._set_box(lower, upper)

    def _row_law(self, theta):
        theta = self.check(theta)
        eta = np.where(self._support, self._logbase + self.stat @ theta, -np.inf)
        lse = special.logsumexp(eta, axis=1, keepdims=True)
        logq = eta - lse
        return logq, np.exp(logq)

    def log_matrix(self, theta):
        return self._row_law(theta)[0]

    def score_matrix(self, theta):
        _, q = self._row_law(theta)
        mean_h = np.einsum("xy,xyk->xk", q, self.stat)
        return self.stat - mean_h[:, None, :]

    def hessian_matrix(self, theta):
        _, q = self._row_law(theta)
        h = self.stat
        mean_h = np.einsum("xy,xyk->xk", q, h)
        second = np.einsum("xy,xyk,xyl->xkl", q, h, h)
        cov = second - mean_h[:, :, None] * mean_h[:, None, :]
        S = self.n_states
        return -np.broadcast_to(cov[:, None], (S, S, self.dim, self.dim)).copy()


class SaturatedQFamily(QFamily):
    """One free log-odds per off-reference cell: ``theta[x, k] = log q(x,k)/q(x,S-1)``.

    The parameter vector is the row-major flattening of the ``(S, S-1)``
    log-odds array.
    """

    def __init__(self, n_states, lower=-30.0, upper=30.0):
        self.n_states = n_states
        self.dim = n_states * (n_states - 1)
        self._set_box(lower, upper)

    def _probs(self, theta):
        theta = self.check(theta)
        S = self.n_states
        eta = np.concatenate([theta.reshape(S, S - 1), np.zeros((S, 1))], axis=1)
        logq = eta - special.logsumexp(eta, axis=1, keepdims=True)
        return logq, np.exp(logq)

    def log_matrix(self, theta):
        return self._probs(theta)[0]

    def score_matrix(self, theta):
        _, q = self._probs(theta)
        S = self.n_states
        out = np.zeros((S, S, S, S - 1))
        for x in range(S):
            out[x, :, x, :] = np.eye(S)[:, : S - 1] - q[x, : S - 1]
        return out.reshape(S, S, self.dim)

    def hessian_matrix(self, theta):
        _, q = self._probs(theta)
        S = self.n_states
        out = np.zeros((S, S, S, S - 1, S, S - 1))
        for x in range(S):
            qk = q[x, : S - 1]
            block = -(np.diag(qk) - np.outer(qk, qk))
            out[x, :, x, :, x, :] = block
        return out.reshape(S, S, self.dim, self.dim)

    @staticmethod
    def theta_from_matrix(Q):
        """Log-odds parameter reproducing a strictly positive matrix ``Q``."""
        Q = np.asarray(Q, dtype=float)
        return (np.log(Q[:, :-1]) - np.log(Q[:, -1:])).ravel()


def _sojourn_mean_var(src):
    """Mean and variance of U under the cell weights and moments of ``src``."""
    w = src.p2
    m1, m2 = src.cell_moments()
    mean = float(np.sum(w * m1[..., 1]))
    return mean, float(np.sum(w * m2[..., 1, 1])) - mean**2


def feature_expectations(L, C, H, m1, m2):
    """Per-cell expectations of a feature-linear log-density and its derivatives.

    ``L``, ``C``, ``H`` are coefficient arrays of the log-density
    ``(S, S, 3)``, score ``(S, S, d, 3)`` and Hessian ``(S, S, d, d, 3)``;
    ``m1``, ``m2`` the per-cell feature moments. Returns ``E[log r]``,
    ``E[rho]``, ``E[rho rho^T]`` and ``E[rho_dot]``.
    """
    e_log = np.einsum("xyf,xyf->xy", L, m1)
    e_score = np.einsum("xykf,xyf->xyk", C, m1)
    e_outer = np.einsum("xykf,xyfg,xylg->xykl", C, m2, C)
    e_hess = np.einsum("xyklf,xyf->xykl", H, m1)
    return e_log, e_score, e_outer, e_hess


class RFamily(_Boxed):
    """Parametric sojourn density ``r_theta(x, y, u)`` linear in ``(1, u, log u)``.

    Subclasses implement :meth:`coefs`, returning the coefficient arrays
    of the log-density ``(S, S, 3)``, the score ``(S, S, d, 3)`` and the
    Hessian ``(S, S, d, d, 3)`` in the feature basis.
    """

    n_states: int
    kind = "r"

    def coefs(self, theta):
        raise NotImplementedError

    def model_kernel(self, theta):
        """The law ``R_theta`` as a :class:`SojournKernel`."""
        raise NotImplementedError

    def logpdf(self, theta, x, y, u):
        L, _, _ = self.coefs(theta)
        return np.einsum("...f,...f->...", L[x, y], features(u))

    def score(self, theta, x, y, u):
        _, C, _ = self.coefs(theta)
        return np.einsum("...kf,...f->...k", C[x, y], features(u))

    def hessian(self, theta, x, y, u):
        _, _, H = self.coefs(theta)
        return np.einsum("...klf,...f->...kl", H[x, y], features(u))

    def cell_expectations(self, theta, m1, m2):
        """Per-cell ``E[log r]``, ``E[rho]``, ``E[rho rho^T]``, ``E[rho_dot]``.

        ``m1``/``m2`` are per-cell first and second moments of the
        features, either from a true kernel or from data.
        """
        return feature_expectations(*self.coefs(theta), m1, m2)

    def initial(self, src=None):
        return np.clip(np.ones(self.dim), self.lower, self.upper)


class ExponentialRFamily(RFamily):
    """Exponential sojourns with one constant rate ``theta``."""

    def __init__(self, n_states, lower=1e-6, upper=1e6):
        self.n_states = n_states
        self.dim = 1
        self._set_box(lower, upper)

    def coefs(self, theta):
        (t,) = self.check(theta)
        S = self.n_states
        L = np.broadcast_to([np.log(t), -t, 0.0], (S, S, 3))
        C = np.broadcast_to([[1.0 / t, -1.0, 0.0]], (S, S, 1, 3))
        H = np.broadcast_to([[[-1.0 / t**2, 0.0, 0.0]]], (S, S, 1, 1, 3))
        return L, C, H

    def model_kernel(self, theta):
        (t,) = self.check(theta)
        return SojournKernel.exponential(t, self.n_states)

    def initial(self, src=None):
        if src is None:
            return super().initial()
        mean, _ = _sojourn_mean_var(src)
        return np.clip([1.0 / mean], self.lower, self.upper)


class ExponentialStateRFamily(RFamily):
    """Exponential sojourns with rate ``theta[x]`` depending on the origin state."""

    def __init__(self, n_states, lower=1e-6, upper=1e6):
        self.n_states = n_states
        self.dim = n_states
        self._set_box(lower, upper)

    def coefs(self, theta):
        t = self.check(theta)
        S = self.n_states
        L = np.zeros((S, S, 3))
        L[..., 0] = np.log(t)[:, None]
        L[..., 1] = -t[:, None]
        C = np.zeros((S, S, S, 3))
        H = np.zeros((S, S, S, S, 3))
        for x in range(S):
            C[x, :, x, 0] = 1.0 / t[x]
            C[x, :, x, 1] = -1.0
            H[x, :, x, x, 0] = -1.0 / t[x] ** 2
        return L, C, H

    def model_kernel(self, theta):
        return SojournKernel.exponential(self.check(theta), self.n_states)

    def initial(self, src=None):
        if src is None:
            return super().initial()
        w = src.p2
        m1, _ = src.cell_moments()
        p_x = w.sum(axis=1)
        mass_u = (w * m1[..., 1]).sum(axis=1)
        mean, _ = _sojourn_mean_var(src)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(mass_u > 0, p_x / mass_u, 1.0 / mean)
        return np.clip(rate, self.lower, self.upper)


class GammaRFamily(RFamily):
    """Gamma sojourns with shape ``a`` and rate ``b`` constant over cells.

    ``free`` selects which of ``("shape", "rate")`` are parameters; the
    others are held at the given fixed values.
    """

    def __init__(self, n_states, free=("shape", "rate"), shape=1.0, rate=1.0,
                 lower=1e-4, upper=1e4):
        if not free or any(f not in ("shape", "rate") for f in free):
            raise KernelError("free must be a non-empty subset of ('shape', 'rate')")
        self.n_states = n_states
        self.free = tuple(f for f in ("shape", "rate") if f in free)
        self.fixed = {"shape": float(shape), "rate": float(rate)}
        self.dim = len(self.free)
        self._set_box(lower, upper)

    def _ab(self, theta):
        theta = self.check(theta)
        vals = dict(self.fixed)
        vals.update(zip(self.free, theta))
        return vals["shape"], vals["rate"]

    def coefs(self, theta):
        a, b = self._ab(theta)
        S = self.n_states
        full_c = {
            "shape": [np.log(b) - special.digamma(a), 0.0, 1.0],
            "rate": [a / b, -1.0, 0.0],
        }
        full_h = {
            ("shape", "shape"): -special.polygamma(1, a),
            ("shape", "rate"): 1.0 / b,
            ("rate", "shape"): 1.0 / b,
            ("rate", "rate"): -a / b**2,
        }
        L = np.broadcast_to([a * np.log(b) - special.gammaln(a), -b, a - 1.0], (S, S, 3))
        c = np.array([full_c[f] for f in self.free])
        h = np.zeros((self.dim, self.dim, 3))
        for i, fi in enumerate(self.free):
            for j, fj in enumerate(self.free):
                h[i, j, 0] = full_h[fi, fj]
        C = np.broadcast_to(c, (S, S) + c.shape)
        H = np.broadcast_to(h, (S, S) + h.shape)
        return L, C, H

    def model_kernel(self, theta):
        a, b = self._ab(theta)
        return SojournKernel.gamma(a, b, self.n_states)

    def initial(self, src=None):
        if src is None:
            return super().initial()
        mean, var = _sojourn_mean_var(src)
        var = max(var, 1e-12 * mean**2)
        mom = {"shape": mean**2 / var, "rate": mean / var}
        if self.free == ("shape",):
            mom["shape"] = mean * self.fixed["rate"]
        elif self.free == ("rate",):
            mom["rate"] = self.fixed["shape"] / mean
        return np.clip([mom[f] for f in self.free], self.lower, self.upper)


class SModel(_Boxed):
    """Joint model ``s_theta = q_theta * r_theta`` on one parameter vector.

    ``q_index``/``r_index`` map the coordinates of each component family
    into the joint vector. The default concatenates them (disjoint
    parameters); passing the same indices shares coordinates.
    """

    kind = "s"

    def __init__(self, qfam, rfam, q_index=None, r_index=None, dim=None):
        if qfam.n_states != rfam.n_states:
            raise KernelError("component families disagree on the state count")
        self.qfam = qfam
        self.rfam = rfam
        self.n_states = qfam.n_states
        if q_index is None and r_index is None:
            q_index = np.arange(qfam.dim)
            r_index = qfam.dim + np.arange(rfam.dim)
        self.q_index = np.asarray(q_index, dtype=int)
        self.r_index = np.asarray(r_index, dtype=int)
        if len(self.q_index) != qfam.dim or len(self.r_index) != rfam.dim:
            raise KernelError("index maps must match component dimensions")
        self.dim = int(dim if dim is not None
                       else max(self.q_index.max(), self.r_index.max()) + 1)
        lower = np.full(self.dim, -np.inf)
        upper = np.full(self.dim, np.inf)
        for fam, idx in ((qfam, self.q_index), (rfam, self.r_index)):
            lower[idx] = np.maximum(lower[idx], fam.lower)
            upper[idx] = np.minimum(upper[idx], fam.upper)
        self._set_box(lower, upper)

    def split(self, theta):
        theta = self.check(theta)
        return theta[self.q_index], theta[self.r_index]

    def _embed_vec(self, v, idx):
        out = np.zeros(v.shape[:-1] + (self.dim,))
        for j, i in enumerate(idx):
            out[..., i] += v[..., j]
        return out

    def _embed_mat(self, m, idx):
        out = np.zeros(m.shape[:-2] + (self.dim, self.dim))
        for a, i in enumerate(idx):
            for b, k in enumerate(idx):
                out[..., i, k] += m[..., a, b]
        return out

    def q_parts(self, theta):
        """Embedded ``(log q, chi, chi_dot)`` as full ``(S, S, ...)`` arrays."""
        tq, _ = self.split(theta)
        return (self.qfam.log_matrix(tq),
                self._embed_vec(self.qfam.score_matrix(tq), self.q_index),
                self._embed_mat(self.qfam.hessian_matrix(tq), self.q_index))

    def r_coefs(self, theta):
        """Embedded feature coefficients of ``(log r, rho, rho_dot)``."""
        _, tr = self.split(theta)
        L, C, H = self.rfam.coefs(tr)
        # move feature axis out of the way for embedding, then back
        Ce = np.moveaxis(self._embed_vec(np.moveaxis(C, -1, -2), self.r_index), -1, -2)
        He = np.moveaxis(self._embed_mat(np.moveaxis(H, -1, 2), self.r_index), 2, -1)
        return L, Ce, He

    def logpdf(self, theta, x, y, u):
        tq, tr = self.split(theta)
        return self.qfam.logpdf(tq, x, y) + self.rfam.logpdf(tr, x, y, u)

    def score(self, theta, x, y, u):
        _, chi, _ = self.q_parts(theta)
        _, C, _ = self.r_coefs(theta)
        rho = np.einsum("...kf,...f->...k", C[x, y], features(u))
        return chi[x, y] + rho

    def hessian(self, theta, x, y, u):
        _, _, chid = self.q_parts(theta)
        _, _, H = self.r_coefs(theta)
        return chid[x, y] + np.einsum("...klf,...f->...kl", H[x, y], features(u))

    def initial(self, src=None):
        theta = np.zeros(self.dim)
        theta[self.q_index] = self.qfam.initial(src)
        theta[self.r_index] = self.rfam.initial(src)
        return np.clip(theta, self.lower, self.upper)


# --------------------------------------------------------------------------
# Score identities
# --------------------------------------------------------------------------


def score_identity_report(family, theta, sojourn=None, quadrature=False):
    """Residuals of the first- and second-order score identities.

    For a :class:`QFamily` returns ``max_x |Q_theta chi_theta|`` and
    ``max_x ||Q_theta[chi chi^T] + Q_theta[chi_dot]||``, computed by exact
    summation. For an :class:`RFamily` the analogues over cells ``(x, y)``
    under ``R_theta`` (or under ``sojourn`` when given), by closed-form
    feature moments or, with ``quadrature=True``, by adaptive quadrature.
    """
    if isinstance(family, QFamily):
        q = family.matrix(theta)
        chi = family.score_matrix(theta)
        chid = family.hessian_matrix(theta)
        first = np.einsum("xy,xyk->xk", q, chi)
        second = np.einsum("xy,xyk,xyl->xkl", q, chi, chi) + np.einsum("xy,xykl->xkl", q, chid)
        return {"first": float(np.abs(first).max()), "second": float(np.abs(second).max())}
    if isinstance(family, RFamily):
        law = sojourn if sojourn is not None else family.model_kernel(theta)
        S = family.n_states
        if not quadrature:
            _, e_score, e_outer, e_hess = family.cell_expectations(theta, *law.feature_moments())
        else:
            d = family.dim
            e_score = np.empty((S, S, d))
            e_outer = np.empty((S, S, d, d))
            e_hess = np.empty((S, S, d, d))
            for x in range(S):
                for y in range(S):
                    def g(u, x=x, y=y):
                        s = family.score(theta, x, y, u)
                        h = family.hessian(theta, x, y, u)
                        outer = s[..., :, None] * s[..., None, :]
                        return np.concatenate([s, outer.reshape(len(u), -1),
                                               h.reshape(len(u), -1)], axis=-1)
                    v = law.expect(g, x, y)
                    e_score[x, y] = v[:d]
                    e_outer[x, y] = v[d:d + d * d].reshape(d, d)
                    e_hess[x, y] = v[d + d * d:].reshape(d, d)
        return {"first": float(np.abs(e_score).max()),
                "second": float(np.abs(e_outer + e_hess).max())}
    raise KernelError(f"unsupported family type {type(family).__name__}")
