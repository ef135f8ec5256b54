"""Population KL information and exact KL projection parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from .errors import MultipleMaxima, NoConvergence, OracleError, SMKLError
from .likelihood import check_local_max, criterion, multistart_maximize

ORACLE_TOL = 1e-11


@dataclass(frozen=True, eq=False)
class PopulationLaw:
    """Stationary laws of the true embedded Markov renewal process.

    ``P3 = P2 (x) R`` is kept factored: cell weights ``p2`` plus the
    sojourn kernel, whose feature moments are exact.
    """

    chain: object
    sojourn: object

    @property
    def size(self):
        return self.chain.size

    @property
    def p1(self):
        return self.chain.stationary

    @property
    def p2(self):
        return self.chain.pair_law

    @property
    def m(self):
        """Mean inter-arrival time ``sum P2(x, y) E[U | x, y]``."""
        return float(np.sum(self.p2 * self.sojourn.mean()))

    def cell_moments(self):
        return self.sojourn.feature_moments()


@dataclass
class KLResult:
    k_star: np.ndarray
    kl_value: float
    grad_norm: float
    method: str = "newton+grid"
    hessian: np.ndarray | None = None
    grid_gap: float = float("nan")

    def to_dict(self):
        return {
            "k_star": np.asarray(self.k_star).tolist(),
            "kl_value": self.kl_value,
            "grad_norm": self.grad_norm,
            "method": self.method,
            "hessian": None if self.hessian is None else np.asarray(self.hessian).tolist(),
            "grid_gap": self.grid_gap,
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def kl_information(law, target, theta):
    """Population ``P2[log q]``, ``P3[log r]`` or their sum for an S-model."""
    return criterion(target, law, np.atleast_1d(np.asarray(theta, float)))[0]


def _scan_box(target, centre):
    width = 5.0 * np.maximum(1.0, np.abs(centre))
    return (np.maximum(target.lower, centre - width),
            np.minimum(target.upper, centre + width))


def _safe_kl(law, target, theta):
    try:
        return kl_information(law, target, theta)
    except (SMKLError, ValueError):
        return -np.inf


def _grid_check_scalar(law, target, k, n_grid=101):
    lo, hi = _scan_box(target, k)
    grid = np.linspace(lo[0], hi[0], n_grid)
    vals = np.array([_safe_kl(law, target, [g]) for g in grid])
    top = int(np.argmax(vals))
    left = np.r_[-np.inf, vals[:-1]]
    right = np.r_[vals[1:], -np.inf]
    peaks = np.flatnonzero((vals >= left) & (vals >= right) & np.isfinite(vals))
    rivals = [int(p) for p in peaks if abs(p - top) > 1 and vals[top] - vals[p] < 1e-3]
    if rivals:
        raise MultipleMaxima("KL information has several near-equal local maxima",
                             candidates=[float(grid[p]) for p in [top] + rivals])
    neg = lambda t: -_safe_kl(law, target, [t])  # noqa: E731
    if 0 < top < n_grid - 1:
        x = optimize.golden(neg, brack=(grid[top - 1], grid[top], grid[top + 1]), tol=1e-10)
    else:
        a = grid[max(top - 1, 0)]
        b = grid[min(top + 1, n_grid - 1)]
        x = optimize.minimize_scalar(neg, bounds=(a, b), method="bounded",
                                     options={"xatol": 1e-10}).x
    return np.array([x])


def _grid_check_multi(law, target, k, n_grid=11):
    lo, hi = _scan_box(target, k)
    axes = [np.linspace(a, b, n_grid) for a, b in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = np.apply_along_axis(lambda t: _safe_kl(law, target, t), -1, mesh)
    peaks = (vals == ndimage.maximum_filter(vals, size=3, mode="constant",
                                            cval=-np.inf)) & np.isfinite(vals)
    top = np.unravel_index(np.argmax(vals), vals.shape)
    idx = np.argwhere(peaks)
    rivals = [tuple(i) for i in idx
              if np.max(np.abs(np.array(i) - top)) > 1 and vals[top] - vals[tuple(i)] < 1e-3]
    if rivals:
        raise MultipleMaxima("KL information has several near-equal local maxima",
                             candidates=[mesh[top].tolist()] + [mesh[r].tolist() for r in rivals])
    # derivative-free polish from the best grid node, inside its grid cell
    span = (hi - lo) / (n_grid - 1)
    best = mesh[top]
    bounds = list(zip(np.maximum(lo, best - span), np.minimum(hi, best + span)))
    res = optimize.minimize(lambda t: -_safe_kl(law, target, t), best, method="Nelder-Mead",
                            bounds=bounds,
                            options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 20000,
                                     "maxfev": 40000})
    return res.x


def kl_projection(law, target, init=None, verify=True, agree_tol=1e-6):
    """Maximizer of the population KL information of ``target``.

    Newton on the population score (same initialization policy as the
    estimators) to a score norm below 1e-11. With ``verify`` the result
    is checked against a grid scan: a 101-point grid plus golden-section
    refinement for scalar parameters, an 11^d grid followed by a bounded
    Nelder-Mead polish for ``d <= 3``. Near-equal competing grid maxima raise
    :class:`MultipleMaxima`; disagreement beyond ``agree_tol`` raises
    :class:`NoConvergence`.
    """
    theta0 = target.initial(law) if init is None else np.atleast_1d(np.asarray(init, float))
    res = multistart_maximize(lambda t: criterion(target, law, t), theta0,
                              target.lower, target.upper, tol=ORACLE_TOL)
    check_local_max(res.hess)
    out = KLResult(res.theta, res.value, res.grad_norm, "newton", res.hess)
    if verify and target.dim <= 3:
        if target.dim == 1:
            g = _grid_check_scalar(law, target, res.theta)
        else:
            g = _grid_check_multi(law, target, res.theta)
        gap = float(np.max(np.abs(g - res.theta)))
        if gap > agree_tol:
            raise NoConvergence("Newton and grid maximizers disagree", newton=res.theta,
                                grid=g, gap=gap)
        out.method = "newton+grid"
        out.grid_gap = gap
    return out


def ar1_kl_projection(acov0, acov1):
    """KL projection of a Gaussian AR(1) fit: ``E[X0 X1] / E[X0^2]``."""
    if not acov0 > 0:
        raise OracleError("lag-zero second moment must be positive")
    return acov1 / acov0
