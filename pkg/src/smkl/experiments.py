"""Monte Carlo harness for the asymptotic claims.

Each replication ``i`` draws from its own Philox stream keyed by
``base_seed ^ i``, so results do not depend on execution order and any
single replication can be regenerated in isolation. Moments are computed
from the full per-replication array after all tasks finish.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .asymptotics import (
    a_operator,
    clt_variance,
    potential,
    sandwich_oracle,
    sandwich_plugin,
    triple_conditional_moments,
)
from .empirical import build
from .errors import (
    BoundaryHit,
    ExcessiveFailures,
    NoConvergence,
    OracleFailure,
    PerturbationInvalid,
    SingularHessian,
    SMKLError,
)
from .estimators import fit, fit_marginal_pair, fit_q, stationary_log_derivative
from .kernels import ChainKernel
from .oracle import PopulationLaw, kl_projection
from .simulator import SimConfig, make_rng, simulate

FAILURE_LIMIT = 0.01
CENTERING_TOL = 1e-10
_FIT_FAILURES = (NoConvergence, BoundaryHit, SingularHessian)


def _threads(workers):
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get("SMKL_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items, workers=None):
    n = _threads(workers)
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------------------
# Scenario and report
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    true_q: ChainKernel
    true_r: object
    target: object
    regime: str
    n: float
    replications: int
    base_seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("a scenario needs at least two replications")
        if self.true_r.size != self.true_q.size:
            raise ValueError("chain and sojourn kernel disagree on the state count")
        SimConfig(self.regime, self.n, self.base_seed)

    @property
    def law(self):
        return PopulationLaw(self.true_q, self.true_r)


def normality_summary(z):
    """Per-coordinate skewness and excess kurtosis with their normal-theory SEs."""
    z = np.atleast_2d(np.asarray(z, float))
    M = z.shape[0]
    skew = stats.skew(z, axis=0)
    kurt = stats.kurtosis(z, axis=0, fisher=True)
    se_s = np.sqrt(6.0 / M)
    se_k = np.sqrt(24.0 / M)
    return {
        "skewness": skew,
        "excess_kurtosis": kurt,
        "skewness_se": se_s,
        "excess_kurtosis_se": se_k,
        "within_3se": bool(np.all(np.abs(skew) < 3 * se_s) and np.all(np.abs(kurt) < 3 * se_k)),
    }


@dataclass
class MCReport:
    k_star: np.ndarray
    mean_scaled_error: np.ndarray
    mean_scaled_error_se: np.ndarray
    empirical_cov: np.ndarray
    predicted_cov: np.ndarray
    cov_rel_error: float
    normality: dict
    failures: int
    replications: int
    n: float
    regime: str
    base_seed: int
    records: list = field(default_factory=list)

    def to_dict(self, with_records=False):
        d = {
            "k_star": self.k_star,
            "mean_scaled_error": self.mean_scaled_error,
            "mean_scaled_error_se": self.mean_scaled_error_se,
            "empirical_cov": self.empirical_cov,
            "predicted_cov": self.predicted_cov,
            "cov_rel_error": self.cov_rel_error,
            "normality": self.normality,
            "failures": self.failures,
            "replications": self.replications,
            "n": self.n,
            "regime": self.regime,
            "base_seed": self.base_seed,
        }
        if with_records:
            d["records"] = self.records
        return _jsonable(d)

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_csv(self):
        """One row per replication: seed, theta_hat coordinates, N, converged."""
        d = len(np.atleast_1d(self.k_star))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replication", "seed"] + [f"theta_{k}" for k in range(d)] + ["N", "converged"])
        for r in self.records:
            w.writerow([r["replication"], r["seed"]]
                       + ["%.17g" % t for t in r["theta_hat"]]
                       + [r["N"], int(r["converged"])])
        return buf.getvalue()


def _replicate(s, i, init=None):
    rng = make_rng(s.base_seed, i)
    path = simulate(s.true_q, s.true_r, SimConfig(s.regime, s.n, s.base_seed), rng=rng)
    emp = build(path, s.true_q.size)
    rec = {"replication": i, "seed": (int(s.base_seed) ^ i), "N": path.N}
    try:
        est = fit(emp, s.target, init)
        rec.update(theta_hat=np.asarray(est.theta_hat, float).tolist(), converged=bool(est.converged))
    except _FIT_FAILURES as e:
        rec.update(theta_hat=[float("nan")] * s.target.dim, converged=False, error=type(e).__name__)
    return rec


def run_mc(s, workers=None, oracle_verify=True):
    """Simulate, fit and compare against the oracle sandwich.

    Errors are scaled by ``sqrt(n)`` (transition count or time horizon).
    Replications whose fit fails are excluded from the moments and
    counted in ``failures``; more than 1% raises :class:`ExcessiveFailures`.
    """
    law = s.law
    try:
        kl = kl_projection(law, s.target, verify=oracle_verify)
        pred = sandwich_oracle(law, s.target, kl.k_star, s.regime)
    except SMKLError as e:
        raise OracleFailure(f"oracle failed: {e}", cause=type(e).__name__) from e
    k = np.asarray(kl.k_star, float)

    records = _map(lambda i: _replicate(s, i), range(s.replications), workers)
    ok = np.array([r["converged"] for r in records])
    failures = int((~ok).sum())
    if failures > FAILURE_LIMIT * s.replications:
        raise ExcessiveFailures("too many replications failed to converge",
                                failures=failures, replications=s.replications)
    theta = np.array([r["theta_hat"] for r in records], float)[ok]
    z = np.sqrt(s.n) * (theta - k)
    Mok = z.shape[0]
    mean = z.mean(axis=0)
    cov = np.atleast_2d(np.cov(z, rowvar=False))
    P = np.asarray(pred.covariance)
    rel = float(np.linalg.norm(cov - P) / np.linalg.norm(P))
    return MCReport(k, mean, np.sqrt(np.diag(cov) / Mok), cov, P, rel,
                    normality_summary(z), failures, s.replications, float(s.n),
                    s.regime, int(s.base_seed), records)


def plugin_check(s, n=None, seed=None):
    """Oracle sandwich against the plug-in sandwich from one long path."""
    law = s.law
    kl = kl_projection(law, s.target, verify=False)
    oracle = sandwich_oracle(law, s.target, kl.k_star, s.regime)
    n = s.n if n is None else n
    seed = s.base_seed if seed is None else seed
    path = simulate(s.true_q, s.true_r, SimConfig(s.regime, n, seed))
    emp = build(path, s.true_q.size)
    est = fit(emp, s.target, kl.k_star)
    plug = sandwich_plugin(emp, s.target, est.theta_hat, s.regime)
    O = np.asarray(oracle.covariance)
    rel = float(np.linalg.norm(plug.covariance - O) / np.linalg.norm(O))
    return {"oracle": oracle, "plugin": plug, "theta_hat": est.theta_hat,
            "rel_error": rel, "n": float(n)}


# --------------------------------------------------------------------------
# Local asymptotic normality
# --------------------------------------------------------------------------


class PerturbationDirection:
    """Tangent direction ``(v, w)`` with ``Q v = 0`` and ``R w = 0``.

    ``v`` is built from a bounded pair table ``g`` as ``g - Qg``;
    ``w`` from a bounded triple function ``h(x, y, u)`` (vectorized in
    all arguments) as ``h - E_R[h | x, y]``. Either part may be omitted.
    """

    def __init__(self, chain, sojourn, pair=None, triple=None):
        S = chain.size
        Q = chain.matrix
        g = np.zeros((S, S)) if pair is None else np.asarray(pair, float)
        if g.shape != (S, S) or not np.all(np.isfinite(g)):
            raise PerturbationInvalid("pair function must be a finite (S, S) table")
        self.chain = chain
        self.sojourn = sojourn
        self.v = g - (Q * g).sum(axis=1, keepdims=True)
        self._h = triple
        if triple is None:
            self.h_mean = np.zeros((S, S))
            self.h_second = np.zeros((S, S))
        else:
            self.h_mean, self.h_second = triple_conditional_moments(sojourn, triple)
        self._check()

    @property
    def has_w(self):
        return self._h is not None

    def _check(self):
        resid = np.abs((self.chain.matrix * self.v).sum(axis=1)).max()
        if resid > CENTERING_TOL:
            raise PerturbationInvalid("pair direction not centered", residual=float(resid))

    def w(self, x, y, u):
        x = np.asarray(x)
        y = np.asarray(y)
        if self._h is None:
            return np.zeros(np.broadcast(x, y, u).shape)
        return self._h(x, y, u) - self.h_mean[x, y]

    def w_variance(self):
        """Per-cell ``R[w^2]``."""
        return np.maximum(self.h_second - self.h_mean**2, 0.0)

    def information(self, law, regime="horizon"):
        """``P2[v^2] + P3[w^2]``, divided by ``m`` in the horizon regime."""
        val = float(np.sum(law.p2 * self.v**2) + np.sum(law.p2 * self.w_variance()))
        return val / law.m if regime == "horizon" else val


def perturbed_chain(chain, v, eps):
    """``Q (1 + eps v)`` clipped at zero and renormalized."""
    raw = chain.matrix * (1.0 + eps * v)
    lost = np.clip(-raw, 0.0, None).sum(axis=1)
    if lost.max() > 1e-3:
        raise PerturbationInvalid("clipping removes too much mass; increase n",
                                  mass=float(lost.max()))
    raw = np.clip(raw, 0.0, None)
    return raw / raw.sum(axis=1, keepdims=True)


def _tilt_normalizer(direction, eps):
    S = direction.chain.size
    logc = np.zeros((S, S))
    if not direction.has_w:
        return logc
    for x in range(S):
        for y in range(S):
            val = direction.sojourn.expect(
                lambda u, x=x, y=y: np.exp(eps * direction.w(x, y, u)), x, y)
            logc[x, y] = np.log(float(np.squeeze(val)))
    return logc


@dataclass
class LANReport:
    mean: float
    variance: float
    predicted_mean: float
    predicted_variance: float
    mean_rel_error: float
    variance_rel_error: float
    mean_se: float
    n: float
    replications: int
    regime: str

    def to_dict(self):
        return _jsonable(self.__dict__)

    def to_json(self):
        return json.dumps(self.to_dict())


def _rel(a, b):
    if b == 0:
        return 0.0 if a == 0 else float("inf")
    return abs(a - b) / abs(b)


def lan_diagnostic(true_q, true_r, direction, n, M, seed, regime="horizon", workers=None):
    """Log-likelihood ratio of the local perturbation along ``direction``.

    The chain is perturbed to ``Q_n ~ Q (1 + n^{-1/2} v)`` and the sojourn
    law is tilted to ``r exp(n^{-1/2} w) / c``. Paths are drawn under the
    unperturbed truth.
    """
    eps = 1.0 / np.sqrt(n)
    law = PopulationLaw(true_q, true_r)
    with np.errstate(divide="ignore"):
        dlogq = np.log(perturbed_chain(true_q, direction.v, eps)) - np.log(true_q.matrix)
    dlogq = np.where(true_q.matrix > 0, dlogq, 0.0)
    logc = _tilt_normalizer(direction, eps)

    def one(i):
        path = simulate(true_q, true_r, SimConfig(regime, n, seed), rng=make_rng(seed, i))
        x, y, u = path.observed()
        llr = dlogq[x, y].sum() - logc[x, y].sum()
        if direction.has_w:
            llr += eps * direction.w(x, y, u).sum()
        return float(llr)

    llr = np.array(_map(one, range(M), workers))
    info = direction.information(law, regime)
    mean = float(llr.mean())
    var = float(llr.var(ddof=1))
    return LANReport(mean, var, -0.5 * info, info, _rel(mean, -0.5 * info), _rel(var, info),
                     float(np.sqrt(var / M)), float(n), M, regime)


# --------------------------------------------------------------------------
# Martingale CLT for additive functionals
# --------------------------------------------------------------------------


@dataclass
class CLTReport:
    mean: float
    variance: float
    predicted_variance: float
    variance_rel_error: float
    stationary_mean: float
    n: float
    replications: int
    regime: str

    def to_dict(self):
        return _jsonable(self.__dict__)

    def to_json(self):
        return json.dumps(self.to_dict())


def martingale_clt_check(true_q, true_r, f, n, M, seed, regime="horizon", workers=None):
    """Spread of ``n^{-1/2} sum_{j<=N} (f - P3[f])`` against its exact limit.

    ``f(x, y, u)`` is vectorized over all three arguments.
    """
    law = PopulationLaw(true_q, true_r)
    rf, rf2 = triple_conditional_moments(true_r, f)
    centre = float(np.sum(law.p2 * rf))
    pred = clt_variance(law, rf, rf2, regime)

    def one(i):
        path = simulate(true_q, true_r, SimConfig(regime, n, seed), rng=make_rng(seed, i))
        x, y, u = path.observed()
        return float(np.sum(f(x, y, u) - centre) / np.sqrt(n))

    z = np.array(_map(one, range(M), workers))
    var = float(z.var(ddof=1))
    return CLTReport(float(z.mean()), var, pred, _rel(var, pred), centre, float(n), M, regime)


# --------------------------------------------------------------------------
# Marginal pair likelihood against the conditional estimator
# --------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    n_grid: list
    median_scaled_gap: list
    gap_over_sd: list
    predicted_median_scaled_gap: float
    monotone_decrease: bool
    replications: int
    failures: int

    def to_dict(self):
        return _jsonable(self.__dict__)

    def to_json(self):
        return json.dumps(self.to_dict())


def remark6_diagnostic(fam, theta, sojourn, n_grid, M, seed, regime="count", workers=None):
    """Median of ``sqrt(n) |theta_2 - theta_Q|`` over replications, per ``n``.

    ``theta_Q`` maximizes the conditional pair likelihood and ``theta_2``
    the marginal pair likelihood ``log p_{1 theta}(x) + log q_theta(x, y)``,
    both under the correctly specified chain ``fam.matrix(theta)``.
    ``gap_over_sd`` divides the median raw gap by the sampling sd of
    ``theta_Q``. ``predicted_median_scaled_gap`` is the limit implied by
    :func:`marginal_gap_sd` (median of a centred normal, largest coordinate).
    """
    chain = ChainKernel(fam.matrix(np.atleast_1d(np.asarray(theta, float))))
    medians, ratios = [], []
    failures = 0
    for k, n in enumerate(n_grid):
        def one(i, n=n, k=k):
            path = simulate(chain, sojourn, SimConfig(regime, n, seed),
                            rng=make_rng(seed, k * M + i))
            emp = build(path, chain.size)
            try:
                tq = fit_q(emp, fam).theta_hat
                t2 = fit_marginal_pair(emp, fam, init=tq).theta_hat
            except _FIT_FAILURES:
                return None
            return np.asarray(tq, float), np.asarray(t2, float)

        res = [r for r in _map(one, range(M), workers) if r is not None]
        failures += M - len(res)
        if len(res) < 2:
            medians.append(float("nan"))
            ratios.append(float("nan"))
            continue
        tq = np.array([r[0] for r in res])
        gap = np.array([np.max(np.abs(r[1] - r[0])) for r in res])
        medians.append(float(np.sqrt(n) * np.median(gap)))
        sd = float(np.max(np.std(tq, axis=0, ddof=1)))
        ratios.append(float(np.median(gap) / sd) if sd > 0 else 0.0)
    mono = bool(np.all(np.diff(medians) < 0))  # False whenever a median is NaN
    pred = float(stats.norm.ppf(0.75) * np.max(marginal_gap_sd(fam, theta)))
    return EquivalenceReport([float(n) for n in n_grid], medians, ratios, pred, mono, M, failures)


def marginal_gap_sd(fam, theta):
    """Asymptotic sd of ``sqrt(n) (theta_2 - theta_Q)`` per coordinate (count regime).

    The influence function of ``theta_Q`` is ``I^{-1} chi``; that of
    ``theta_2`` is ``(I + V)^{-1} (chi + A l)`` with ``l = d log p_1`` and
    ``V = P1[l l^T]``. The two coincide only when ``A l`` lies in the span
    of ``chi``, which holds for the saturated family but not in general.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    chain = ChainKernel(fam.matrix(theta))
    p2 = chain.pair_law
    chi = fam.score_matrix(theta)
    S = chain.size
    dl = stationary_log_derivative(fam, theta)
    Al = a_operator(potential(chain), np.broadcast_to(dl[:, None, :], (S, S, fam.dim)).copy())
    info = np.einsum("xy,xyk,xyl->kl", p2, chi, chi)
    V = np.einsum("x,xk,xl->kl", chain.stationary, dl, dl)
    diff = (np.einsum("kl,xyl->xyk", np.linalg.inv(info + V), chi + Al)
            - np.einsum("kl,xyl->xyk", np.linalg.inv(info), chi))
    return np.sqrt(np.einsum("xy,xyk->k", p2, diff**2))
