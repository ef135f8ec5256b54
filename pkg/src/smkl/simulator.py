"""Simulation of stationary embedded Markov renewal paths.

Random numbers come from numpy's counter-based Philox generator keyed by
``seed XOR replication``, so replication ``i`` of an experiment can be
regenerated on its own, in any order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import HorizonTooShort, SimulationError, WrongRegime

MASK64 = (1 << 64) - 1


def make_rng(seed, replication=0):
    """Philox generator for stream ``seed ^ replication`` (both unsigned 64-bit)."""
    key = (int(seed) ^ int(replication)) & MASK64
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimConfig:
    """``regime`` is ``"horizon"`` (observe up to time ``n``) or ``"count"``
    (observe exactly ``n`` transitions). ``initial`` is ``"stationary"`` or
    a fixed starting state."""

    regime: str
    n: float
    seed: int = 0
    initial: str | int = "stationary"

    def __post_init__(self):
        if self.regime not in ("horizon", "count"):
            raise SimulationError(f"unknown regime {self.regime!r}")
        if not self.n > 0:
            raise SimulationError("n must be positive")
        if self.regime == "count" and int(self.n) != self.n:
            raise SimulationError("count regime needs an integer n")
        if not 0 <= int(self.seed) <= MASK64:
            raise SimulationError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class RenewalPath:
    """Observed ``(X_0, T_0), ..., (X_J, T_J)``.

    In the horizon regime the last entry is the first arrival after the
    horizon (``J = N + 1``) when it was drawn; estimators only use
    ``j <= N``.
    """

    states: np.ndarray
    times: np.ndarray
    regime: str
    n: float
    N: int

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        t = np.asarray(self.times, dtype=float)
        if s.shape != t.shape or s.ndim != 1:
            raise SimulationError("states and times must be 1-d of equal length")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise SimulationError("times must start at 0 and increase strictly")
        s.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "times", t)

    @property
    def sojourns(self):
        """``U_1, ..., U_J``."""
        return np.diff(self.times)

    def observed(self):
        """``(x_prev, x_next, u)`` for ``j = 1..N``."""
        N = self.N
        return self.states[:N], self.states[1:N + 1], np.diff(self.times[:N + 1])

    def to_csv(self, fh=None):
        """Write columns ``j, x, t, u`` (``u`` empty at ``j = 0``).

        Returns the text when ``fh`` is None.
        """
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "x", "t", "u"])
        u = self.sojourns
        for j, (x, t) in enumerate(zip(self.states, self.times)):
            w.writerow([j, int(x), repr(float(t)), "" if j == 0 else repr(float(u[j - 1]))])
        if fh is None:
            return buf.getvalue()

    @classmethod
    def from_csv(cls, fh, regime, n):
        """Read a path written by :meth:`to_csv`.

        ``regime``/``n`` are not stored in the file and must be supplied.
        """
        rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"j", "x", "t", "u"}:
            raise SimulationError("path CSV needs header j,x,t,u")
        states = np.array([int(r["x"]) for r in rows])
        times = np.array([float(r["t"]) for r in rows])
        if regime == "count":
            N = int(n)
            if N > len(states) - 1:
                raise SimulationError("path shorter than the stated count")
        else:
            N = int(np.searchsorted(times, n, side="right")) - 1
        if N < 1:
            raise HorizonTooShort("no complete transition inside the window")
        return cls(states, times, regime, float(n), N)


def _walk(P, x0, v):
    """Chain states driven by uniforms ``v`` via row-wise inverse CDFs.

    All candidate successors are computed up front; the path then follows
    ``X_j = next[X_{j-1}, j]`` through a prefix composition of the
    per-step maps (log2(J) vectorized passes).
    """
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = np.inf
    nxt = (cdf[:, :, None] <= v[None, None, :]).sum(axis=1)  # (S, J)
    J = v.shape[0]
    comp = nxt
    s = 1
    while s < J:
        step = comp.copy()
        step[:, s:] = comp[comp[:, :-s], np.arange(s, J)]
        comp = step
        s *= 2
    out = np.empty(J + 1, dtype=np.int64)
    out[0] = x0
    out[1:] = comp[x0]
    return out


def _initial_state(chain, cfg, rng):
    if cfg.initial == "stationary":
        cdf = np.cumsum(chain.stationary)
        cdf[-1] = np.inf
        return int(np.searchsorted(cdf, rng.random(), side="right"))
    x0 = int(cfg.initial)
    if not 0 <= x0 < chain.size:
        raise SimulationError("initial state out of range", initial=x0)
    return x0


def simulate(chain, sojourn, cfg, rng=None):
    """Simulate the embedded Markov renewal process of ``(Q, R)``.

    The chain starts from its stationary law (or ``cfg.initial``). In the
    horizon regime transitions are drawn in chunks until the clock passes
    ``cfg.n``; ``N`` is the last index with ``T_j <= n``. Raises
    :class:`HorizonTooShort` when ``N = 0``.
    """
    if sojourn.size != chain.size:
        raise SimulationError("chain and sojourn kernel disagree on the state count")
    rng = make_rng(cfg.seed) if rng is None else rng
    x0 = _initial_state(chain, cfg, rng)
    Q = chain.matrix

    if cfg.regime == "count":
        J = int(cfg.n)
        states = _walk(Q, x0, rng.random(J))
        u = sojourn.sample(rng, states[:-1], states[1:])
        times = np.concatenate([[0.0], np.cumsum(u)])
        return RenewalPath(states, times, "count", float(J), J)

    n = float(cfg.n)
    m = float(np.sum(chain.pair_law * sojourn.mean()))
    expect = n / m
    chunk = int(expect + 6 * np.sqrt(expect) + 16)
    states = [np.array([x0])]
    times = [np.array([0.0])]
    t_end, x_last = 0.0, x0
    while t_end <= n:
        s = _walk(Q, x_last, rng.random(chunk))
        u = sojourn.sample(rng, s[:-1], s[1:])
        t = t_end + np.cumsum(u)
        states.append(s[1:])
        times.append(t)
        t_end, x_last = float(t[-1]), int(s[-1])
        chunk = max(16, int((n - t_end) / m * 1.2) + 16)
    states = np.concatenate(states)
    times = np.concatenate(times)
    N = int(np.searchsorted(times, n, side="right")) - 1
    if N < 1:
        raise HorizonTooShort("no complete transition inside the window", n=n)
    return RenewalPath(states[:N + 2], times[:N + 2], "horizon", n, N)


def empirical_rate_check(path):
    """``n / N`` for a horizon-regime path; tends to the mean sojourn ``m``."""
    if path.regime != "horizon":
        raise WrongRegime("n/N is only defined for the horizon regime")
    if path.N < 1:
        raise HorizonTooShort("N must be at least one")
    return path.n / path.N


def simulate_ar1(theta, n, rng, tau=1.0, innovations=None):
    """Stationary AR(1) series ``X_j = theta X_{j-1} + eps_j`` of length ``n + 1``.

    ``innovations`` optionally supplies the ``n`` innovations (e.g. a
    non-Gaussian law); the default is ``N(0, tau^2)``. The start is drawn
    from the Gaussian stationary law when ``|theta| < 1``.
    """
    if innovations is None:
        innovations = tau * rng.standard_normal(n)
    innovations = np.asarray(innovations, dtype=float)
    sd0 = tau / np.sqrt(1 - theta**2) if abs(theta) < 1 else tau
    x0 = sd0 * rng.standard_normal()
    rest, _ = lfilter([1.0], [1.0, -theta], innovations, zi=[theta * x0])
    return np.concatenate([[x0], rest])
