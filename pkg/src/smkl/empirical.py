"""Empirical measures of an observed renewal path."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyPath, NonFiniteValue
from .kernels import features


@dataclass(frozen=True, eq=False)
class EmpiricalMeasures:
    """Pair counts and raw triples ``(x, y, u)`` for ``j = 1..N``.

    ``feature_sums`` and ``feature_outer_sums`` hold per-cell sums of
    ``phi(u) = (1, u, log u)`` and of its outer product, the sufficient
    statistics of every shipped sojourn family. Memory is O(N) for the
    triples.
    """

    N: int
    size: int
    pair_counts: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    mhat: float
    regime: str
    horizon_n: float
    feature_sums: np.ndarray
    feature_outer_sums: np.ndarray

    @property
    def p1(self):
        return self.pair_counts.sum(axis=1) / self.N

    @property
    def p2(self):
        return self.pair_counts / self.N

    @property
    def u_var(self):
        return float(np.var(self.u))

    def cell_moments(self):
        """Per-cell sample means of ``phi`` and ``phi phi^T`` (zero in empty cells)."""
        c = self.pair_counts.astype(float)
        safe = np.where(c > 0, c, 1.0)
        m1 = self.feature_sums / safe[..., None]
        m2 = self.feature_outer_sums / safe[..., None, None]
        return m1, m2

    @property
    def triples(self):
        return np.column_stack([self.x, self.y, self.u])

    def pair_counts_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x"] + [f"y{k}" for k in range(self.size)])
        for x, row in enumerate(self.pair_counts):
            w.writerow([x] + [int(c) for c in row])
        return buf.getvalue()

    def triples_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "u"])
        for x, y, u in zip(self.x, self.y, self.u):
            w.writerow([int(x), int(y), repr(float(u))])
        return buf.getvalue()


def build(path, size=None):
    """Empirical measures from the first ``N`` transitions of ``path``."""
    if path.N < 1:
        raise EmptyPath("path has no observed transitions")
    x, y, u = path.observed()
    size = int(max(x.max(), y.max()) + 1) if size is None else int(size)
    cell = x * size + y
    counts = np.bincount(cell, minlength=size * size).reshape(size, size)
    phi = features(u)
    fsum = np.stack([np.bincount(cell, weights=phi[:, k], minlength=size * size)
                     for k in range(3)], axis=-1).reshape(size, size, 3)
    osum = np.empty((size, size, 3, 3))
    for k in range(3):
        for l in range(k, 3):
            s = np.bincount(cell, weights=phi[:, k] * phi[:, l],
                            minlength=size * size).reshape(size, size)
            osum[..., k, l] = osum[..., l, k] = s
    for a in (counts, x, y, u, fsum, osum):
        a.setflags(write=False)
    return EmpiricalMeasures(
        N=int(path.N), size=size, pair_counts=counts, x=x, y=y, u=u,
        mhat=float(np.mean(u)), regime=path.regime, horizon_n=float(path.n),
        feature_sums=fsum, feature_outer_sums=osum,
    )


def _pair_values(emp, f):
    if callable(f):
        xs, ys = np.meshgrid(np.arange(emp.size), np.arange(emp.size), indexing="ij")
        return np.asarray(f(xs, ys), dtype=float)
    return np.asarray(f, dtype=float)


def expect_pairs(emp, f):
    """``P2_hat[f]`` for a pair function.

    ``f`` is either an array of shape ``(S, S, ...)`` or a vectorized
    callable ``f(x, y)`` evaluated on the full index grid.
    """
    vals = _pair_values(emp, f)
    w = emp.pair_counts
    bad = (w > 0).reshape(w.shape + (1,) * (vals.ndim - 2)) & ~np.isfinite(vals)
    if bad.any():
        x, y = np.argwhere(bad)[0][:2]
        raise NonFiniteValue("pair function not finite on the support", x=int(x), y=int(y))
    vals = np.where(np.isfinite(vals), vals, 0.0)
    return np.tensordot(w / emp.N, vals, axes=([0, 1], [0, 1]))


def expect_triples(emp, f):
    """``P3_hat[f]`` for a vectorized triple function ``f(x, y, u)``."""
    vals = np.asarray(f(emp.x, emp.y, emp.u), dtype=float)
    if not np.all(np.isfinite(vals)):
        j = int(np.argwhere(~np.isfinite(vals.reshape(emp.N, -1)))[0][0])
        raise NonFiniteValue("triple function not finite", x=int(emp.x[j]),
                             y=int(emp.y[j]), u=float(emp.u[j]))
    return vals.mean(axis=0)
