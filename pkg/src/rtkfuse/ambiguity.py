"""Integer least squares for carrier-phase ambiguities.

Decorrelation (lattice reduction on the LtDL factors) followed by a
depth-first shrinking-ellipsoid search for the best and second-best integer
vectors, validated by the ratio test.

The objective is q(D) = (D - Dhat)^T W^{-1} (D - Dhat) over integer vectors D,
where W is the float-solution covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


class DecompositionError(ValueError):
    """Covariance factorization failed (not positive definite)."""


class SearchOverflowError(RuntimeError):
    """Integer search enumerated more nodes than the configured cap."""


@dataclass(frozen=True)
class IlsProblem:
    """Float ambiguity vector with its covariance."""

    float_amb: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.float_amb, dtype=float))
        W = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        n = a.shape[0]
        if n < 1 or W.shape != (n, n):
            raise ValueError("inconsistent ILS problem dimensions")
        if np.abs(W - W.T).max() > 1e-10:
            raise ValueError("ILS covariance is not symmetric")
        object.__setattr__(self, "float_amb", a)
        object.__setattr__(self, "covariance", 0.5 * (W + W.T))

    @property
    def n(self) -> int:
        return self.float_amb.shape[0]


@dataclass(frozen=True)
class IlsSolution:
    best: np.ndarray  # integer vector
    second: np.ndarray
    q_best: float
    q_second: float

    def __post_init__(self):
        if self.q_best > self.q_second + 1e-12:
            raise ValueError("best residual exceeds second-best residual")

    @property
    def ratio(self) -> float:
        if self.q_best <= 0.0:
            return np.inf if self.q_second > 0.0 else 1.0
        return self.q_second / self.q_best


def ratio_test(solution: IlsSolution, threshold: float = 3.0) -> bool:
    """Pass iff q2/q1 >= threshold.

    A perfect fit (q1 = 0 < q2) passes; the degenerate q1 = q2 = 0 case fails
    because the candidates cannot be distinguished.
    """
    if solution.q_best <= 0.0 and solution.q_second <= 0.0:
        return False
    return solution.ratio >= threshold


def _ltdl(W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Factor W = L^T diag(d) L with L unit lower-triangular.

    Nearly singular covariances get a small diagonal conditioning term before
    the factorization is declared failed.
    """
    n = W.shape[0]
    for jitter in (0.0, 1e-12 * np.trace(W) / n):
        A = W.copy() + jitter * np.eye(n)
        L = np.zeros((n, n))
        d = np.zeros(n)
        ok = True
        for i in range(n - 1, -1, -1):
            d[i] = A[i, i]
            if d[i] <= 1e-12 * max(1.0, np.trace(W) / n):
                ok = False
                break
            L[i, :i + 1] = A[i, :i + 1] / np.sqrt(d[i])
            for j in range(i):
                A[j, :j + 1] -= L[i, :j + 1] * L[i, j]
            L[i, :i + 1] /= L[i, i]
        if ok:
            return L, d
    raise DecompositionError("ILS covariance is not positive definite")


def _reduction(L: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Lattice reduction: integer Gauss transforms plus adjacent swaps.

    Modifies L, d in place and returns the accumulated unimodular matrix Zt
    such that the transformed ambiguities are z = Zt^T a.
    """
    n = len(d)
    Z = np.eye(n)
    j = k = n - 2
    while j >= 0:
        if j <= k:
            for i in range(j + 1, n):
                mu = round(L[i, j])
                if mu != 0:
                    L[i:, j] -= mu * L[i:, i]
                    Z[:, j] -= mu * Z[:, i]
        delta = d[j] + L[j + 1, j] ** 2 * d[j + 1]
        if delta + 1e-6 < d[j + 1]:
            eta = d[j] / delta
            lam = d[j + 1] * L[j + 1, j] / delta
            d[j] = eta * d[j + 1]
            d[j + 1] = delta
            L[j:j + 2, :j] = np.array([[-L[j + 1, j], 1.0],
                                       [eta, lam]]) @ L[j:j + 2, :j]
            L[j + 1, j] = lam
            L[j + 2:, [j, j + 1]] = L[j + 2:, [j + 1, j]]
            Z[:, [j, j + 1]] = Z[:, [j + 1, j]]
            j, k = n - 2, j
        else:
            j -= 1
    return Z


def decorrelate(problem: IlsProblem) -> Tuple[np.ndarray, IlsProblem]:
    """Return (Z, transformed problem) with cov' = Z W Z^T and a' = Z a.

    Z is unimodular, so integer optima map back exactly via D = Z^{-1} z.
    """
    L, d = _ltdl(problem.covariance)
    Zt = _reduction(L, d)
    Z = Zt.T
    return Z, IlsProblem(Z @ problem.float_amb, Z @ problem.covariance @ Z.T)


def _search_factors(L: np.ndarray, d: np.ndarray, zhat: np.ndarray,
                    m: int, node_cap: int) -> Tuple[np.ndarray, np.ndarray]:
    """Depth-first shrinking-ellipsoid enumeration on LtDL factors.

    Returns (candidates (n, m), residuals (m,)) sorted by residual.
    """
    n = len(d)
    nn = 0
    imax = 0
    chi2 = 1e18
    S = np.zeros((n, n))
    dist = np.zeros(n)
    zb = np.zeros(n)
    z = np.zeros(n)
    step = np.zeros(n)
    zn = np.zeros((n, m))
    s = np.zeros(m)

    k = n - 1
    zb[k] = zhat[k]
    z[k] = round(zb[k])
    y = zb[k] - z[k]
    step[k] = 1.0 if y >= 0 else -1.0

    for _ in range(node_cap):
        newdist = dist[k] + y * y / d[k]
        if newdist < chi2:
            if k != 0:
                k -= 1
                dist[k] = newdist
                S[k, :k + 1] = S[k + 1, :k + 1] + (z[k + 1] - zb[k + 1]) * L[k + 1, :k + 1]
                zb[k] = zhat[k] + S[k, k]
                z[k] = round(zb[k])
                y = zb[k] - z[k]
                step[k] = 1.0 if y >= 0 else -1.0
            else:
                if nn < m:
                    if nn == 0 or newdist > s[imax]:
                        imax = nn
                    zn[:, nn] = z
                    s[nn] = newdist
                    nn += 1
                else:
                    if newdist < s[imax]:
                        zn[:, imax] = z
                        s[imax] = newdist
                        imax = int(np.argmax(s))
                    chi2 = s[imax]
                z[0] += step[0]
                y = zb[0] - z[0]
                step[0] = -step[0] - (1.0 if step[0] > 0 else -1.0)
        else:
            if k == n - 1:
                break
            k += 1
            z[k] += step[k]
            y = zb[k] - z[k]
            step[k] = -step[k] - (1.0 if step[k] > 0 else -1.0)
    else:
        raise SearchOverflowError(f"integer search exceeded {node_cap} nodes")

    order = np.argsort(s[:nn])
    return zn[:, order], s[order]


def search(problem: IlsProblem, num_candidates: int = 2,
           node_cap: int = 1_000_000) -> IlsSolution:
    """Solve the ILS problem for the best and second-best integer vectors."""
    if num_candidates < 2:
        raise ValueError("need at least two candidates for the ratio test")
    Z, transformed = decorrelate(problem)
    L, d = _ltdl(transformed.covariance)
    zn, s = _search_factors(L, d, transformed.float_amb, num_candidates, node_cap)
    if zn.shape[1] < 2:
        raise RuntimeError("integer search did not produce two candidates")
    Zinv = np.linalg.inv(Z)
    best = np.rint(Zinv @ zn[:, 0]).astype(int)
    second = np.rint(Zinv @ zn[:, 1]).astype(int)
    return IlsSolution(best=best, second=second,
                       q_best=float(s[0]), q_second=float(s[1]))


def brute_force_search(problem: IlsProblem, radius: int = 6) -> IlsSolution:
    """Exhaustive enumeration over an integer box around round(Dhat).

    Oracle implementation: independent of the lattice search path, intended
    for tests and small N only.
    """
    a = problem.float_amb
    n = problem.n
    Winv = np.linalg.inv(problem.covariance)
    center = np.rint(a)
    grids = np.meshgrid(*[np.arange(-radius, radius + 1)] * n, indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=1)
    cands = center[None, :] + offsets
    diff = cands - a[None, :]
    q = np.einsum("ij,jk,ik->i", diff, Winv, diff)
    order = np.lexsort((*(cands.T[::-1]), q))  # residual, then lexicographic
    i0, i1 = order[0], order[1]
    return IlsSolution(best=cands[i0].astype(int), second=cands[i1].astype(int),
                       q_best=float(q[i0]), q_second=float(q[i1]))
