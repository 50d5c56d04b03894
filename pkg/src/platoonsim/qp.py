"""Dense convex QP solver: min 1/2 x'Hx + g'x s.t. lb <= x <= ub, Gx <= h.

Dual active-set method (Goldfarb-Idnani): start at the unconstrained minimum,
add the most violated constraint, take full/partial dual steps until primal
feasible. Exact for strictly convex problems, deterministic, no phase-1.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import QpInputError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 4000
PSD_SHIFT = 1e-9  # regularization added to H before factorizing
SYM_TOL = 1e-12
PSD_EIG_FLOOR = -1e-9  # smallest acceptable eigenvalue of the symmetrized H


@dataclass
class QpProblem:
    H: np.ndarray  # n x n, symmetric PSD
    g: np.ndarray  # n
    lb: Optional[np.ndarray] = None  # n, -inf allowed
    ub: Optional[np.ndarray] = None  # n, +inf allowed
    G: Optional[np.ndarray] = None  # m x n inequality rows
    h: Optional[np.ndarray] = None  # m, Gx <= h


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str  # "optimal" | "max_iter" | "infeasible"
    active: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))


@lru_cache(maxsize=16)
def _signed_eye(n: int, sign: float) -> np.ndarray:
    return sign * np.eye(n)


def _stack_constraints(problem: QpProblem, n: int):
    """All inequalities as rows of M x <= m (finite bounds first, then G)."""
    blocks = []
    rhs = []
    if problem.ub is not None:
        ub = np.asarray(problem.ub, dtype=float)
        idx = np.flatnonzero(np.isfinite(ub))
        if len(idx):
            E = _signed_eye(n, 1.0) if len(idx) == n else np.eye(n)[idx]
            blocks.append(E)
            rhs.append(ub[idx])
    if problem.lb is not None:
        lb = np.asarray(problem.lb, dtype=float)
        idx = np.flatnonzero(np.isfinite(lb))
        if len(idx):
            E = _signed_eye(n, -1.0) if len(idx) == n else -np.eye(n)[idx]
            blocks.append(E)
            rhs.append(-lb[idx])
    if problem.G is not None and len(problem.G) > 0:
        blocks.append(np.atleast_2d(np.asarray(problem.G, dtype=float)))
        rhs.append(np.asarray(problem.h, dtype=float).ravel())
    if not blocks:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(blocks), np.concatenate(rhs)


def _factorize(H: np.ndarray):
    """Symmetrize, validate PSD within tolerance, return Cholesky of H + shift*I."""
    Hs = 0.5 * (H + H.T)
    asym = np.abs(H - H.T).max() if H.size else 0.0
    if asym > SYM_TOL * max(1.0, np.abs(H).max()):
        raise QpInputError(f"H not symmetric (max asymmetry {asym:.3e})")
    n = Hs.shape[0]
    K = Hs + PSD_SHIFT * np.eye(n)
    try:
        return Hs, cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        pass
    eigs = np.linalg.eigvalsh(Hs)
    if eigs.min() < PSD_EIG_FLOOR:
        raise QpInputError(f"H not PSD (min eigenvalue {eigs.min():.3e})")
    K = Hs + (PSD_SHIFT + abs(eigs.min()) + 1e-12) * np.eye(n)
    return Hs, cho_factor(K, lower=True)


def _kkt_residual(Hs, g, M, m, x, lam_full):
    stationarity = Hs @ x + g
    if len(M):
        stationarity = stationarity + M.T @ lam_full
        slack = M @ x - m
        primal = max(0.0, slack.max())
        comp = np.abs(lam_full * slack).max() if len(lam_full) else 0.0
    else:
        primal = 0.0
        comp = 0.0
    return max(np.abs(stationarity).max(), primal, comp)


def solve(
    problem: QpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> QpSolution:
    """Solve the QP. Deterministic: identical inputs give identical outputs."""
    H = np.asarray(problem.H, dtype=float)
    g = np.asarray(problem.g, dtype=float)
    n = g.shape[0]

    if problem.lb is not None and problem.ub is not None:
        lb = np.asarray(problem.lb, dtype=float)
        ub = np.asarray(problem.ub, dtype=float)
        if np.any(lb > ub):
            return QpSolution(
                x=np.full(n, np.nan), objective=np.nan, kkt_residual=np.inf,
                iterations=0, status="infeasible",
            )

    Hs, cho = _factorize(H)
    M, m = _stack_constraints(problem, n)

    x = cho_solve(cho, -g)  # unconstrained minimum
    W: list[int] = []  # working set (row indices into M)
    lam: list[float] = []  # multipliers for W, kept >= 0
    iterations = 0

    def finish(status: str) -> QpSolution:
        lam_full = np.zeros(len(M))
        for idx, li in zip(W, lam):
            lam_full[idx] += li
        res = _kkt_residual(Hs, g, M, m, x, lam_full)
        obj = 0.5 * x @ Hs @ x + g @ x
        return QpSolution(
            x=x, objective=float(obj), kkt_residual=float(res),
            iterations=iterations, status=status,
            active=np.array(sorted(W), dtype=int),
        )

    if len(M) == 0:
        return finish("optimal")

    feas_tol = tol
    while True:
        slack = M @ x - m
        p = int(np.argmax(slack))
        if slack[p] <= feas_tol:
            return finish("optimal")
        n_p = M[p]
        lam_p = 0.0

        # inner loop: drive constraint p into the working set
        while True:
            if iterations >= max_iter:
                return finish("max_iter")
            iterations += 1

            Kinv_np = cho_solve(cho, n_p)
            if W:
                N = M[W]  # na x n
                Bmat = cho_solve(cho, N.T)  # n x na
                S = N @ Bmat  # na x na Schur complement
                r = np.linalg.solve(S, N @ Kinv_np)
                z = Kinv_np - Bmat @ r
            else:
                r = np.zeros(0)
                z = Kinv_np

            denom = n_p @ z
            viol = n_p @ x - m[p]
            t2 = viol / denom if denom > 1e-14 else np.inf

            t1 = np.inf
            k_drop = -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    step = lam[j] / rj
                    if step < t1:
                        t1 = step
                        k_drop = j

            t = min(t1, t2)
            if not np.isfinite(t):
                return finish("infeasible")

            x = x - t * z
            lam = [li - t * ri for li, ri in zip(lam, r)]
            lam_p += t

            if t2 <= t1:
                W.append(p)
                lam.append(lam_p)
                break
            # partial step: constraint k_drop left the working set
            W.pop(k_drop)
            lam.pop(k_drop)
