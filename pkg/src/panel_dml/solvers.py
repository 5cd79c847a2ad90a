"""Coordinate descent for min_b  b'Qb - 2q'b + sum_j pen_j |b_j|  with a duality-gap certificate.

Both the Lasso (after partialling out unpenalized columns) and the Riesz
representer problem have this form with Q = A'A positive semidefinite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import linprog

from .errors import SolverError

log = logging.getLogger(__name__)

RIDGE = 1e-20  # added to every diagonal so zero-variance columns stay well defined
GAP_TOL = 1e-8


@njit(cache=True)
def _sweeps(Q, q, pen, beta, h, active, n_active, max_sweeps, tol):
    p = Q.shape[0]
    for sweep in range(max_sweeps):
        dmax = 0.0
        for a in range(n_active):
            j = active[a]
            qjj = Q[j, j] + 1e-20
            old = beta[j]
            z = q[j] - h[j] + Q[j, j] * old
            thr = 0.5 * pen[j]
            if z > thr:
                new = (z - thr) / qjj
            elif z < -thr:
                new = (z + thr) / qjj
            else:
                new = 0.0
            if new != old:
                d = new - old
                beta[j] = new
                for k in range(p):
                    h[k] += Q[j, k] * d
                ch = abs(d) * np.sqrt(qjj)
                if ch > dmax:
                    dmax = ch
        if dmax <= tol:
            return sweep + 1
    return -max_sweeps


@dataclass(frozen=True)
class L1Solution:
    beta: np.ndarray
    objective: float
    gap: float
    rel_gap: float
    certified: bool
    sweeps: int


def objective(Q, q, pen, beta) -> float:
    return float(beta @ Q @ beta - 2 * q @ beta + np.abs(pen) @ np.abs(beta))


def range_energy(Q, q, rtol: float = 1e-8) -> tuple[float, bool, np.ndarray]:
    """Return (q' Q^+ q, whether q lies in the column space of Q, null-space basis of Q).

    q' Q^+ q is the squared norm of the minimum-norm response y0 with A'y0 = q,
    which makes the duality gap computable when only Q and q are known.
    """
    evals, evecs = np.linalg.eigh(Q)
    cut = rtol * max(evals.max(initial=0.0), 1e-300)
    keep = evals > cut
    c = evecs.T @ q
    yy = float(np.sum(c[keep] ** 2 / evals[keep]))
    resid = float(np.sqrt(np.sum(c[~keep] ** 2)))
    return yy, resid <= 1e-6 * max(float(np.linalg.norm(q)), 1e-300), evecs[:, ~keep]


def unbounded_direction(q, pen, null) -> bool:
    """True if some v in span(null) has 2q'v > sum(pen*|v|), i.e. the objective is unbounded."""
    p, k = null.shape
    if k == 0:
        return False
    # 2q'v <= 2||P q||_2 ||v||_1 and pen'|v| >= min(pen) ||v||_1 give a cheap bounded test
    if 2 * np.linalg.norm(null.T @ q) <= pen.min():
        return False
    # variables (z, t): maximize 2q'Nz - pen't  s.t. -t <= Nz <= t, 0 <= t <= 1
    c = np.concatenate([-2 * null.T @ q, pen])
    eye = np.eye(p)
    A_ub = np.block([[null, -eye], [-null, -eye]])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * p),
                  bounds=[(None, None)] * k + [(0, 1)] * p, method="highs")
    return res.status == 0 and -res.fun > 1e-9 * max(1.0, float(np.abs(q).max()))


def duality_gap(Q, q, pen, beta, yy) -> tuple[float, float]:
    """Gap between the primal ||y0 - A b||^2 + pen|b| and the scaled-residual dual point."""
    Qb = Q @ beta
    r2 = max(yy - 2 * q @ beta + beta @ Qb, 0.0)
    corr = q - Qb
    penalized = pen > 0
    if penalized.any():
        ratio = np.abs(corr[penalized]) / (0.5 * pen[penalized])
        s = min(1.0, 1.0 / ratio.max()) if ratio.max() > 0 else 1.0
    else:
        s = 1.0
    dual = 2 * s * (yy - q @ beta) - s * s * r2
    primal = r2 + np.abs(pen) @ np.abs(beta)
    gap = max(primal - dual, 0.0)
    return float(gap), float(gap / max(yy, 1e-300))


def _kkt_violation(Q, q, pen, beta) -> float:
    corr = q - Q @ beta
    nz = beta != 0
    v = np.where(nz, np.abs(corr - 0.5 * pen * np.sign(beta)), np.maximum(np.abs(corr) - 0.5 * pen, 0.0))
    return float(v.max(initial=0.0))


def _polish(Q, q, pen, beta):
    """Solve the stationarity system exactly on the current support; keep it if signs hold."""
    S = np.flatnonzero(beta)
    if S.size == 0:
        return beta
    sign = np.sign(beta[S])
    rhs = q[S] - 0.5 * pen[S] * sign
    QS = Q[np.ix_(S, S)] + RIDGE * np.eye(S.size)
    try:
        bS = np.linalg.solve(QS, rhs)
    except np.linalg.LinAlgError:
        return beta
    if not np.all(np.isfinite(bS)) or np.any(np.sign(bS) != sign):
        return beta
    cand = np.zeros_like(beta)
    cand[S] = bS
    if objective(Q, q, pen, cand) <= objective(Q, q, pen, beta) + 1e-14 * abs(objective(Q, q, pen, beta)):
        return cand
    return beta


def solve_l1_quadratic(Q, q, pen, *, yy=None, in_range: bool = True, beta0=None, tol: float = GAP_TOL,
                       max_sweeps: int = 20000, max_rounds: int = 60,
                       budget: int = 2_000_000) -> L1Solution:
    """Minimize b'Qb - 2q'b + sum(pen*|b|) by active-set coordinate descent.

    ``yy`` is ||y0||^2 for a response with A'y0 = q; when omitted it is
    recovered from Q, and ``in_range`` states whether q lies in the range of
    Q (only consulted when ``yy`` is given). Convergence is certified by a relative duality gap
    (gap / yy) at most ``tol``. If q is outside the range of Q no finite
    dual bound exists and a KKT residual check is used instead
    (``certified=False``). Raises SolverError when neither test passes.
    """
    Q = np.ascontiguousarray(Q, dtype=float)
    q = np.asarray(q, dtype=float).copy()
    p = q.size
    pen = np.broadcast_to(np.asarray(pen, dtype=float), (p,)).copy()
    if np.any(pen < 0):
        raise SolverError("penalties must be non-negative")
    if yy is None:
        yy, in_range, null = range_energy(Q, q)
        if not in_range and unbounded_direction(q, pen, null):
            raise SolverError("objective is unbounded below: linear term has an unpenalized "
                              "component outside the range of the quadratic form")
    if p == 0:
        return L1Solution(np.zeros(0), 0.0, 0.0, 0.0, True, 0)
    if not np.any(pen > 0):
        beta = np.linalg.lstsq(Q + RIDGE * np.eye(p), q, rcond=None)[0]
        gap, rel = duality_gap(Q, q, pen, beta, yy)
        return L1Solution(beta, objective(Q, q, pen, beta), gap, rel, in_range, 0)

    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    h = Q @ beta
    all_idx = np.arange(p, dtype=np.int64)
    scale = np.sqrt(max(yy, 1e-300))
    inner = 1e-4 * scale
    sweeps = 0
    gap = rel = np.inf
    bound = 1e12 * (1.0 + np.abs(q).max() / max(np.diag(Q).max(), 1e-300))
    for _ in range(max_rounds):
        n = _sweeps(Q, q, pen, beta, h, all_idx, p, 1, 0.0)
        sweeps += abs(n)
        active = np.flatnonzero(beta).astype(np.int64)
        if active.size:
            n = _sweeps(Q, q, pen, beta, h, active, active.size, max_sweeps, inner)
            sweeps += abs(n)
        if not np.all(np.isfinite(beta)) or np.abs(beta).max(initial=0.0) > bound:
            raise SolverError("coordinate descent diverged (objective unbounded below?)")
        h = Q @ beta  # refresh accumulated rounding
        gap, rel = duality_gap(Q, q, pen, beta, yy)
        if in_range and rel <= tol:
            break
        if not in_range and _kkt_violation(Q, q, pen, beta) <= 1e-9 * max(1.0, np.abs(q).max()):
            break
        inner *= 0.1
        if sweeps > budget:
            raise SolverError(f"sweep budget exhausted (relative gap {rel:.3g})")
    else:
        if in_range:
            raise SolverError(f"no duality-gap certificate after {sweeps} sweeps (relative gap {rel:.3g})")
        raise SolverError(f"KKT conditions not met after {sweeps} sweeps")
    beta = _polish(Q, q, pen, beta)
    gap, rel = duality_gap(Q, q, pen, beta, yy)
    return L1Solution(beta, objective(Q, q, pen, beta), gap, rel, in_range, sweeps)
