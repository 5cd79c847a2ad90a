"""Sparse linear Riesz representer alpha(X) = b(X) rho for an average directional derivative.

rho minimizes  -2 M'rho + rho' G rho + kappa * sum_j psi_j |rho_j|  where G is the
second-moment matrix of the demeaned dictionary rows and M the mean of the
gradient rows. The loadings psi_j are re-estimated from the current fit until
they settle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, SolverError
from .solvers import range_energy, solve_l1_quadratic, unbounded_direction

log = logging.getLogger(__name__)

C_GRID = (5 / 4, 1.0, 3 / 4, 5 / 8, 9 / 16, 1 / 2)
LOADING_FLOOR = 0.0
LOADING_ADD = 0.2
LOADING_TOL = 1e-4
LOADING_MAX_ITER = 10


def kappa_grid(n_train: int, p: int, c_grid=C_GRID) -> np.ndarray:
    """kappa = c / sqrt(n_train) * Phi^{-1}(1 - 0.05 / p) for each c, in the order of ``c_grid``."""
    if p < 1:
        raise ConfigError("dictionary must have at least one term")
    if n_train < 1:
        raise ConfigError("need at least one training observation")
    base = norm.ppf(1 - 0.05 / p) / np.sqrt(n_train)
    return np.array([c * base for c in c_grid])


@dataclass
class RieszMoments:
    """Training-side quantities shared by every kappa: rows, G, M and the range check."""

    B: np.ndarray
    Mrows: np.ndarray
    G: np.ndarray
    M: np.ndarray
    yy: float
    in_range: bool
    null: np.ndarray
    jitter: bool = False

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @classmethod
    def from_rows(cls, B, Mrows) -> RieszMoments:
        B = np.asarray(B, dtype=float)
        Mrows = np.asarray(Mrows, dtype=float)
        n = B.shape[0]
        G = B.T @ B / n
        M = Mrows.mean(axis=0)
        jitter = False
        evals = np.linalg.eigvalsh(G)
        if evals.size and evals.min() < -1e-10 * max(evals.max(), 1.0):
            G = G + 1e-12 * np.eye(G.shape[0])
            jitter = True
            log.warning("second-moment matrix not PSD (min eigenvalue %.3g); added 1e-12 jitter", evals.min())
        yy, in_range, null = range_energy(G, M)
        return cls(B, Mrows, G, M, yy, in_range, null, jitter)


@dataclass
class RieszFit:
    rho: np.ndarray
    kappa: float
    loadings: np.ndarray
    iterations: int
    loss_trace: list = field(default_factory=list)
    certified: bool = True
    rel_gap: float = 0.0

    def alpha(self, B) -> np.ndarray:
        return np.asarray(B, dtype=float) @ self.rho

    def to_dict(self) -> dict:
        return {"rho": self.rho.tolist(), "kappa": self.kappa, "loadings": self.loadings.tolist(),
                "iterations": self.iterations, "loss_trace": self.loss_trace,
                "certified": self.certified, "rel_gap": self.rel_gap}

    @classmethod
    def from_dict(cls, data) -> RieszFit:
        if isinstance(data, str):
            data = json.loads(data)
        return cls(np.array(data["rho"], dtype=float), float(data["kappa"]),
                   np.array(data["loadings"], dtype=float), int(data["iterations"]),
                   list(data["loss_trace"]), bool(data["certified"]), float(data["rel_gap"]))


def _loadings(B, Mrows, alpha):
    d = np.sqrt(np.mean((B * alpha[:, None] - Mrows) ** 2, axis=0))
    return np.maximum(LOADING_FLOOR, d) + LOADING_ADD


def riesz_objective(moments: RieszMoments, rho) -> float:
    return float(-2 * moments.M @ rho + rho @ moments.G @ rho)


def fit_riesz(moments: RieszMoments, kappa: float) -> RieszFit:
    """Solve the penalized Riesz problem, alternating loading updates and re-solves.

    Loadings start from rho = 0 and stop once their largest relative change is
    below 1e-4, or after 10 updates. kappa = 0 gives the least-squares solution
    G^+ M directly.
    """
    if kappa < 0:
        raise ConfigError(f"kappa must be non-negative, got {kappa}")
    B, Mrows = moments.B, moments.Mrows
    if kappa == 0:
        sol = solve_l1_quadratic(moments.G, moments.M, 0.0, yy=moments.yy, in_range=moments.in_range)
        rho = sol.beta
        return RieszFit(rho, 0.0, np.zeros(moments.p), 0, [riesz_objective(moments, rho)],
                        moments.in_range, sol.rel_gap)
    psi = _loadings(B, Mrows, np.zeros(moments.n))
    rho = np.zeros(moments.p)
    trace = []
    sol = None
    it = 0
    for it in range(1, LOADING_MAX_ITER + 1):
        pen = kappa * psi
        if not moments.in_range and unbounded_direction(moments.M, pen, moments.null):
            raise SolverError(f"Riesz objective unbounded below at kappa={kappa:.4g}")
        sol = solve_l1_quadratic(moments.G, moments.M, pen, yy=moments.yy,
                                 in_range=moments.in_range, beta0=rho)
        rho = sol.beta
        trace.append(riesz_objective(moments, rho))
        new = _loadings(B, Mrows, B @ rho)
        change = float(np.max(np.abs(new - psi) / psi))
        psi = new
        if change < LOADING_TOL:
            break
    return RieszFit(rho, float(kappa), psi, it, trace, sol.certified, sol.rel_gap)


def riesz_loss(fit: RieszFit, B, Mrows) -> float:
    """Mean over evaluation rows of -2 m_i rho + (b_i rho)^2."""
    B = np.asarray(B, dtype=float)
    a = B @ fit.rho
    return float(np.mean(-2 * (np.asarray(Mrows, dtype=float) @ fit.rho) + a * a))
