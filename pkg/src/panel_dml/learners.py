"""Regression learners for the within-transformed panel: OLS, Lasso and their shared design."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dictionary import BasisDictionary, Direction
from .errors import ConfigError, SingularDesignError
from .panel import PanelDataset, within_transform
from .solvers import L1Solution, solve_l1_quadratic

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(np.logspace(-10, 0, 15))


@dataclass
class Design:
    """Rows of one panel subset, ready for fitting or scoring.

    ``B`` is the per-unit demeaned, scaled dictionary and ``M`` the matching
    directional-gradient rows (both None when no dictionary is attached).
    """

    X: np.ndarray
    unit: np.ndarray
    y: np.ndarray  # within-transformed outcome
    D: np.ndarray  # within-transformed year dummies
    w: np.ndarray
    dictionary: BasisDictionary | None = None
    direction: Direction | None = None
    B: np.ndarray | None = None
    M: np.ndarray | None = None
    rows: np.ndarray | None = None  # positions in the parent panel

    @property
    def n(self) -> int:
        return len(self.y)

    @classmethod
    def build(cls, panel: PanelDataset, dictionary=None, direction=None, year_levels=None, rows=None):
        if rows is None:
            rows = np.arange(panel.n_obs)
        X = panel.X[rows]
        _, unit = np.unique(panel.unit[rows], return_inverse=True)
        unit = unit.reshape(-1)
        y = within_transform(panel.y[rows], unit)
        levels = np.unique(panel.years) if year_levels is None else year_levels
        dummies = (panel.years[rows][:, None] == np.asarray(levels)[None, 1:]).astype(float)
        D = within_transform(dummies, unit)
        B = M = None
        if dictionary is not None and dictionary.fitted:
            B = within_transform(dictionary.expand(X), unit)
            if direction is not None:
                M = dictionary.gradient(X, direction.weights(X))
        return cls(X, unit, y, D, panel.weights[rows], dictionary, direction, B, M, np.asarray(rows))


def retune_year_effects(r, D, w):
    """Least-squares year effects of residual ``r`` (weights ``w``)."""
    if D.shape[1] == 0:
        return np.zeros(0)
    sw = np.sqrt(w)
    return np.linalg.lstsq(D * sw[:, None], r * sw, rcond=None)[0]


def weighted_mse(r, w) -> float:
    return float(np.sum(w * r * r) / np.sum(w))


@dataclass
class LinearLearner:
    """gamma(X) = b(X) beta + year effects, for OLS and Lasso fits."""

    kind: str
    dictionary: BasisDictionary
    beta: np.ndarray
    delta: np.ndarray
    hyper: float | None = None
    diagnostics: dict = field(default_factory=dict)
    kept: np.ndarray | None = None  # OLS: retained columns of [dictionary, year dummies]

    def predict(self, X) -> np.ndarray:
        """Level prediction b(X) beta without year effects."""
        return self.dictionary.expand(X) @ self.beta

    def input_gradient(self, X) -> np.ndarray:
        """Full gradient with respect to every raw covariate, one row per observation."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = X.shape[1]
        out = np.empty_like(X)
        for c in range(k):
            e = np.zeros(k)
            e[c] = 1.0
            out[:, c] = self.dictionary.gradient(X, e) @ self.beta
        return out

    def directional(self, X, direction: Direction) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.dictionary.gradient(X, direction.weights(X)) @ self.beta

    def within_prediction(self, design: Design) -> np.ndarray:
        if design.B is not None and design.dictionary is self.dictionary:
            return design.B @ self.beta
        return within_transform(self.predict(design.X), design.unit)

    def evaluate(self, design: Design, retune: bool = True):
        """Residual and MSE on ``design``; year effects are re-estimated there when ``retune``."""
        r0 = design.y - self.within_prediction(design)
        delta = retune_year_effects(r0, design.D, design.w) if retune else self.delta
        r = r0 - design.D @ delta if design.D.shape[1] else r0
        return r, weighted_mse(r, design.w)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dictionary": self.dictionary.manifest(),
                "beta": self.beta.tolist(), "delta": self.delta.tolist(),
                "hyper": self.hyper, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, data) -> LinearLearner:
        if isinstance(data, str):
            data = json.loads(data)
        return cls(data["kind"], BasisDictionary.from_manifest(data["dictionary"]),
                   np.array(data["beta"], dtype=float), np.array(data["delta"], dtype=float),
                   data["hyper"], data.get("diagnostics", {}))


def average_directional_derivative(learner, X, direction: Direction) -> float:
    """Mean over rows of the learner's exact derivative along ``direction``."""
    return float(np.mean(learner.directional(X, direction)))


# ---------------------------------------------------------------- OLS


def fit_ols(design: Design, kind: str = "ols", rtol: float = 1e-10) -> LinearLearner:
    """Weighted least squares of the demeaned outcome on [dictionary, year dummies].

    Collinear columns are found by pivoted QR, dropped with a log entry and
    given coefficient 0.
    """
    if design.B is None:
        raise ConfigError("OLS needs a fitted dictionary attached to the design")
    B, D = design.B, design.D
    Z = np.hstack([B, D])
    sw = np.sqrt(design.w)
    Zw = Z * sw[:, None]
    _, R, piv = scipy.linalg.qr(Zw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * max(diag.max(initial=0.0), 1e-300)))
    kept = np.sort(piv[:rank])
    dropped = np.setdiff1d(np.arange(Z.shape[1]), kept)
    labels = design.dictionary.labels + [f"year_dummy_{j}" for j in range(D.shape[1])]
    if dropped.size:
        log.info("OLS dropped collinear columns: %s", [labels[j] for j in dropped])
    if not np.any(kept < B.shape[1]):
        raise SingularDesignError("every dictionary column is collinear with the fixed effects: "
                                  + ", ".join(design.dictionary.labels))
    coef = np.zeros(Z.shape[1])
    coef[kept] = np.linalg.lstsq(Zw[:, kept], design.y * sw, rcond=None)[0]
    beta, delta = coef[: B.shape[1]], coef[B.shape[1]:]
    r = design.y - Z @ coef
    return LinearLearner(kind, design.dictionary, beta, delta, None,
                         {"dropped": [labels[j] for j in dropped], "rank": rank,
                          "mse_in_sample": weighted_mse(r, design.w)}, kept)


def ols_riesz_weights(learner: LinearLearner, design: Design, g) -> np.ndarray:
    """Exact OLS representer alpha_it = N w_it g' (Z'WZ)^{-1} z_it on the retained columns.

    With this alpha, mean(alpha * residual) is zero and the score form reduces
    to the plug-in estimate.
    """
    Z = np.hstack([design.B, design.D])
    kept = learner.kept
    gz = np.concatenate([g, np.zeros(design.D.shape[1])])[kept]
    Zk = Z[:, kept]
    # Z'WZ = R'R; triangular solves avoid squaring the condition number
    R = scipy.linalg.qr(Zk * np.sqrt(design.w)[:, None], mode="r")[0][: Zk.shape[1]]
    v = scipy.linalg.solve_triangular(R, scipy.linalg.solve_triangular(R, gz, trans="T"))
    return design.n * design.w * (Zk @ v)


# ---------------------------------------------------------------- Lasso


@dataclass
class LassoProblem:
    """Gram form of the Lasso after partialling the unpenalized year effects out."""

    Q: np.ndarray
    q: np.ndarray
    yy: float
    gamma_B: np.ndarray  # year-effect coefficients of each dictionary column
    gamma_y: np.ndarray

    @property
    def lambda_max(self) -> float:
        """Smallest penalty at which every coefficient is zero."""
        return float(2 * np.abs(self.q).max(initial=0.0))

    @classmethod
    def from_design(cls, design: Design) -> LassoProblem:
        B, D, y, w = design.B, design.D, design.y, design.w
        sw = np.sqrt(w)
        if D.shape[1]:
            Dw = D * sw[:, None]
            coef = np.linalg.lstsq(Dw, np.column_stack([B * sw[:, None], y * sw]), rcond=None)[0]
            gamma_B, gamma_y = coef[:, :-1], coef[:, -1]
            Bt = B - D @ gamma_B
            yt = y - D @ gamma_y
        else:
            gamma_B, gamma_y = np.zeros((0, B.shape[1])), np.zeros(0)
            Bt, yt = B, y
        Bw = Bt * sw[:, None]
        ytw = yt * sw
        return cls(Bw.T @ Bw, Bw.T @ ytw, float(ytw @ ytw), gamma_B, gamma_y)


def fit_lasso(design: Design, lam: float, problem: LassoProblem | None = None,
              beta0=None) -> LinearLearner:
    """Minimize sum w (y - B beta - D delta)^2 + lam |beta|_1 with delta unpenalized."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    problem = problem or LassoProblem.from_design(design)
    sol: L1Solution = solve_l1_quadratic(problem.Q, problem.q, lam, yy=problem.yy, beta0=beta0)
    delta = problem.gamma_y - problem.gamma_B @ sol.beta
    return LinearLearner("lasso", design.dictionary, sol.beta, delta, float(lam),
                         {"sweeps": sol.sweeps, "rel_gap": sol.rel_gap, "converged": sol.certified,
                          "nonzero": int(np.count_nonzero(sol.beta))})


def lasso_objective(design: Design, beta, delta, lam) -> float:
    r = design.y - design.B @ beta - design.D @ delta
    return float(np.sum(design.w * r * r) + lam * np.abs(beta).sum())
