"""Cross-fitting, hyperparameter selection, the debiased score and its clustered variance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .dictionary import BasisDictionary, Direction, build_terms, direction_for, identity_dictionary
from .errors import ConfigError, EstimationError, PanelDMLError
from .learners import LAMBDA_GRID, Design, LassoProblem, fit_lasso, fit_ols, ols_riesz_weights
from .nnet import WIDTH_GRID, fit_nnet
from .panel import FoldAssignment, PanelDataset, assign_folds, group_codes
from .riesz import C_GRID, RieszMoments, fit_riesz, kappa_grid, riesz_loss

log = logging.getLogger(__name__)

METHODS = ("ols_linear", "ols_poly", "lasso", "lasso_dml", "nnet", "nnet_dml")


@dataclass(frozen=True)
class EstimateConfig:
    method: str
    k: int = 5
    seed: int = 0
    lambda_grid: tuple = LAMBDA_GRID
    width_grid: tuple = WIDTH_GRID
    c_grid: tuple = C_GRID
    lambda_fraction: float | None = None  # fixed lambda = fraction * lambda_max of each training fold
    width: int | None = None  # fixed network width, skips selection
    degree: int | None = None
    epochs: int = 1000
    n_jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.k < 2:
            raise ConfigError(f"need at least 2 folds, got {self.k}")
        for name in ("lambda_grid", "width_grid", "c_grid"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} is empty")

    @property
    def learner(self) -> str:
        return self.method.removesuffix("_dml")

    @property
    def debias(self) -> bool:
        return self.method.endswith("_dml")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for name in ("lambda_grid", "width_grid", "c_grid"):
            out[name] = [float(v) if name != "width_grid" else int(v) for v in out[name]]
        return out


@dataclass
class DebiasedEstimate:
    method: str
    theta: float
    variance: float
    se: float
    plugin: float
    scores: np.ndarray
    unit_ids: np.ndarray
    unit_means: np.ndarray
    n_obs: int
    n_units: int
    gamma_hyper: object
    kappa: list | None
    c_hat: float | None
    mse: float
    fold_hash: str | None
    se_cluster: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta": self.theta,
            "variance": self.variance,
            "se": self.se,
            "se_cluster": self.se_cluster,
            "plugin": self.plugin,
            "n_obs": self.n_obs,
            "n_units": self.n_units,
            "gamma_hyper": self.gamma_hyper,
            "kappa": self.kappa,
            "c_hat": self.c_hat,
            "mse": self.mse,
            "fold_hash": self.fold_hash,
            "diagnostics": self.diagnostics,
        }


def clustered_variance(scores, unit) -> float:
    """V = (1/N) sum_i [ sum_t (s_it - s)^2 + 2 sum_{t<t'} (s_it - s_i)(s_it' - s_i) ].

    ``s`` is the overall mean and ``s_i`` the mean of unit i. The pairwise sum
    is computed as ((sum_t e_it)^2 - sum_t e_it^2) / 2 with e_it = s_it - s_i.
    """
    scores = np.asarray(scores, dtype=float)
    codes, _ = group_codes(unit)
    n = scores.size
    theta = scores.mean()
    counts = np.bincount(codes).astype(float)
    unit_mean = np.bincount(codes, weights=scores) / counts
    e = scores - unit_mean[codes]
    own = np.bincount(codes, weights=(scores - theta) ** 2)
    cross = np.bincount(codes, weights=e) ** 2 - np.bincount(codes, weights=e * e)
    return float(np.sum(own + cross) / n)


def cluster_sum_variance(scores, unit) -> float:
    """Variance of the mean score that treats each unit's summed deviation as one draw."""
    scores = np.asarray(scores, dtype=float)
    codes, _ = group_codes(unit)
    dev = np.bincount(codes, weights=scores - scores.mean())
    return float(np.sum(dev * dev) / scores.size ** 2)


# ---------------------------------------------------------------- cross-fitting plumbing


@dataclass
class FoldSplit:
    fold: int
    train: Design
    eval: Design


def _run(fn, tasks, n_jobs):
    if n_jobs == 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*t) for t in tasks)


def base_dictionary(panel: PanelDataset, method: str, degree=None) -> BasisDictionary:
    if panel.schema is None:
        raise ConfigError("panel has no variable-set schema; cannot build a dictionary")
    if method == "ols_linear":
        return identity_dictionary(panel.schema)
    return build_terms(panel.schema, panel.schema.default_degree if degree is None else degree)


def make_splits(panel: PanelDataset, folds: FoldAssignment, dictionary: BasisDictionary | None,
                direction: Direction) -> list[FoldSplit]:
    """Per-fold train/eval designs; the dictionary scale is fitted on training rows only."""
    row_fold = folds.fold_of(panel.unit_ids)
    levels = np.unique(panel.years)
    splits = []
    for f in range(folds.k):
        ev = np.flatnonzero(row_fold == f)
        tr = np.flatnonzero(row_fold != f)
        if np.intersect1d(panel.unit_ids[ev], panel.unit_ids[tr]).size:
            raise EstimationError("unit appears in both training and evaluation rows", fold=f)
        fitted = dictionary.fit(panel.X[tr]) if dictionary is not None else None
        splits.append(FoldSplit(f, Design.build(panel, fitted, direction, levels, tr),
                                Design.build(panel, fitted, direction, levels, ev)))
    return splits


def _pick(values, totals):
    """Index of the smallest total; ties go to the smallest hyperparameter value."""
    totals = np.asarray(totals, dtype=float)
    best = np.nanmin(totals)
    if not np.isfinite(best):
        return None
    tied = np.flatnonzero(totals == best)
    return int(tied[np.argmin(np.asarray(values, dtype=float)[tied])])


def _lasso_path(split: FoldSplit, grid, fraction):
    problem = LassoProblem.from_design(split.train)
    lams = [fraction * problem.lambda_max] if fraction is not None else sorted(grid, reverse=True)
    out = {}
    beta = None
    for lam in lams:
        try:
            learner = fit_lasso(split.train, lam, problem, beta0=beta)
        except PanelDMLError as exc:
            out[lam] = (None, np.inf, str(exc))
            continue
        beta = learner.beta
        out[lam] = (learner, learner.evaluate(split.eval)[1], None)
    return out


def _nnet_fit(split: FoldSplit, width, seed, epochs):
    ss = np.random.SeedSequence([int(seed), split.fold, int(width)])
    try:
        learner = fit_nnet(split.train, int(width), seed=ss, epochs=epochs)
    except PanelDMLError as exc:
        return None, np.inf, str(exc)
    return learner, learner.evaluate(split.eval)[1], None


def select_gamma_hyper(splits: list[FoldSplit], config: EstimateConfig):
    """Shared hyperparameter minimizing the summed test-fold MSE, with the fold fits at that value.

    Returns (value, {value: summed MSE}, learners per fold, per-fold MSE).
    """
    k = len(splits)
    if config.learner == "lasso":
        paths = _run(_lasso_path, [(s, config.lambda_grid, config.lambda_fraction) for s in splits],
                     config.n_jobs)
        if config.lambda_fraction is not None:
            fits = [next(iter(p.values())) for p in paths]
            for f, (learner, _, err) in enumerate(fits):
                if learner is None:
                    raise EstimationError(f"Lasso fit failed: {err}", fold=f)
            lams = [float(learner.hyper) for learner, _, _ in fits]
            return lams, {}, [x[0] for x in fits], [x[1] for x in fits]
        grid = sorted(config.lambda_grid)
        table = {lam: [paths[f][lam] for f in range(k)] for lam in grid}
    elif config.learner == "nnet":
        grid = [config.width] if config.width is not None else sorted(config.width_grid)
        tasks = [(s, w, config.seed, config.epochs) for w in grid for s in splits]
        res = _run(_nnet_fit, tasks, config.n_jobs)
        table = {w: res[i * k:(i + 1) * k] for i, w in enumerate(grid)}
    else:
        raise ConfigError(f"no hyperparameter selection for {config.learner}")
    totals = [sum(x[1] for x in table[v]) for v in grid]
    idx = _pick(grid, totals)
    if idx is None:
        errors = {v: [x[2] for x in table[v] if x[2]] for v in grid}
        raise EstimationError(f"every {config.learner} grid fit failed: {errors}")
    best = grid[idx]
    chosen = table[best]
    summed = {float(v): float(t) for v, t in zip(grid, totals)}
    return best, summed, [x[0] for x in chosen], [float(x[1]) for x in chosen]


def _riesz_fold(split: FoldSplit, c_grid):
    moments = RieszMoments.from_rows(split.train.B, split.train.M)
    kappas = kappa_grid(split.train.n, moments.p, c_grid)
    out = []
    for kappa in kappas:
        try:
            fit = fit_riesz(moments, kappa)
            out.append((fit, riesz_loss(fit, split.eval.B, split.eval.M), None))
        except PanelDMLError as exc:
            out.append((None, np.inf, str(exc)))
    return out


def select_alpha_hyper(splits: list[FoldSplit], c_grid=C_GRID, n_jobs: int = 1):
    """Constant c minimizing the summed test-fold Riesz loss; ties go to the smaller c.

    Returns (c, {c: summed loss}, Riesz fits per fold at that c).
    """
    per_fold = _run(_riesz_fold, [(s, c_grid) for s in splits], n_jobs)
    totals = [sum(per_fold[f][j][1] for f in range(len(splits))) for j in range(len(c_grid))]
    idx = _pick(c_grid, totals)
    if idx is None:
        raise EstimationError(f"every Riesz fit failed: {[x[2] for x in per_fold[0]]}")
    fits = [per_fold[f][idx][0] for f in range(len(splits))]
    return float(c_grid[idx]), {float(c): float(t) for c, t in zip(c_grid, totals)}, fits


@dataclass
class CrossFit:
    """Fitted nuisance learners per fold, reusable for several directions."""

    config: EstimateConfig
    panel: PanelDataset
    folds: FoldAssignment | None
    splits: list
    learners: list
    gamma_hyper: object
    gamma_table: dict
    fold_mse: list


def crossfit(panel: PanelDataset, config: EstimateConfig, direction: Direction | None = None,
             dictionary: BasisDictionary | None = None) -> CrossFit:
    direction = direction or direction_for(panel.schema)
    if config.learner.startswith("ols"):
        dic = (dictionary or base_dictionary(panel, config.method, config.degree)).fit(panel.X)
        design = Design.build(panel, dic, direction)
        learner = fit_ols(design, kind=config.method)
        mse = learner.diagnostics["mse_in_sample"]
        return CrossFit(config, panel, None, [FoldSplit(-1, design, design)], [learner], None, {}, [mse])
    folds = assign_folds(panel.units, config.k, config.seed)
    needs_dict = config.learner == "lasso" or config.debias
    dic = dictionary or (base_dictionary(panel, "poly", config.degree) if needs_dict else None)
    splits = make_splits(panel, folds, dic, direction)
    best, table, learners, fold_mse = select_gamma_hyper(splits, config)
    return CrossFit(config, panel, folds, splits, learners, best, table, fold_mse)


def debiased_score(cf: CrossFit, direction: Direction | None = None, debias: bool | None = None,
                   riesz_fits=None) -> DebiasedEstimate:
    """theta_it = m(gamma_l, X_it) + alpha_l(X_it) * (y_it - gamma_l(X_it)), assembled over folds.

    Without debiasing the correction term is omitted. OLS learners use their
    exact least-squares representer, so their score mean equals the plug-in.
    """
    config, panel = cf.config, cf.panel
    direction = direction or direction_for(panel.schema)
    debias = config.debias if debias is None else debias
    n = panel.n_obs
    m_all = np.empty(n)
    s_all = np.empty(n)
    c_hat = None
    kappas = None
    diagnostics = {}
    is_ols = config.learner.startswith("ols")
    if debias and not is_ols and riesz_fits is None:
        if any(s.train.M is None for s in cf.splits):
            raise ConfigError("debiasing needs a dictionary on every fold")
        c_hat, c_table, riesz_fits = select_alpha_hyper(cf.splits, config.c_grid, config.n_jobs)
        diagnostics["riesz_loss"] = c_table
    for f, (split, learner) in enumerate(zip(cf.splits, cf.learners)):
        ev = split.eval
        try:
            m = learner.directional(ev.X, direction)
            if is_ols:
                g = ev.dictionary.gradient(ev.X, direction.weights(ev.X)).mean(axis=0)
                alpha = ols_riesz_weights(learner, ev, g)
                r = ev.y - ev.B @ learner.beta - ev.D @ learner.delta
                s = m + alpha * r
            elif debias:
                r, _ = learner.evaluate(ev)
                s = m + riesz_fits[f].alpha(ev.B) * r
            else:
                s = m
        except PanelDMLError as exc:
            raise EstimationError(str(exc), fold=f) from exc
        m_all[ev.rows] = m
        s_all[ev.rows] = s
    if debias and not is_ols:
        kappas = [float(fit.kappa) for fit in riesz_fits]
        diagnostics["riesz_certified"] = [bool(fit.certified) for fit in riesz_fits]
        diagnostics["riesz_nonzero"] = [int(np.count_nonzero(fit.rho)) for fit in riesz_fits]
    theta = float(s_all.mean())
    V = clustered_variance(s_all, panel.unit)
    codes, uniq = group_codes(panel.unit_ids)
    unit_means = np.bincount(codes, weights=s_all) / np.bincount(codes)
    diagnostics["fold_mse"] = cf.fold_mse
    if cf.gamma_table:
        diagnostics["gamma_mse"] = cf.gamma_table
    if is_ols:
        diagnostics["dropped"] = cf.learners[0].diagnostics["dropped"]
    hyper = cf.gamma_hyper
    if isinstance(hyper, (np.floating, np.integer)):
        hyper = hyper.item()
    return DebiasedEstimate(
        method=config.method, theta=theta, variance=V, se=float(np.sqrt(V / n)),
        plugin=float(m_all.mean()), scores=s_all, unit_ids=uniq, unit_means=unit_means,
        n_obs=n, n_units=panel.n_units, gamma_hyper=hyper, kappa=kappas, c_hat=c_hat,
        mse=float(np.mean(cf.fold_mse)), fold_hash=None if cf.folds is None else cf.folds.digest(),
        se_cluster=float(np.sqrt(cluster_sum_variance(s_all, panel.unit))), diagnostics=diagnostics)


def estimate(panel: PanelDataset, config: EstimateConfig | str, direction: Direction | None = None,
             dictionary: BasisDictionary | None = None, **kwargs) -> DebiasedEstimate:
    """Average directional derivative of the regression surface for one method."""
    if isinstance(config, str):
        config = EstimateConfig(config, **kwargs)
    direction = direction or direction_for(panel.schema)
    return debiased_score(crossfit(panel, config, direction, dictionary), direction)
