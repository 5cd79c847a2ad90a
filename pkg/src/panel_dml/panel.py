"""Aligned outcome/covariate panels, the within transformation, folds and subsamples."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .weather import CovariateMatrix, VariableSetSchema, long_run_average, parse_range, range_label


def group_codes(labels) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes for ``labels`` plus the sorted unique labels."""
    uniq, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.reshape(-1), uniq


def group_means(values, codes, n_groups=None):
    values = np.asarray(values, dtype=float)
    codes = np.asarray(codes)
    if n_groups is None:
        n_groups = int(codes.max()) + 1 if codes.size else 0
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    if values.ndim == 1:
        sums = np.bincount(codes, weights=values, minlength=n_groups)
        return sums / np.maximum(counts, 1.0)
    order = np.argsort(codes, kind="stable")
    cs = codes[order]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    sums = np.zeros((n_groups, values.shape[1]))
    sums[cs[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return sums / np.maximum(counts, 1.0)[:, None]


def within_transform(values, codes):
    """Subtract per-unit means (rows grouped by ``codes``)."""
    values = np.asarray(values, dtype=float)
    codes = np.asarray(codes)
    return values - group_means(values, codes)[codes]


@dataclass(frozen=True)
class PanelDataset:
    """Log outcomes and covariates per (unit, period), sorted by unit then period.

    Every unit has at least two periods; units that do not are dropped at
    construction and listed in ``report``.
    """

    unit_ids: np.ndarray
    years: np.ndarray
    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    schema: VariableSetSchema | None = None
    weights: np.ndarray | None = None
    report: tuple = ()
    unit: np.ndarray = field(init=False, repr=False)
    units: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        codes, uniq = group_codes(self.unit_ids)
        object.__setattr__(self, "unit", codes)
        object.__setattr__(self, "units", uniq)
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(len(self.y)))

    @classmethod
    def build(cls, unit_ids, years, y, X, names, schema=None, weights=None, report=()) -> PanelDataset:
        unit_ids = np.asarray(unit_ids)
        years = np.asarray(years)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        weights = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
        if X.shape[1] != len(names):
            raise DataError(f"{X.shape[1]} covariate columns but {len(names)} names")
        bad = ~np.isfinite(y) | ~np.isfinite(X).all(axis=1)
        report = list(report)
        if bad.any():
            for i in np.flatnonzero(bad)[:50]:
                report.append({"unit_id": unit_ids[i], "year": years[i], "action": "dropped",
                               "reason": "non-finite outcome or covariate"})
        keep = ~bad
        uid = unit_ids[keep]
        counts = pd.Series(uid).value_counts()
        short = counts.index[counts < 2]
        if len(short):
            report.extend({"unit_id": u, "action": "dropped", "reason": "fewer than two periods"}
                          for u in sorted(short, key=str))
            keep[keep] = ~np.isin(uid, np.asarray(short))
        idx = np.flatnonzero(keep)
        order = idx[np.lexsort((years[idx].astype(str), unit_ids[idx].astype(str)))]
        return cls(unit_ids[order], years[order], y[order], X[order], tuple(names),
                   schema, weights[order], tuple(report))

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def within(self, values) -> np.ndarray:
        return within_transform(values, self.unit)

    @property
    def y_within(self) -> np.ndarray:
        return self.within(self.y)

    def year_dummies(self, levels=None) -> np.ndarray:
        """Raw period dummies, first level omitted."""
        if levels is None:
            levels = np.unique(self.years)
        levels = np.asarray(levels)
        return (self.years[:, None] == levels[None, 1:]).astype(float)

    def subset(self, units) -> PanelDataset:
        mask = np.isin(self.unit_ids, np.asarray(units))
        return PanelDataset(self.unit_ids[mask], self.years[mask], self.y[mask], self.X[mask],
                            self.names, self.schema, self.weights[mask], self.report)

    def with_y(self, y) -> PanelDataset:
        return PanelDataset(self.unit_ids, self.years, np.asarray(y, dtype=float), self.X,
                            self.names, self.schema, self.weights, self.report)

    def to_frame(self, folds: FoldAssignment | None = None) -> pd.DataFrame:
        out = pd.DataFrame({"unit_id": self.unit_ids, "year": self.years})
        if folds is not None:
            out["fold"] = folds.fold_of(self.unit_ids)
        out["y"] = self.y
        return pd.concat([out, pd.DataFrame(self.X, columns=list(self.names))], axis=1)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: VariableSetSchema, weight_col=None) -> PanelDataset:
        missing = [c for c in ("unit_id", "year", "y", *schema.covariate_names) if c not in frame.columns]
        if missing:
            raise DataError(f"panel table missing columns: {missing}")
        if frame[["unit_id", "year"]].duplicated().any():
            raise DataError("duplicate (unit_id, year) keys in panel table")
        w = None if weight_col is None else frame[weight_col].to_numpy(dtype=float)
        return cls.build(frame["unit_id"].to_numpy(), frame["year"].to_numpy(), frame["y"].to_numpy(float),
                         frame[list(schema.covariate_names)].to_numpy(float), schema.covariate_names,
                         schema, w)


def _check_yields(yields: pd.DataFrame):
    missing = [c for c in ("unit_id", "year", "yield") if c not in yields.columns]
    if missing:
        raise DataError(f"yield table missing columns: {missing}")
    if yields[["unit_id", "year"]].duplicated().any():
        dup = yields[yields[["unit_id", "year"]].duplicated()].iloc[0]
        raise DataError(f"duplicate (unit_id, year) in yields: ({dup['unit_id']}, {dup['year']})")
    if (yields["yield"] <= 0).any():
        raise DataError("yields must be strictly positive (log is taken internally)")


def _unit_weights(yields, weight_col, units):
    if weight_col is None:
        return np.ones(len(units))
    w = yields.groupby("unit_id")[weight_col].mean()
    return w.reindex(units).to_numpy(dtype=float)


def make_short_run(yields: pd.DataFrame, covariates: CovariateMatrix, weight_col=None) -> PanelDataset:
    """Annual panel: one row per unit-year with both a yield and a covariate row."""
    _check_yields(yields)
    cov = covariates.to_frame()
    if cov[["unit_id", "year"]].duplicated().any():
        raise DataError("duplicate (unit_id, year) in covariates")
    y = yields[["unit_id", "year", "yield"] + ([weight_col] if weight_col else [])]
    joined = y.merge(cov, on=["unit_id", "year"], how="inner", validate="one_to_one")
    w = _unit_weights(yields, weight_col, joined["unit_id"].to_numpy())
    return PanelDataset.build(joined["unit_id"].to_numpy(), joined["year"].to_numpy(),
                              np.log(joined["yield"].to_numpy(float)),
                              joined[list(covariates.names)].to_numpy(float), covariates.names,
                              covariates.schema, w, covariates.report)


def make_long_run(yields: pd.DataFrame, covariates: CovariateMatrix, range1, range2,
                  outcome: str = "mean_log", weight_col=None) -> PanelDataset:
    """Two-period panel of range averages.

    ``outcome="mean_log"`` averages annual log yields within each range;
    ``"log_mean"`` takes the log of the average yield instead.
    """
    if outcome not in ("mean_log", "log_mean"):
        raise ConfigError(f"outcome aggregation must be 'mean_log' or 'log_mean', got {outcome!r}")
    _check_yields(yields)
    r1, r2 = parse_range(range1), parse_range(range2)
    averaged = long_run_average(covariates, (r1, r2))
    cov = averaged.to_frame()
    frame = yields.copy()
    year = pd.to_numeric(frame["year"])
    parts = []
    for r in (r1, r2):
        sub = frame[(year >= r[0]) & (year <= r[1])]
        if outcome == "mean_log":
            v = np.log(sub["yield"].astype(float)).groupby(sub["unit_id"]).mean()
        else:
            v = np.log(sub["yield"].astype(float).groupby(sub["unit_id"]).mean())
        parts.append(pd.DataFrame({"unit_id": v.index, "year": range_label(r), "y": v.to_numpy()}))
    ys = pd.concat(parts, ignore_index=True)
    joined = ys.merge(cov, on=["unit_id", "year"], how="inner")
    w = _unit_weights(yields, weight_col, joined["unit_id"].to_numpy())
    return PanelDataset.build(joined["unit_id"].to_numpy(), joined["year"].to_numpy(),
                              joined["y"].to_numpy(float), joined[list(covariates.names)].to_numpy(float),
                              covariates.names, covariates.schema, w, averaged.report)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    units: np.ndarray
    folds: np.ndarray  # fold index per entry of ``units``

    def fold_of(self, unit_ids) -> np.ndarray:
        lookup = dict(zip(self.units.tolist(), self.folds.tolist()))
        return np.array([lookup[u] for u in np.asarray(unit_ids).tolist()], dtype=int)

    def members(self, fold: int) -> np.ndarray:
        return self.units[self.folds == fold]

    def digest(self) -> str:
        """Hash of the (unit, fold) composition."""
        order = np.argsort(self.units.astype(str), kind="stable")
        text = "\n".join(f"{u}\t{f}" for u, f in zip(self.units[order].tolist(), self.folds[order].tolist()))
        return hashlib.sha256(text.encode()).hexdigest()


def assign_folds(units, k: int = 5, seed=0) -> FoldAssignment:
    """Random unit-level partition into ``k`` folds whose sizes differ by at most one."""
    units = np.unique(np.asarray(units))
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if k > units.size:
        raise ConfigError(f"{k} folds requested but only {units.size} units")
    perm = np.random.default_rng(seed).permutation(units.size)
    folds = np.empty(units.size, dtype=int)
    folds[perm] = np.arange(units.size) % k
    return FoldAssignment(k, units, folds)


def bootstrap_subsample(units, fraction: float, seed=0) -> np.ndarray:
    """Sorted subset of ``round(fraction * n)`` units drawn without replacement."""
    units = np.unique(np.asarray(units))
    if not 0 < fraction <= 1:
        raise ConfigError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return units
    m = max(1, int(round(fraction * units.size)))
    pick = np.random.default_rng(seed).choice(units.size, size=m, replace=False)
    return units[np.sort(pick)]
