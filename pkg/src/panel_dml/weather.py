"""Daily temperature records to growing-season degree-day covariates.

Within a day temperature follows a single sine between ``tmin`` and ``tmax``::

    T(h) = (tmax + tmin) / 2 + (tmax - tmin) / 2 * sin(2 * pi * h / 24)

Exposure in the 1 degree bin ``[b, b + 1)`` is the day-average of
``clamp(T(h) - b, 0, 1)``, integrated in closed form. Bins run from 0 to 40 C;
exposure above 40 C is folded into the top bin so that the bins add up to the
full degree-day integral above 0 C.
"""

from __future__ import annotations

import calendar
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, SchemaError

N_BINS = 40
SEASON = (3, 8)
DEFAULT_THRESHOLD = 29

YEARLY_LINEAR = "yearly_linear"
YEARLY_FLEXIBLE = "yearly_flexible"
MONTHLY_FLEXIBLE = "monthly_flexible"
SCHEMA_NAMES = (YEARLY_LINEAR, YEARLY_FLEXIBLE, MONTHLY_FLEXIBLE)


class Covariate(NamedTuple):
    name: str
    kind: str  # "heat" or "prec"
    period: int | None = None  # month for monthly schemas
    bin_lo: int | None = None  # lower edge for 1 C bins


@dataclass(frozen=True)
class VariableSetSchema:
    name: str
    threshold: int = DEFAULT_THRESHOLD
    season: tuple[int, int] = SEASON

    def __post_init__(self):
        if self.name not in SCHEMA_NAMES:
            raise SchemaError(f"unknown variable set {self.name!r}; expected one of {SCHEMA_NAMES}")
        if int(self.threshold) != self.threshold or not 1 <= self.threshold <= N_BINS - 1:
            raise SchemaError(f"threshold must be an integer in [1, {N_BINS - 1}], got {self.threshold}")
        lo, hi = self.season
        if not 1 <= lo <= hi <= 12:
            raise SchemaError(f"invalid season month range {self.season}")

    @property
    def months(self) -> tuple[int, ...]:
        return tuple(range(self.season[0], self.season[1] + 1))

    @property
    def covariates(self) -> tuple[Covariate, ...]:
        if self.name == YEARLY_LINEAR:
            return (Covariate("lower", "heat"), Covariate("higher", "heat"), Covariate("prec", "prec"))
        if self.name == YEARLY_FLEXIBLE:
            bins = tuple(Covariate(f"gdd_{b:02d}", "heat", None, b) for b in range(N_BINS))
            return bins + (Covariate("prec", "prec"),)
        out = []
        for m in self.months:
            out.extend(Covariate(f"m{m:02d}_gdd_{b:02d}", "heat", m, b) for b in range(N_BINS))
            out.append(Covariate(f"m{m:02d}_prec", "prec", m))
        return tuple(out)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    @property
    def default_degree(self) -> int:
        return 2 if self.name == MONTHLY_FLEXIBLE else 3

    def to_dict(self) -> dict:
        return {"name": self.name, "threshold": self.threshold, "season": list(self.season)}


def get_schema(name: str, threshold: int = DEFAULT_THRESHOLD, season=SEASON) -> VariableSetSchema:
    return VariableSetSchema(name, threshold, tuple(season))


# ---------------------------------------------------------------------------
# Single-day kernel
# ---------------------------------------------------------------------------

def mean_excess(tmin, tmax, base):
    """Day-averaged ``max(T(h) - base, 0)`` under the single-sine curve."""
    tmin = np.asarray(tmin, dtype=float)
    tmax = np.asarray(tmax, dtype=float)
    base = np.asarray(base, dtype=float)
    mid = 0.5 * (tmax + tmin)
    amp = 0.5 * (tmax - tmin)
    mid, amp, base = np.broadcast_arrays(mid, amp, base)
    amp0 = amp
    out = np.array(np.maximum(mid - base, 0.0), dtype=float, ndmin=1)
    mid, amp, base = (np.atleast_1d(v) for v in (mid, amp, base))
    # only thresholds crossed by the daily curve need the trig branch
    part = (amp > 0) & (np.abs(base - mid) < amp)
    if np.any(part):
        a = amp[part]
        z = (base[part] - mid[part]) / a
        th = np.arcsin(z)
        out[part] = a / np.pi * (np.sqrt(1.0 - z * z) - z * (0.5 * np.pi - th))
    return out.reshape(np.shape(amp0)) if np.ndim(amp0) else out[0]


def _check_day(tmin, tmax):
    tmin = np.asarray(tmin, dtype=float)
    tmax = np.asarray(tmax, dtype=float)
    if np.any(tmin > tmax):
        bad = np.flatnonzero(np.atleast_1d(tmin > tmax))[0]
        raise DataError(f"tmin > tmax in record {bad}: tmin={np.atleast_1d(tmin)[bad]}, "
                        f"tmax={np.atleast_1d(tmax)[bad]}")
    return tmin, tmax


def daily_bin_exposure(tmin, tmax, bin_lo):
    """Degree-days spent in ``[bin_lo, bin_lo + 1)``; always within [0, 1]."""
    if np.ndim(bin_lo) == 0:
        if int(bin_lo) != bin_lo or not 0 <= bin_lo <= N_BINS - 1:
            raise SchemaError(f"bin index must be an integer in [0, {N_BINS - 1}], got {bin_lo}")
    tmin, tmax = _check_day(tmin, tmax)
    # (T - b)+ - (T - b - 1)+ == clamp(T - b, 0, 1)
    return mean_excess(tmin, tmax, bin_lo) - mean_excess(tmin, tmax, np.asarray(bin_lo) + 1)


def daily_bins(tmin, tmax) -> np.ndarray:
    """(n, 40) per-day bin exposures with the >40 C mass folded into the top bin."""
    tmin, tmax = _check_day(tmin, tmax)
    edges = np.arange(N_BINS + 1, dtype=float)
    F = mean_excess(tmin[:, None], tmax[:, None], edges[None, :])
    bins = F[:, :-1] - F[:, 1:]
    bins[:, -1] += F[:, -1]
    return bins


# ---------------------------------------------------------------------------
# Season aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateMatrix:
    """Weather covariates keyed by (unit_id, year) under one variable set."""

    schema: VariableSetSchema
    keys: pd.DataFrame  # columns unit_id, year
    values: np.ndarray
    report: tuple = ()

    def __post_init__(self):
        if self.values.shape != (len(self.keys), self.schema.n_covariates):
            raise SchemaError(f"covariate matrix shape {self.values.shape} does not match "
                              f"{len(self.keys)} rows x {self.schema.n_covariates} covariates")

    @property
    def names(self) -> tuple[str, ...]:
        return self.schema.covariate_names

    def __len__(self):
        return len(self.keys)

    def to_frame(self) -> pd.DataFrame:
        out = self.keys.reset_index(drop=True).copy()
        vals = pd.DataFrame(self.values, columns=list(self.names))
        return pd.concat([out, vals], axis=1)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: VariableSetSchema) -> CovariateMatrix:
        missing = [c for c in ("unit_id", "year", *schema.covariate_names) if c not in frame.columns]
        if missing:
            raise SchemaError(f"covariate table missing columns for {schema.name}: {missing}")
        keys = frame[["unit_id", "year"]].reset_index(drop=True)
        if keys.duplicated().any():
            dup = keys[keys.duplicated()].iloc[0].tolist()
            raise DataError(f"duplicate (unit_id, year) key in covariates: {dup}")
        vals = frame[list(schema.covariate_names)].to_numpy(dtype=float)
        return cls(schema, keys, vals)

    def select(self, mask) -> CovariateMatrix:
        mask = np.asarray(mask)
        return CovariateMatrix(self.schema, self.keys[mask].reset_index(drop=True),
                               self.values[mask], self.report)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


@dataclass(frozen=True)
class SeasonTotals:
    """Monthly degree-day bins and precipitation per (unit, year)."""

    keys: pd.DataFrame
    months: tuple[int, ...]
    heat: np.ndarray  # (n, n_months, 40)
    prec: np.ndarray  # (n, n_months)
    report: tuple = field(default=())

    def __len__(self):
        return len(self.keys)

    def select(self, idx) -> SeasonTotals:
        idx = np.asarray(idx)
        return SeasonTotals(self.keys.iloc[idx].reset_index(drop=True), self.months,
                            self.heat[idx], self.prec[idx], self.report)


def validate_daily(frame: pd.DataFrame) -> list[str]:
    """All problems with a daily weather table, as human-readable strings."""
    problems = []
    need = ["unit_id", "date", "tmin_c", "tmax_c", "prec_mm"]
    missing = [c for c in need if c not in frame.columns]
    if missing:
        return [f"daily weather missing column(s): {', '.join(missing)}"]
    dates = pd.to_datetime(frame["date"], errors="coerce", format="ISO8601")
    for i in np.flatnonzero(dates.isna().to_numpy())[:20]:
        problems.append(f"row {i}: unparseable date {frame['date'].iloc[i]!r}")
    num = {}
    for col in ("tmin_c", "tmax_c", "prec_mm"):
        num[col] = pd.to_numeric(frame[col], errors="coerce")
        for i in np.flatnonzero(num[col].isna().to_numpy())[:20]:
            problems.append(f"row {i}: non-numeric {col} {frame[col].iloc[i]!r}")
    bad = np.flatnonzero((num["tmin_c"] > num["tmax_c"]).to_numpy())
    for i in bad[:20]:
        problems.append(f"row {i}: tmin_c > tmax_c for unit {frame['unit_id'].iloc[i]} "
                        f"on {frame['date'].iloc[i]}")
    for i in np.flatnonzero((num["prec_mm"] < 0).to_numpy())[:20]:
        problems.append(f"row {i}: negative prec_mm")
    dup = pd.DataFrame({"u": frame["unit_id"], "d": dates}).duplicated()
    for i in np.flatnonzero(dup.to_numpy())[:20]:
        problems.append(f"row {i}: duplicate (unit_id, date) {frame['unit_id'].iloc[i]}, {frame['date'].iloc[i]}")
    return problems


def season_totals(records: pd.DataFrame, season=SEASON, missing: str = "reject",
                  chunk: int = 200_000) -> SeasonTotals:
    """Sum daily bins and precipitation by (unit, year, month) over the season.

    ``missing`` controls unit-years with absent days: ``"reject"`` drops them,
    ``"prorate"`` rescales each month by expected/observed days. Either way
    the affected unit-years are listed in ``report``.
    """
    if missing not in ("reject", "prorate"):
        raise ConfigError(f"missing-day policy must be 'reject' or 'prorate', got {missing!r}")
    months = tuple(range(season[0], season[1] + 1))
    dates = pd.to_datetime(records["date"], format="ISO8601")
    tmin = records["tmin_c"].to_numpy(dtype=float)
    tmax = records["tmax_c"].to_numpy(dtype=float)
    prec = records["prec_mm"].to_numpy(dtype=float)
    bad = np.flatnonzero(tmin > tmax)
    if bad.size:
        i = bad[0]
        raise DataError(f"tmin > tmax for unit {records['unit_id'].iloc[i]} on {dates.iloc[i].date()}")
    if np.any(prec < 0):
        i = np.flatnonzero(prec < 0)[0]
        raise DataError(f"negative precipitation for unit {records['unit_id'].iloc[i]} on {dates.iloc[i].date()}")
    keyframe = pd.DataFrame({"unit_id": records["unit_id"].to_numpy(), "date": dates})
    if keyframe.duplicated().any():
        i = np.flatnonzero(keyframe.duplicated().to_numpy())[0]
        raise DataError(f"duplicate (unit_id, date) for unit {records['unit_id'].iloc[i]} on {dates.iloc[i].date()}")

    month = dates.dt.month.to_numpy()
    keep = (month >= season[0]) & (month <= season[1])
    year = dates.dt.year.to_numpy()[keep]
    month = month[keep]
    units = records["unit_id"].to_numpy()[keep]
    tmin, tmax, prec = tmin[keep], tmax[keep], prec[keep]

    uy = pd.DataFrame({"unit_id": units, "year": year})
    uy_codes, uy_keys = pd.MultiIndex.from_frame(uy).factorize()
    # factorize gives first-appearance order; re-sort keys for stable output
    key_frame = uy_keys.to_frame(index=False, name=["unit_id", "year"])
    order = np.lexsort((key_frame["year"].to_numpy(), key_frame["unit_id"].astype(str).to_numpy()))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    uy_codes = rank[uy_codes]
    key_frame = key_frame.iloc[order].reset_index(drop=True)

    n_uy, n_m = len(key_frame), len(months)
    heat = np.zeros((n_uy, n_m, N_BINS))
    rain = np.zeros((n_uy, n_m))
    counts = np.zeros((n_uy, n_m), dtype=int)
    mi = month - season[0]
    flat = uy_codes * n_m + mi
    np.add.at(counts.reshape(-1), flat, 1)
    np.add.at(rain.reshape(-1), flat, prec)
    heat2 = heat.reshape(n_uy * n_m, N_BINS)
    for s in range(0, flat.size, chunk):
        sl = slice(s, s + chunk)
        b = daily_bins(tmin[sl], tmax[sl])
        order = np.argsort(flat[sl], kind="stable")
        fs = flat[sl][order]
        starts = np.flatnonzero(np.r_[True, fs[1:] != fs[:-1]])
        heat2[fs[starts]] += np.add.reduceat(b[order], starts, axis=0)

    years = key_frame["year"].to_numpy()
    expected = np.array([[calendar.monthrange(int(y), m)[1] for m in months] for y in years]).reshape(n_uy, n_m)
    short = counts < expected
    report = []
    keep_rows = np.ones(n_uy, dtype=bool)
    for r in np.flatnonzero(short.any(axis=1)):
        obs, exp = int(counts[r].sum()), int(expected[r].sum())
        if missing == "reject" or np.any(counts[r] == 0):
            keep_rows[r] = False
            action = "rejected"
        else:
            scale = expected[r] / counts[r]
            heat[r] *= scale[:, None]
            rain[r] *= scale
            action = "prorated"
        report.append({"unit_id": key_frame["unit_id"].iloc[r], "year": int(years[r]),
                       "observed_days": obs, "expected_days": exp, "action": action})
    return SeasonTotals(key_frame[keep_rows].reset_index(drop=True), months,
                        heat[keep_rows], rain[keep_rows], tuple(report))


def assemble(totals: SeasonTotals, schema: VariableSetSchema) -> CovariateMatrix:
    """Project season totals onto one variable set."""
    if tuple(totals.months) != schema.months:
        raise SchemaError(f"season totals cover months {totals.months}, schema expects {schema.months}")
    yearly = totals.heat.sum(axis=1)
    prec = totals.prec.sum(axis=1)
    if schema.name == YEARLY_LINEAR:
        t = schema.threshold
        higher = yearly[:, t:].sum(axis=1)
        lower = yearly[:, :t].sum(axis=1)
        vals = np.column_stack([lower, higher, prec])
    elif schema.name == YEARLY_FLEXIBLE:
        vals = np.column_stack([yearly, prec])
    else:
        vals = np.concatenate([totals.heat, totals.prec[:, :, None]], axis=2).reshape(len(totals), -1)
    return CovariateMatrix(schema, totals.keys.copy(), vals, totals.report)


def aggregate(records: pd.DataFrame, schema: VariableSetSchema, missing: str = "reject") -> CovariateMatrix:
    return assemble(season_totals(records, schema.season, missing), schema)


def parse_range(text) -> tuple[int, int]:
    if isinstance(text, (tuple, list)):
        lo, hi = int(text[0]), int(text[1])
    else:
        try:
            lo, hi = (int(p) for p in str(text).split("-"))
        except ValueError:
            raise ConfigError(f"year range must look like 1990-1999, got {text!r}") from None
    if lo > hi:
        raise ConfigError(f"year range {lo}-{hi} is empty")
    return lo, hi


def range_label(r) -> str:
    return f"{r[0]}-{r[1]}"


def long_run_average(matrix: CovariateMatrix, periods) -> CovariateMatrix:
    """Two-period panel of per-range covariate means, labelled by range."""
    r1, r2 = (parse_range(p) for p in periods)
    if r1[0] <= r2[1] and r2[0] <= r1[1]:
        raise ConfigError(f"year ranges {range_label(r1)} and {range_label(r2)} overlap")
    frame = matrix.to_frame()
    year = pd.to_numeric(frame["year"])
    parts = []
    for r in (r1, r2):
        sub = frame[(year >= r[0]) & (year <= r[1])]
        means = sub.drop(columns="year").groupby("unit_id", sort=True).mean()
        means.insert(0, "year", range_label(r))
        parts.append(means)
    both = parts[0].index.intersection(parts[1].index)
    dropped = sorted(set(parts[0].index).symmetric_difference(parts[1].index), key=str)
    report = tuple({"unit_id": u, "action": "dropped", "reason": "missing a year range"} for u in dropped)
    out = pd.concat([p.loc[both] for p in parts]).reset_index()
    out["_k"] = out["year"].map({range_label(r1): 0, range_label(r2): 1})
    out = out.sort_values(["unit_id", "_k"], kind="stable").drop(columns="_k").reset_index(drop=True)
    return CovariateMatrix(matrix.schema, out[["unit_id", "year"]],
                           out[list(matrix.names)].to_numpy(dtype=float), matrix.report + report)
