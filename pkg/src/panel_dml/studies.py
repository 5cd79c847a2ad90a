"""Monte Carlo simulation, subsample bootstrap of the adaptation ratio, and per-bin effects."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .dictionary import Direction
from .dml import EstimateConfig, crossfit, debiased_score, estimate
from .errors import ConfigError, PanelDMLError
from .panel import PanelDataset, bootstrap_subsample, make_long_run, make_short_run
from .weather import (
    N_BINS,
    SEASON,
    YEARLY_FLEXIBLE,
    YEARLY_LINEAR,
    CovariateMatrix,
    SeasonTotals,
    assemble,
    daily_bins,
    get_schema,
)

log = logging.getLogger(__name__)

TRUE_THETA = -0.05
PEAK_DAY = 196  # mid-July


# ---------------------------------------------------------------- synthetic weather


def _season_days(year, season):
    start = dt.date(year, season[0], 1)
    end = dt.date(year + (season[1] == 12), season[1] % 12 + 1, 1)
    return [start + dt.timedelta(d) for d in range((end - start).days)]


def _synth_arrays(n_counties: int, years, seed, season=SEASON):
    """Per year: (year, days, tmean, diurnal range, prec) with arrays shaped (county, day)."""
    rng = np.random.default_rng(seed)
    mean = rng.normal(22.0, 3.0, n_counties)
    amp = rng.uniform(6.0, 10.0, n_counties)
    phi, sd = 0.7, 3.0
    innov = sd * np.sqrt(1 - phi * phi)
    out = []
    for y in (int(v) for v in years):
        days = _season_days(y, season)
        doy = np.array([d.timetuple().tm_yday for d in days], dtype=float)
        shape = np.cos(2 * np.pi * (doy - PEAK_DAY) / 365.25)
        shape -= shape.mean()
        z = rng.normal(size=(n_counties, len(days)))
        noise = np.empty_like(z)
        noise[:, 0] = sd * z[:, 0]
        for d in range(1, len(days)):
            noise[:, d] = phi * noise[:, d - 1] + innov * z[:, d]
        tmean = mean[:, None] + amp[:, None] * shape + noise
        diurnal = rng.uniform(8.0, 12.0, z.shape)
        wet = rng.random(z.shape) < 0.3
        prec = np.where(wet, rng.gamma(2.0, 4.0, z.shape), 0.0)
        out.append((y, days, tmean, diurnal, prec))
    return out


def _county_ids(counties):
    if isinstance(counties, (int, np.integer)):
        return [f"c{i:04d}" for i in range(counties)]
    return sorted(counties, key=str)


def synth_weather(counties, years, seed=0, season=SEASON) -> pd.DataFrame:
    """Synthetic daily weather records (unit_id, date, tmin_c, tmax_c, prec_mm), deterministic in ``seed``.

    Each county gets a mean season temperature ~ N(22, 3^2) and a seasonal
    amplitude ~ U(6, 10) around a sinusoid peaking in mid-July. Daily noise is
    AR(1) with coefficient 0.7 and marginal sd 3; the diurnal range is U(8, 12);
    precipitation is Bernoulli(0.3) times Gamma(2, 4) mm.
    """
    ids = _county_ids(counties)
    frames = []
    for y, days, tm, rg, pr in _synth_arrays(len(ids), years, seed, season):
        n_days = len(days)
        frames.append(pd.DataFrame({
            "unit_id": np.repeat(np.asarray(ids, dtype=object), n_days),
            "date": np.tile([d.isoformat() for d in days], len(ids)),
            "tmin_c": (tm - rg / 2).ravel(),
            "tmax_c": (tm + rg / 2).ravel(),
            "prec_mm": pr.ravel(),
        }))
    out = pd.concat(frames, ignore_index=True)
    return out.sort_values(["unit_id", "date"], kind="stable").reset_index(drop=True)


def synth_season_totals(counties, years, seed=0, season=SEASON) -> SeasonTotals:
    """Season totals of :func:`synth_weather` computed without building the daily table."""
    ids = _county_ids(counties)
    blocks = _synth_arrays(len(ids), years, seed, season)
    months = tuple(range(season[0], season[1] + 1))
    n = len(ids)
    heat = np.zeros((n, len(blocks), len(months), N_BINS))
    rain = np.zeros((n, len(blocks), len(months)))
    for j, (y, days, tm, rg, pr) in enumerate(blocks):
        mi = np.array([d.month - season[0] for d in days])
        starts = np.flatnonzero(np.r_[True, mi[1:] != mi[:-1]])
        bins = daily_bins((tm - rg / 2).ravel(), (tm + rg / 2).ravel()).reshape(n, len(days), N_BINS)
        heat[:, j] = np.add.reduceat(bins, starts, axis=1)
        rain[:, j] = np.add.reduceat(pr, starts, axis=1)
    keys = pd.DataFrame({"unit_id": np.repeat(np.asarray(ids, dtype=object), len(blocks)),
                         "year": np.tile([b[0] for b in blocks], n)})
    return SeasonTotals(keys, months, heat.reshape(n * len(blocks), len(months), N_BINS),
                        rain.reshape(n * len(blocks), len(months)))


# ---------------------------------------------------------------- Monte Carlo simulation


@dataclass
class SimulationConfig:
    trials: int = 1000
    counties: int = 1000
    years: int = 2
    beta: tuple = (0.02, -0.05, 0.001)  # lower, higher, prec
    a_mean: float = 1.0
    a_sd: float = 1.0
    eps_sd: float = 1.0
    methods: tuple = ("ols_linear",)
    schemas: tuple = (YEARLY_LINEAR,)
    threshold: int = 29
    year_pool: tuple = tuple(range(1981, 2021))
    seed: int = 0
    k: int = 5
    estimate_options: dict = field(default_factory=dict)
    n_jobs: int = 1

    def __post_init__(self):
        if self.trials < 1 or self.counties < 2 or self.years < 2:
            raise ConfigError("simulation needs trials >= 1, counties >= 2 and years >= 2")
        if self.years > len(self.year_pool):
            raise ConfigError("year pool smaller than the requested panel length")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["beta"] = list(self.beta)
        out["methods"] = list(self.methods)
        out["schemas"] = list(self.schemas)
        out["year_pool"] = list(self.year_pool)
        return out


def trial_streams(seed, trial, n=4):
    """Independent generators for one trial, derived from (master seed, trial index)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), int(trial)]).spawn(n)]


def simulate_outcome(totals: SeasonTotals, config: SimulationConfig, rng) -> np.ndarray:
    """y = a_i + b1 * lower + b2 * higher + b3 * prec + eps on the rows of ``totals``."""
    lin = assemble(totals, get_schema(YEARLY_LINEAR, config.threshold, (totals.months[0], totals.months[-1])))
    units, codes = np.unique(totals.keys["unit_id"].astype(str).to_numpy(), return_inverse=True)
    a = rng.normal(config.a_mean, config.a_sd, units.size)
    eps = rng.normal(0.0, config.eps_sd, len(totals)) if config.eps_sd > 0 else np.zeros(len(totals))
    return a[codes.reshape(-1)] + lin.values @ np.asarray(config.beta, dtype=float) + eps


def run_trial(config: SimulationConfig, trial: int, weather: SeasonTotals | None = None) -> list[dict]:
    rng_w, rng_y, rng_pick, _ = trial_streams(config.seed, trial)
    if weather is None:
        years = np.sort(rng_pick.choice(config.year_pool, config.years, replace=False))
        totals = synth_season_totals(config.counties, years, seed=rng_w)
    else:
        totals = _draw_empirical(weather, config, rng_pick)
    y = simulate_outcome(totals, config, rng_y)
    rows = []
    for schema_name in config.schemas:
        schema = get_schema(schema_name, config.threshold, (totals.months[0], totals.months[-1]))
        cov = assemble(totals, schema)
        panel = PanelDataset.build(cov.keys["unit_id"].to_numpy(), cov.keys["year"].to_numpy(), y,
                                   cov.values, schema.covariate_names, schema)
        for method in config.methods:
            row = {"trial": trial, "method": method, "schema": schema_name}
            try:
                est = estimate(panel, EstimateConfig(method, k=config.k, seed=int(rng_pick.integers(2**31)),
                                                     **config.estimate_options))
                row.update(status="ok", theta=est.theta, plugin=est.plugin, se=est.se, mse=est.mse, error="")
            except PanelDMLError as exc:
                row.update(status="failed", theta=np.nan, plugin=np.nan, se=np.nan, mse=np.nan, error=str(exc))
            rows.append(row)
    return rows


def _draw_empirical(weather: SeasonTotals, config: SimulationConfig, rng) -> SeasonTotals:
    keys = weather.keys
    years = np.sort(keys["year"].unique())
    pick = np.sort(rng.choice(years, config.years, replace=False))
    sub = keys[keys["year"].isin(pick)]
    complete = sub.groupby("unit_id")["year"].nunique()
    units = np.sort(complete.index[complete == config.years].to_numpy().astype(str))
    if units.size < config.counties:
        raise ConfigError(f"only {units.size} units have weather for years {pick.tolist()}")
    chosen = set(rng.choice(units, config.counties, replace=False).tolist())
    idx = np.flatnonzero(keys["year"].isin(pick).to_numpy() & keys["unit_id"].astype(str).isin(chosen).to_numpy())
    return weather.select(idx)


def run_simulation(config: SimulationConfig, weather: SeasonTotals | None = None):
    """Run every trial; returns (per-trial table, per-(method, schema) summary)."""
    tasks = range(config.trials)
    if config.n_jobs == 1:
        nested = [run_trial(config, t, weather) for t in tasks]
    else:
        nested = Parallel(n_jobs=config.n_jobs)(delayed(run_trial)(config, t, weather) for t in tasks)
    trials = pd.DataFrame([r for rows in nested for r in rows])
    return trials, summarize_simulation(trials)


def summarize_simulation(trials: pd.DataFrame, truth: float = TRUE_THETA) -> pd.DataFrame:
    """Mean and sd of theta, mean fit MSE and failure counts; statistics use successful trials only."""
    out = []
    for (method, schema), g in trials.groupby(["method", "schema"], sort=False):
        ok = g[g["status"] == "ok"]
        th = ok["theta"].to_numpy(dtype=float)
        out.append({
            "method": method, "schema": schema, "n_trials": len(g), "n_failed": int(len(g) - len(ok)),
            "mean_theta": float(th.mean()) if th.size else np.nan,
            "sd_theta": float(th.std(ddof=1)) if th.size > 1 else np.nan,
            "bias": float(th.mean() - truth) if th.size else np.nan,
            "mse": float(ok["mse"].mean()) if th.size else np.nan,
        })
    return pd.DataFrame(out)


# ---------------------------------------------------------------- adaptation bootstrap


@dataclass
class AdaptationConfig:
    method: str = "ols_linear"
    schema: str = YEARLY_LINEAR
    range1: str = "1990-1999"
    range2: str = "2010-2019"
    n_boot: int = 500
    fraction: float = 0.8
    outcome: str = "mean_log"
    seed: int = 0
    k: int = 5
    guard: float = 1e-8
    bonferroni: int = 3
    estimate_options: dict = field(default_factory=dict)
    n_jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptationResult:
    trials: pd.DataFrame  # trial, theta_sr, theta_lr, ratio, status
    mean: float
    sd: float
    ci: tuple
    p_value: float
    p_bonferroni: float
    n_failed: int
    n_flagged: int

    def summary(self) -> dict:
        return {"mean_ratio": self.mean, "sd_ratio": self.sd, "ci_low": self.ci[0], "ci_high": self.ci[1],
                "p_value": self.p_value, "p_bonferroni": self.p_bonferroni,
                "n_trials": int(len(self.trials)), "n_failed": self.n_failed, "n_flagged": self.n_flagged}


def adaptation_ratio(theta_sr: float, theta_lr: float, guard: float = 1e-8) -> float:
    """1 - theta_LR / theta_SR, or NaN when |theta_SR| is below ``guard``."""
    if not np.isfinite(theta_sr) or abs(theta_sr) < guard:
        return np.nan
    return 1.0 - theta_lr / theta_sr


def _adaptation_trial(yields, covariates, config: AdaptationConfig, b: int) -> dict:
    seq = np.random.SeedSequence([int(config.seed), int(b)])
    s_sub, s_sr, s_lr = (int(np.random.default_rng(s).integers(2**31)) for s in seq.spawn(3))
    units = np.unique(covariates.keys["unit_id"].to_numpy())
    chosen = bootstrap_subsample(units, config.fraction, s_sub)
    ymask = yields["unit_id"].isin(chosen).to_numpy()
    cov = covariates.select(covariates.keys["unit_id"].isin(chosen).to_numpy())
    row = {"trial": b}
    try:
        sr = make_short_run(yields[ymask], cov)
        lr = make_long_run(yields[ymask], cov, config.range1, config.range2, config.outcome)
        opts = dict(k=config.k, **config.estimate_options)
        t_sr = estimate(sr, EstimateConfig(config.method, seed=s_sr, **opts)).theta
        t_lr = estimate(lr, EstimateConfig(config.method, seed=s_lr, **opts)).theta
    except PanelDMLError as exc:
        row.update(theta_sr=np.nan, theta_lr=np.nan, ratio=np.nan, status="failed", error=str(exc))
        return row
    ratio = adaptation_ratio(t_sr, t_lr, config.guard)
    row.update(theta_sr=t_sr, theta_lr=t_lr, ratio=ratio,
               status="ok" if np.isfinite(ratio) else "flagged", error="")
    return row


def run_adaptation(yields: pd.DataFrame, covariates: CovariateMatrix, config: AdaptationConfig) -> AdaptationResult:
    """Subsample units, estimate short- and long-run effects, and summarize the ratio.

    The one-sided p-value is the share of bootstrap ratios at or below zero;
    the interval is the bootstrap mean +/- 1.96 sd. The Bonferroni-adjusted
    p-value is reported alongside, never in place of, the raw one.
    """
    if covariates.schema.name != config.schema:
        raise ConfigError(f"covariates use {covariates.schema.name}, config asks for {config.schema}")
    tasks = range(config.n_boot)
    if config.n_jobs == 1:
        rows = [_adaptation_trial(yields, covariates, config, b) for b in tasks]
    else:
        rows = Parallel(n_jobs=config.n_jobs)(delayed(_adaptation_trial)(yields, covariates, config, b)
                                              for b in tasks)
    table = pd.DataFrame(rows, columns=["trial", "theta_sr", "theta_lr", "ratio", "status", "error"])
    ok = table.loc[table["status"] == "ok", "ratio"].to_numpy(dtype=float)
    mean = float(ok.mean()) if ok.size else np.nan
    sd = float(ok.std(ddof=1)) if ok.size > 1 else np.nan
    p = float(np.mean(ok <= 0)) if ok.size else np.nan
    return AdaptationResult(table, mean, sd, (mean - 1.96 * sd, mean + 1.96 * sd), p,
                            min(1.0, config.bonferroni * p) if ok.size else np.nan,
                            int((table["status"] == "failed").sum()), int((table["status"] == "flagged").sum()))


def two_regime_data(n_units: int = 300, years=range(1990, 2020), beta_sr: float = -0.01,
                    beta_lr: float = -0.005, shock_sd: float = 30.0, noise_sd: float = 0.1,
                    decade: int = 10, seed=0):
    """Panel whose response to within-decade deviations differs from the response to decade means.

    Annual damaging heat is a unit level plus an annual shock. Log yield is
    a_i + beta_lr * (decade mean of higher) + beta_sr * (deviation from that
    mean) + noise, so a two-period panel of decade averages recovers beta_lr
    and the annual panel is dominated by beta_sr. Returns (yields, covariates).
    """
    rng = np.random.default_rng(seed)
    years = np.asarray(list(years))
    uid = np.array([f"u{i:04d}" for i in range(n_units)], dtype=object)
    level = rng.uniform(40, 140, n_units)
    higher = np.maximum(level[:, None] + rng.normal(0, shock_sd, (n_units, years.size)), 0.0)
    lower = rng.normal(1500, 100, (n_units, years.size))
    prec = rng.gamma(20, 25, (n_units, years.size))
    dec = (years - years.min()) // decade
    dmean = np.zeros_like(higher)
    for d in np.unique(dec):
        cols = dec == d
        dmean[:, cols] = higher[:, cols].mean(axis=1, keepdims=True)
    a = rng.normal(1.0, 1.0, n_units)
    logy = a[:, None] + beta_lr * dmean + beta_sr * (higher - dmean) + rng.normal(0, noise_sd, higher.shape)
    keys = pd.DataFrame({"unit_id": np.repeat(uid, years.size), "year": np.tile(years, n_units)})
    yields = keys.assign(**{"yield": np.exp(logy).ravel()})
    cov = CovariateMatrix(get_schema(YEARLY_LINEAR), keys.copy(),
                          np.column_stack([lower.ravel(), higher.ravel(), prec.ravel()]))
    return yields, cov


# ---------------------------------------------------------------- per-bin effects


def piecewise_fit(x, effect, knee: float = 29.0) -> dict:
    """Continuous two-slope least-squares fit a + s1*min(x-knee, 0) + s2*max(x-knee, 0)."""
    x = np.asarray(x, dtype=float)
    effect = np.asarray(effect, dtype=float)
    ok = np.isfinite(effect)
    Z = np.column_stack([np.ones(x.size), np.minimum(x - knee, 0), np.maximum(x - knee, 0)])
    coef = np.linalg.lstsq(Z[ok], effect[ok], rcond=None)[0]
    fitted = Z @ coef
    resid = effect[ok] - fitted[ok]
    return {"level": float(coef[0]), "slope_below": float(coef[1]), "slope_above": float(coef[2]),
            "fitted": fitted, "rss": float(resid @ resid)}


def bin_coefficients(panel: PanelDataset, method: str = "ols_linear", knee: float | None = None,
                     **options) -> tuple[pd.DataFrame, dict]:
    """Average derivative along each single bin, with sd, plus the piecewise-linear fit.

    Bins that are identically zero in the data, or whose column was dropped as
    collinear, are reported as missing and left out of the fit. Effects are
    plug-in averages (OLS methods use their exact score, so the same value).
    """
    schema = panel.schema
    if schema is None or schema.name != YEARLY_FLEXIBLE:
        raise ConfigError("bin coefficients need a yearly_flexible panel")
    knee = schema.threshold if knee is None else knee
    config = EstimateConfig(method, **options)
    cf = crossfit(panel, config)
    names = schema.covariate_names
    dropped = set(cf.learners[0].diagnostics.get("dropped", [])) if config.learner.startswith("ols") else set()
    rows = []
    for b in range(N_BINS):
        name = names[b]
        col = panel.X[:, b]
        if not np.any(col != 0) or name in dropped:
            rows.append({"bin_lo": b, "effect": np.nan, "sd": np.nan, "status": "missing"})
            continue
        est = debiased_score(cf, Direction.unit(names, name), debias=False)
        rows.append({"bin_lo": b, "effect": est.theta, "sd": est.se, "status": "ok"})
    table = pd.DataFrame(rows)
    fit = piecewise_fit(table["bin_lo"], table["effect"], knee)
    table["fit"] = fit.pop("fitted")
    return table, fit
