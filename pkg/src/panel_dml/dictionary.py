"""Polynomial-and-interaction basis b(X), its standardization and directional gradient."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .weather import YEARLY_LINEAR, Covariate, VariableSetSchema

Term = tuple  # ((covariate index, power), ...)


def _covariates(source) -> tuple[Covariate, ...]:
    if isinstance(source, VariableSetSchema):
        return source.covariates
    return tuple(c if isinstance(c, Covariate) else Covariate(str(c), "heat") for c in source)


def build_terms(source, degree: int) -> BasisDictionary:
    """Pure powers 1..degree of every covariate, then heat^p * prec^q within a period.

    Ordering is pure powers by covariate then power, then interactions by
    (period, heat covariate, p, q).
    """
    if degree not in (2, 3):
        raise ConfigError(f"polynomial degree must be 2 or 3, got {degree}")
    covs = _covariates(source)
    terms = [((i, e),) for i in range(len(covs)) for e in range(1, degree + 1)]
    periods = []
    for c in covs:
        if c.period not in periods:
            periods.append(c.period)
    for per in periods:
        heat = [i for i, c in enumerate(covs) if c.kind == "heat" and c.period == per]
        prec = [i for i, c in enumerate(covs) if c.kind == "prec" and c.period == per]
        for h in heat:
            for p in range(1, degree + 1):
                for r in prec:
                    for q in range(1, degree + 1):
                        terms.append(((h, p), (r, q)))
    return BasisDictionary(tuple(c.name for c in covs), tuple(terms), degree)


def identity_dictionary(source) -> BasisDictionary:
    """b(X) = X on the raw scale."""
    covs = _covariates(source)
    return BasisDictionary(tuple(c.name for c in covs), tuple(((i, 1),) for i in range(len(covs))),
                           1, standardize=False)


@dataclass(frozen=True)
class BasisDictionary:
    names: tuple[str, ...]
    terms: tuple[Term, ...]
    degree: int
    standardize: bool = True
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    dropped: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def fitted(self) -> bool:
        return self.sd is not None

    def label(self, term: Term) -> str:
        return "*".join(self.names[i] if e == 1 else f"{self.names[i]}^{e}" for i, e in term)

    @property
    def labels(self) -> list[str]:
        return [self.label(t) for t in self.terms]

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.names):
            raise DataError(f"expected {len(self.names)} covariates, got {X.shape[1]}")
        if np.isnan(X).any():
            row = int(np.flatnonzero(np.isnan(X).any(axis=1))[0])
            raise DataError(f"cannot expand row {row}: contains NaN")
        return X

    def raw(self, X) -> np.ndarray:
        X = self._check(X)
        powers = {}

        def pw(i, e):
            if (i, e) not in powers:
                powers[i, e] = X[:, i] ** e
            return powers[i, e]

        out = np.empty((X.shape[0], self.p))
        for j, term in enumerate(self.terms):
            v = pw(*term[0])
            for f in term[1:]:
                v = v * pw(*f)
            out[:, j] = v
        return out

    def raw_gradient(self, X, D) -> np.ndarray:
        """Unscaled directional derivative of each term; ``D`` holds per-row direction weights."""
        X = self._check(X)
        D = np.broadcast_to(np.asarray(D, dtype=float), X.shape)
        out = np.zeros((X.shape[0], self.p))
        for j, term in enumerate(self.terms):
            for a, (i, e) in enumerate(term):
                g = D[:, i] * (e * X[:, i] ** (e - 1) if e > 1 else 1.0)
                for b, (k, f) in enumerate(term):
                    if b != a:
                        g = g * X[:, k] ** f
                out[:, j] += g
        return out

    def fit(self, X, tol: float = 1e-12) -> BasisDictionary:
        """Fit per-term mean/sd on training rows and drop zero-variance terms."""
        R = self.raw(X)
        if not self.standardize:
            return replace(self, mean=np.zeros(self.p), sd=np.ones(self.p))
        mean = R.mean(axis=0)
        sd = R.std(axis=0)
        keep = sd > tol * np.maximum(1.0, np.abs(mean))
        dropped = tuple(self.label(t) for t, k in zip(self.terms, keep) if not k)
        return replace(self, terms=tuple(t for t, k in zip(self.terms, keep) if k),
                       mean=mean[keep], sd=sd[keep], dropped=self.dropped + dropped)

    def _require_fit(self):
        if not self.fitted:
            raise ConfigError("dictionary scale has not been fitted")

    def scale(self, R) -> np.ndarray:
        self._require_fit()
        return (R - self.mean) / self.sd

    def expand(self, X) -> np.ndarray:
        return self.scale(self.raw(X))

    def gradient(self, X, D) -> np.ndarray:
        self._require_fit()
        return self.raw_gradient(X, D) / self.sd

    def manifest(self) -> dict:
        return {
            "names": list(self.names),
            "degree": self.degree,
            "standardize": self.standardize,
            "terms": [[list(f) for f in t] for t in self.terms],
            "labels": self.labels,
            "mean": None if self.mean is None else [float(v) for v in self.mean],
            "sd": None if self.sd is None else [float(v) for v in self.sd],
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_manifest(cls, data) -> BasisDictionary:
        if isinstance(data, str):
            data = json.loads(data)
        return cls(tuple(data["names"]), tuple(tuple(tuple(f) for f in t) for t in data["terms"]),
                   int(data["degree"]), bool(data["standardize"]),
                   None if data["mean"] is None else np.array(data["mean"], dtype=float),
                   None if data["sd"] is None else np.array(data["sd"], dtype=float),
                   tuple(data["dropped"]))


def dictionary_for(schema: VariableSetSchema, degree: int | None = None) -> BasisDictionary:
    return build_terms(schema, schema.default_degree if degree is None else degree)


@dataclass(frozen=True)
class Direction:
    """Per-row covariate weights of the directional derivative.

    ``convention`` is ``"unit-higher"`` or ``"fixed"`` (constant vector) or
    ``"proportional-share"``: weight ``X_c / higher`` on every heat bin at or
    above the threshold, where ``higher`` is their sum. Rows with no damaging
    exposure put all weight on the first bin at the threshold, split evenly
    across periods.
    """

    convention: str
    n_covariates: int
    vector: np.ndarray | None = None
    share_index: np.ndarray | None = None
    fallback: np.ndarray | None = None

    @classmethod
    def fixed(cls, vector, convention="fixed") -> Direction:
        v = np.asarray(vector, dtype=float)
        return cls(convention, v.size, vector=v)

    @classmethod
    def unit(cls, names, name, convention="fixed") -> Direction:
        v = np.zeros(len(names))
        v[list(names).index(name)] = 1.0
        return cls.fixed(v, convention)

    def weights(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.vector is not None:
            return np.broadcast_to(self.vector, X.shape)
        share = X[:, self.share_index]
        total = share.sum(axis=1)
        W = np.zeros_like(X)
        pos = total > 0
        W[np.ix_(pos, self.share_index)] = share[pos] / total[pos, None]
        W[~pos] = self.fallback
        return W


def direction_for(schema: VariableSetSchema) -> Direction:
    """Marginal increase of damaging heat exposure under ``schema``."""
    covs = schema.covariates
    if schema.name == YEARLY_LINEAR:
        return Direction.unit(schema.covariate_names, "higher", convention="unit-higher")
    idx = np.array([i for i, c in enumerate(covs) if c.kind == "heat" and c.bin_lo >= schema.threshold])
    first = [i for i, c in enumerate(covs) if c.kind == "heat" and c.bin_lo == schema.threshold]
    fallback = np.zeros(len(covs))
    fallback[first] = 1.0 / len(first)
    return Direction("proportional-share", len(covs), share_index=idx, fallback=fallback)
