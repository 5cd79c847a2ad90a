"""One-hidden-layer network with batch normalization and CELU, trained on within-transformed data.

Architecture: standardized inputs -> dense(width) -> batch norm -> CELU(1) -> linear.
The loss demeans the network output per unit, so the output bias is
unidentified and stays at its initial value. Year effects are trained jointly
as a linear offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dictionary import Direction
from .errors import ConfigError, TrainingError
from .learners import Design, retune_year_effects, weighted_mse
from .panel import within_transform

WIDTH_GRID = (2, 4, 8, 16, 32, 64, 128, 256)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def celu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def celu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class NNetLearner:
    x_mean: np.ndarray
    x_sd: np.ndarray
    W: np.ndarray  # (k, width)
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    v: np.ndarray
    c: float
    delta: np.ndarray
    hyper: int | None = None
    diagnostics: dict = field(default_factory=dict)
    kind: str = "nnet"

    @property
    def width(self) -> int:
        return self.W.shape[1]

    def _hidden(self, X):
        xs = (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mean) / self.x_sd
        a = xs @ self.W + self.b
        inv = 1.0 / np.sqrt(self.running_var + BN_EPS)
        z = self.gamma * (a - self.running_mean) * inv + self.beta
        return z, inv

    def predict(self, X) -> np.ndarray:
        z, _ = self._hidden(X)
        return celu(z) @ self.v + self.c

    def input_gradient(self, X) -> np.ndarray:
        """Exact gradient of ``predict`` with respect to each raw covariate."""
        z, inv = self._hidden(X)
        return ((self.v * celu_grad(z) * self.gamma * inv) @ self.W.T) / self.x_sd

    def directional(self, X, direction: Direction) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sum(self.input_gradient(X) * direction.weights(X), axis=1)

    def within_prediction(self, design: Design) -> np.ndarray:
        return within_transform(self.predict(design.X), design.unit)

    def evaluate(self, design: Design, retune: bool = True):
        """Residual and MSE with the frozen network as an offset and year effects re-fit."""
        r0 = design.y - self.within_prediction(design)
        delta = retune_year_effects(r0, design.D, design.w) if retune else self.delta
        r = r0 - design.D @ delta if design.D.shape[1] else r0
        return r, weighted_mse(r, design.w)

    _ARRAYS = ("x_mean", "x_sd", "W", "b", "gamma", "beta", "running_mean", "running_var", "v", "delta")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in self._ARRAYS}
        out.update(kind=self.kind, c=self.c, hyper=self.hyper, diagnostics=self.diagnostics)
        return out

    @classmethod
    def from_dict(cls, data) -> NNetLearner:
        if isinstance(data, str):
            data = json.loads(data)
        arrays = {k: np.array(data[k], dtype=float) for k in cls._ARRAYS}
        return cls(**arrays, c=float(data["c"]), hyper=data["hyper"],
                   diagnostics=data.get("diagnostics", {}), kind=data.get("kind", "nnet"))


def _init(rng, k, width):
    bound_in = 1.0 / np.sqrt(k)
    bound_out = 1.0 / np.sqrt(width)
    return {
        "W": rng.uniform(-bound_in, bound_in, (k, width)),
        "b": rng.uniform(-bound_in, bound_in, width),
        "gamma": np.ones(width),
        "beta": np.zeros(width),
        "v": rng.uniform(-bound_out, bound_out, width),
    }


def loss_and_grads(params, xs, y, D, unit, wn):
    """Training-mode (batch statistics) loss and its exact parameter gradients."""
    W, gam, bet, v, delta = params["W"], params["gamma"], params["beta"], params["v"], params["delta"]
    a = xs @ W + params["b"]
    mu = a.mean(axis=0)
    var = a.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    ahat = (a - mu) * inv
    z = gam * ahat + bet
    h = celu(z)
    r = y - within_transform(h @ v, unit) - D @ delta
    loss = float(np.sum(wn * r * r))
    g_r = -2.0 * wn * r
    g_f = within_transform(g_r, unit)
    grads = {"v": h.T @ g_f, "delta": D.T @ g_r}
    dz = (g_f[:, None] * v) * celu_grad(z)
    grads["gamma"] = np.sum(dz * ahat, axis=0)
    grads["beta"] = dz.sum(axis=0)
    dahat = dz * gam
    da = inv * (dahat - dahat.mean(axis=0) - ahat * np.mean(dahat * ahat, axis=0))
    grads["W"] = xs.T @ da
    grads["b"] = da.sum(axis=0)
    return loss, grads, mu, var


def fit_nnet(design: Design, width: int, seed=0, epochs: int = 1000, lr: float = 0.01,
             betas=(0.9, 0.999), eps: float = 1e-8) -> NNetLearner:
    """Full-batch Adam on the weighted within-unit squared error.

    Inputs are standardized with this design's statistics. After training the
    batch-norm layer uses its running statistics, making the network a fixed
    smooth map. Raises TrainingError on a non-finite loss.
    """
    if width < 1:
        raise ConfigError(f"network width must be positive, got {width}")
    rng = np.random.default_rng(seed)
    X = np.asarray(design.X, dtype=float)
    n, k = X.shape
    x_mean = X.mean(axis=0)
    x_sd = X.std(axis=0)
    x_sd = np.where(x_sd > 0, x_sd, 1.0)
    xs = (X - x_mean) / x_sd
    y, D, unit = design.y, design.D, design.unit
    wn = design.w / design.w.sum()
    c = float(rng.uniform(-1 / np.sqrt(width), 1 / np.sqrt(width)))
    params = _init(rng, k, width)
    params["delta"] = np.zeros(D.shape[1])
    m = {key: np.zeros_like(val) for key, val in params.items()}
    s = {key: np.zeros_like(val) for key, val in params.items()}
    running_mean = np.zeros(width)
    running_var = np.ones(width)
    b1, b2 = betas
    loss = np.nan
    for epoch in range(1, epochs + 1):
        loss, grads, mu, var = loss_and_grads(params, xs, y, D, unit, wn)
        if not np.isfinite(loss):
            raise TrainingError("non-finite training loss", seed=seed, epoch=epoch)
        running_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu
        running_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var * n / max(n - 1, 1)
        for key, g in grads.items():
            m[key] = b1 * m[key] + (1 - b1) * g
            s[key] = b2 * s[key] + (1 - b2) * g * g
            mhat = m[key] / (1 - b1 ** epoch)
            shat = s[key] / (1 - b2 ** epoch)
            params[key] = params[key] - lr * mhat / (np.sqrt(shat) + eps)
    return NNetLearner(x_mean, x_sd, params["W"], params["b"], params["gamma"], params["beta"],
                       running_mean, running_var, params["v"], c, params["delta"], width,
                       {"final_loss": loss, "epochs": epochs, "seed": repr(seed)})
