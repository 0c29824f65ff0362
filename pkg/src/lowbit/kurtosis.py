"""Per-token kurtosis estimator and its training-loss term.

The estimator is the sum form

    kurt(x) = sum_i (x_i - mu)^4 / (sigma^4 + eps)

with mu the empirical mean and sigma the population standard deviation, so
it equals n times the classical kurtosis (3n for Gaussian data).  The loss
term multiplies the sum of the per-token (row-wise) estimates over the
regularized layer outputs by a strength lambda and is added to the
cross-entropy objective; penalizing it discourages heavy-tailed outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

DEFAULT_EPSILON = 1e-6
DEFAULT_LAMBDA = 1e-5


@dataclass(frozen=True)
class KurtosisConfig:
    lam: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    sites: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("kurtosis lambda must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("kurtosis epsilon must be > 0")
        object.__setattr__(self, "sites", frozenset(self.sites))


def kurtosis(x: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> float:
    """Sum-form kurtosis of a 1-D vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x - x.mean()
    var = (d * d).mean()
    return float((d ** 4).sum() / (var * var + epsilon))


def _row_kurtosis_forward(x64: np.ndarray, epsilon: float):
    """Per-row sum-form kurtosis and the intermediates its gradient needs."""
    n = x64.shape[1]
    d = x64 - x64.mean(axis=1, keepdims=True)
    d2 = d * d
    var = d2.mean(axis=1, keepdims=True)
    den = var * var + epsilon
    s4 = (d2 * d2).sum(axis=1, keepdims=True)
    k = s4 / den
    return k, d, d2, var, den, s4, n


def _row_kurtosis_grad(d, d2, var, den, s4, n):
    """d kurt(row)/d x for every row.

    With d = x - mu: dS4/dx_j = 4 d_j^3 - (4/n) sum_i d_i^3 and
    d(sigma^4)/dx_j = (4 var / n) d_j.
    """
    d3 = d2 * d
    ds4 = 4.0 * d3 - (4.0 / n) * d3.sum(axis=1, keepdims=True)
    dden = (4.0 * var / n) * d
    return (ds4 * den - s4 * dden) / (den * den)


def kurtosis_rows_sum(x: "T.Tensor", epsilon: float = DEFAULT_EPSILON) -> "T.Tensor":
    """Autodiff node: sum over rows of the row-wise kurtosis of a 2-D tensor."""
    x64 = x.data.astype(np.float64, copy=False)
    k, d, d2, var, den, s4, n = _row_kurtosis_forward(x64, epsilon)
    out = k.sum()

    def bwd(g):
        return (_row_kurtosis_grad(d, d2, var, den, s4, n) * float(g),)

    return T._make(out, (x,), bwd)


def kurtosis_loss(site_outputs: dict[str, "T.Tensor"],
                  cfg: KurtosisConfig) -> "T.Tensor":
    """lambda * sum over configured sites of the per-token kurtosis sums.

    With lambda == 0 this is an exact zero with no graph attached.
    """
    unknown = cfg.sites - set(site_outputs)
    if unknown:
        raise ConfigError(f"unknown kurtosis site(s): {sorted(unknown)}")
    if cfg.lam == 0.0:
        return T.Tensor(0.0)
    total = None
    for name in sorted(cfg.sites):
        term = kurtosis_rows_sum(site_outputs[name], cfg.epsilon)
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(0.0)
    return T.scale(total, cfg.lam)
