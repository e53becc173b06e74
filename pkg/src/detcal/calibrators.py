"""The five calibration map families under a common fit/apply interface.

Parametric maps produce a calibrated confidence by passing a log-likelihood
ratio through the logistic function:

* independent logistic: a linear ratio ``s.w + c`` over the logit-encoded
  input (Platt scaling extended to box features), K+1 parameters;
* independent beta: ``c + sum_k a_k log(s_k) - b_k log(1 - s_k)`` with the
  confidence-dimension parameters kept positive for monotony, 2K+1
  parameters;
* dependent logistic: the ratio of two multivariate normal densities, with
  each inverse covariance parameterized as ``W W^T`` to stay symmetric
  positive semidefinite, 2(K^2+K)+1 parameters;
* dependent beta: the ratio of two Libby-Novick generalized beta densities
  over the odds-transformed inputs, 4(K+1)+1 parameters.

Multidimensional histogram binning instead stores the observed precision of
every joint (confidence x box) cell and assigns it directly, falling back to
coarser marginal tables for cells unseen in training.

All parametric fits minimize the mean binary negative log-likelihood with a
tiny L2 ridge, using exponential reparameterization for positivity
constraints, and are deterministic for a fixed configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    DataError,
    DegenerateDataError,
    UnsupportedOperationError,
    UsageError,
    ValidationError,
)
from .features import DEFAULT_CLIP, FeatureSet, build_feature_matrix, labels, raw_values
from .matching import MatchedSample
from .metrics import bin_indices
from .optimizer import OptimizerConfig, minimize

METHODS = ("hist_binning", "logistic_indep", "logistic_dep", "beta_indep", "beta_dep")
PARAMETRIC_METHODS = ("logistic_indep", "logistic_dep", "beta_indep", "beta_dep")

POSITIVITY_FLOOR = 1e-8
# Large enough to keep every family's optimum at reachable parameter values,
# small enough to move any D-ECE by well under its measurement resolution.
DEFAULT_RIDGE = 1e-5
SCHEMA_VERSION = 1
# Calibration-side bins per dimension for histogram binning, keyed by K.
DEFAULT_CALIBRATION_BINS = {1: 15, 3: 5, 5: 3}


def _ro(a, dtype=np.float64) -> np.ndarray:
    """Copy into a read-only array so frozen parameter blocks stay immutable."""
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LogisticIndepParams:
    """Weights and bias of the linear log-likelihood ratio."""

    w: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "w", _ro(self.w))
        object.__setattr__(self, "c", float(self.c))
        if self.w.ndim != 1 or self.w.size == 0:
            raise ValidationError("w must be a nonempty vector")

    @property
    def k(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class BetaIndepParams:
    """Per-dimension beta log terms; a[0], b[0] > 0 keeps the map monotone in confidence."""

    a: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "a", _ro(self.a))
        object.__setattr__(self, "b", _ro(self.b))
        object.__setattr__(self, "c", float(self.c))
        if self.a.shape != self.b.shape or self.a.ndim != 1 or self.a.size == 0:
            raise ValidationError("a and b must be vectors of equal nonzero length")
        if not (self.a[0] > 0.0 and self.b[0] > 0.0):
            raise ValidationError("confidence-dimension parameters a[0], b[0] must be > 0")

    @property
    def k(self) -> int:
        return self.a.size


@dataclass(frozen=True)
class LogisticDepParams:
    """Class-conditional normal parameters; vinv stores W with inverse covariance W W^T."""

    mu_pos: np.ndarray
    mu_neg: np.ndarray
    vinv_pos: np.ndarray
    vinv_neg: np.ndarray
    c: float

    def __post_init__(self):
        for name in ("mu_pos", "mu_neg", "vinv_pos", "vinv_neg"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        object.__setattr__(self, "c", float(self.c))
        k = self.mu_pos.size
        if self.mu_pos.shape != (k,) or self.mu_neg.shape != (k,):
            raise ValidationError("mean vectors must share one dimension K")
        if self.vinv_pos.shape != (k, k) or self.vinv_neg.shape != (k, k):
            raise ValidationError("vinv matrices must be K x K")

    @property
    def k(self) -> int:
        return self.mu_pos.size


@dataclass(frozen=True)
class BetaDepParams:
    """Generalized-beta shape parameters, index 0 is the shared normalization dimension."""

    alpha_pos: np.ndarray
    beta_pos: np.ndarray
    alpha_neg: np.ndarray
    beta_neg: np.ndarray
    c: float

    def __post_init__(self):
        for name in ("alpha_pos", "beta_pos", "alpha_neg", "beta_neg"):
            arr = _ro(getattr(self, name))
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.size < 2:
                raise ValidationError(f"{name} must be a vector of length K+1 >= 2")
            if not np.all(arr > 0.0):
                raise ValidationError(f"{name} entries must be > 0")
        object.__setattr__(self, "c", float(self.c))
        sizes = {self.alpha_pos.size, self.beta_pos.size, self.alpha_neg.size, self.beta_neg.size}
        if len(sizes) != 1:
            raise ValidationError("all shape-parameter vectors must have equal length K+1")

    @property
    def k(self) -> int:
        return self.alpha_pos.size - 1

    def lambdas(self, positive: bool) -> np.ndarray:
        """Derived scale ratios beta_k / beta_0 for the chosen class."""
        beta = self.beta_pos if positive else self.beta_neg
        return beta[1:] / beta[0]


@dataclass(frozen=True)
class HistBinningParams:
    """Joint precision lookup table plus its marginal fallback chain.

    ``tables[j]`` covers the first ``j + 1`` feature dimensions; empty cells
    hold NaN. ``tables[-1]`` is the full joint table. The chain ends at the
    global training precision.
    """

    bin_counts: tuple[int, ...]
    tables: tuple[np.ndarray, ...]
    global_precision: float

    def __post_init__(self):
        counts = tuple(int(c) for c in self.bin_counts)
        object.__setattr__(self, "bin_counts", counts)
        if any(c < 1 for c in counts):
            raise ValidationError(f"bin counts must be >= 1, got {counts}")
        tables = tuple(_ro(t) for t in self.tables)
        object.__setattr__(self, "tables", tables)
        if len(tables) != len(counts):
            raise ValidationError("need one fallback table per dimension")
        for j, table in enumerate(tables):
            if table.shape != counts[: j + 1]:
                raise ValidationError(
                    f"table {j} has shape {table.shape}, expected {counts[: j + 1]}"
                )
            finite = table[np.isfinite(table)]
            if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
                raise ValidationError("stored precisions must lie in [0, 1]")
        gp = float(self.global_precision)
        if not 0.0 <= gp <= 1.0:
            raise ValidationError(f"global precision must lie in [0, 1], got {gp}")
        object.__setattr__(self, "global_precision", gp)

    @property
    def k(self) -> int:
        return len(self.bin_counts)

    @property
    def total_bins(self) -> int:
        return int(np.prod(self.bin_counts))


_PARAM_TYPES = {
    "logistic_indep": LogisticIndepParams,
    "beta_indep": BetaIndepParams,
    "logistic_dep": LogisticDepParams,
    "beta_dep": BetaDepParams,
    "hist_binning": HistBinningParams,
}


@dataclass(frozen=True)
class FitMetadata:
    """Bookkeeping captured at fit time; serialized with the model."""

    n_samples: int
    final_nll: float | None
    n_iterations: int
    converged: bool


@dataclass(frozen=True)
class CalibrationModel:
    """A fitted calibration map with its feature set and parameter block."""

    method: str
    feature_set: FeatureSet
    params: object
    category_id: int | None = None
    fit_metadata: FitMetadata = FitMetadata(0, None, 0, True)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown calibration method {self.method!r}")
        expected = _PARAM_TYPES[self.method]
        if not isinstance(self.params, expected):
            raise ValidationError(
                f"method {self.method!r} expects {expected.__name__}, "
                f"got {type(self.params).__name__}"
            )
        if self.params.k != self.feature_set.k:
            raise ValidationError(
                f"parameter block has K={self.params.k} but the feature set "
                f"has K={self.feature_set.k}"
            )
        expected_enc = expected_encoding(self.method)
        if self.feature_set.confidence_encoding != expected_enc:
            raise ValidationError(
                f"method {self.method!r} consumes {expected_enc}-encoded confidence, "
                f"got {self.feature_set.confidence_encoding!r}"
            )

    @property
    def n_params(self) -> int:
        """Number of fitted parameters (table size for histogram binning)."""
        k = self.feature_set.k
        if self.method == "logistic_indep":
            return k + 1
        if self.method == "beta_indep":
            return 2 * k + 1
        if self.method == "logistic_dep":
            return 2 * (k * k + k) + 1
        if self.method == "beta_dep":
            return 4 * (k + 1) + 1
        return self.params.total_bins


def expected_encoding(method: str) -> str:
    """Confidence encoding each method consumes: logit for the logistic family."""
    if method not in METHODS:
        raise UsageError(f"unknown calibration method {method!r}")
    return "logit" if method.startswith("logistic") else "probability"


def _normalize_feature_set(method: str, fs: FeatureSet | Sequence[str]) -> FeatureSet:
    members = fs.members if isinstance(fs, FeatureSet) else tuple(fs)
    return FeatureSet(members=members, confidence_encoding=expected_encoding(method))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Log-likelihood ratios


def _llr_logistic_indep(p: LogisticIndepParams, x: np.ndarray) -> np.ndarray:
    return x @ p.w + p.c


def _llr_beta_indep(p: BetaIndepParams, x: np.ndarray) -> np.ndarray:
    return np.log(x) @ p.a + np.log1p(-x) @ (-p.b) + p.c


def _llr_logistic_dep(p: LogisticDepParams, x: np.ndarray) -> np.ndarray:
    y_pos = (x - p.mu_pos) @ p.vinv_pos
    y_neg = (x - p.mu_neg) @ p.vinv_neg
    return 0.5 * ((y_neg * y_neg).sum(axis=1) - (y_pos * y_pos).sum(axis=1)) + p.c


def _llr_beta_dep(p: BetaDepParams, x: np.ndarray) -> np.ndarray:
    s_star = x / (1.0 - x)
    log_s_star = np.log(s_star)
    lam_pos, lam_neg = p.lambdas(True), p.lambdas(False)
    t_pos = s_star @ lam_pos
    t_neg = s_star @ lam_neg
    a_pos, a_neg = p.alpha_pos[1:], p.alpha_neg[1:]
    const = float(a_pos @ np.log(lam_pos) - a_neg @ np.log(lam_neg))
    return (
        p.c
        + const
        + log_s_star @ (a_pos - a_neg)
        + p.alpha_neg.sum() * np.log1p(t_neg)
        - p.alpha_pos.sum() * np.log1p(t_pos)
    )


_LLR = {
    "logistic_indep": _llr_logistic_indep,
    "beta_indep": _llr_beta_indep,
    "logistic_dep": _llr_logistic_dep,
    "beta_dep": _llr_beta_dep,
}


def loglik_ratio(model: CalibrationModel, s: np.ndarray) -> float | np.ndarray:
    """Log-likelihood ratio of one feature vector (or a (n, K) batch).

    The input must be built with the model's feature set and encoding.
    Histogram binning has no likelihood-ratio form and raises
    :class:`UnsupportedOperationError`.
    """
    if model.method == "hist_binning":
        raise UnsupportedOperationError("histogram binning defines no log-likelihood ratio")
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    x = s[None, :] if single else s
    if x.ndim != 2 or x.shape[1] != model.feature_set.k:
        raise UsageError(
            f"feature input of shape {s.shape} does not match K={model.feature_set.k}"
        )
    z = _LLR[model.method](model.params, x)
    return float(z[0]) if single else z


def calibrate_matrix(model: CalibrationModel, x: np.ndarray) -> np.ndarray:
    """Calibrated scores for a prebuilt feature matrix in the model's encoding."""
    if model.method == "hist_binning":
        return _hist_lookup(model.params, x)
    return sigmoid(_LLR[model.method](model.params, np.asarray(x, dtype=np.float64)))


def apply(model: CalibrationModel, samples: Sequence[MatchedSample], eps: float = DEFAULT_CLIP) -> np.ndarray:
    """Calibrated score for every sample, in input order."""
    if model.method == "hist_binning":
        x = raw_values(samples, model.feature_set.members)
    else:
        x = build_feature_matrix(samples, model.feature_set, eps)
    return calibrate_matrix(model, x)


# ---------------------------------------------------------------------------
# Histogram binning


def _hist_lookup(params: HistBinningParams, values: np.ndarray) -> np.ndarray:
    """Per-sample precision lookup with the marginal fallback chain."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != params.k:
        raise UsageError(f"value matrix of shape {values.shape} does not match K={params.k}")
    idx = np.empty(values.shape, dtype=np.int64)
    for k, n_k in enumerate(params.bin_counts):
        idx[:, k] = bin_indices(values[:, k], n_k)
    out = params.tables[-1][tuple(idx.T)]
    for j in range(params.k - 2, -1, -1):
        missing = np.isnan(out)
        if not missing.any():
            break
        out = np.where(missing, params.tables[j][tuple(idx[:, : j + 1].T)], out)
    out = np.where(np.isnan(out), params.global_precision, out)
    # Unreachable guard: a fitted model always has a global precision, but a
    # NaN from a hand-built table falls back to the raw confidence.
    return np.where(np.isnan(out), values[:, 0], out)


def fit_hist_binning(
    samples: Sequence[MatchedSample],
    fs: FeatureSet | Sequence[str],
    bin_counts: int | Sequence[int] | None = None,
    *,
    category_id: int | None = None,
) -> CalibrationModel:
    """Fit multidimensional histogram binning over the given feature subset.

    ``bin_counts`` may be one count broadcast over all dimensions or one per
    dimension; the default follows the evaluation protocol (15 / 5 / 3 bins
    per dimension at K = 1 / 3 / 5). Fallback tables are built by
    marginalizing dimensions right to left down to the global precision.
    """
    if not samples:
        raise DataError("cannot fit histogram binning on an empty sample list")
    fs = _normalize_feature_set("hist_binning", fs)
    k = fs.k
    if bin_counts is None:
        if k not in DEFAULT_CALIBRATION_BINS:
            raise UsageError(f"no default calibration bin count for K={k}; pass bin_counts")
        counts = (DEFAULT_CALIBRATION_BINS[k],) * k
    elif isinstance(bin_counts, int):
        counts = (bin_counts,) * k
    else:
        counts = tuple(int(c) for c in bin_counts)
        if len(counts) != k:
            raise UsageError(f"{len(counts)} bin counts given for K={k} dimensions")

    values = raw_values(samples, fs.members)
    m = labels(samples).astype(np.float64)
    idx = np.empty(values.shape, dtype=np.int64)
    for dim, n_k in enumerate(counts):
        idx[:, dim] = bin_indices(values[:, dim], n_k)

    tables = []
    for j in range(1, k + 1):
        shape = counts[:j]
        flat = np.ravel_multi_index(tuple(idx[:, :j].T), shape) if j > 1 else idx[:, 0]
        size = int(np.prod(shape))
        occ = np.bincount(flat, minlength=size).astype(np.float64)
        m_sum = np.bincount(flat, weights=m, minlength=size)
        with np.errstate(invalid="ignore"):
            table = np.where(occ > 0, m_sum / np.where(occ > 0, occ, 1.0), np.nan)
        tables.append(table.reshape(shape))

    params = HistBinningParams(
        bin_counts=counts, tables=tuple(tables), global_precision=float(m.mean())
    )
    return CalibrationModel(
        method="hist_binning",
        feature_set=fs,
        params=params,
        category_id=category_id,
        fit_metadata=FitMetadata(len(samples), None, 0, True),
    )


# ---------------------------------------------------------------------------
# Parametric objectives: mean binary NLL over unconstrained parameters


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def theta_size(method: str, k: int) -> int:
    return {
        "logistic_indep": k + 1,
        "beta_indep": 2 * k + 1,
        "logistic_dep": 2 * (k * k + k) + 1,
        "beta_dep": 4 * (k + 1) + 1,
    }[method]


def pack_params(method: str, params) -> np.ndarray:
    """Flatten a parameter block into the unconstrained optimizer vector."""
    if method == "logistic_indep":
        return np.concatenate([params.w, [params.c]])
    if method == "beta_indep":
        a, b = params.a.copy(), params.b.copy()
        a[0] = math.log(a[0] - POSITIVITY_FLOOR) if a[0] > POSITIVITY_FLOOR else -np.inf
        b[0] = math.log(b[0] - POSITIVITY_FLOOR) if b[0] > POSITIVITY_FLOOR else -np.inf
        return np.concatenate([a, b, [params.c]])
    if method == "logistic_dep":
        return np.concatenate(
            [
                params.mu_pos,
                params.mu_neg,
                params.vinv_pos.ravel(),
                params.vinv_neg.ravel(),
                [params.c],
            ]
        )
    if method == "beta_dep":
        blocks = [params.alpha_pos, params.beta_pos, params.alpha_neg, params.beta_neg]
        return np.concatenate([np.log(np.maximum(b - POSITIVITY_FLOOR, 1e-300)) for b in blocks] + [[params.c]])
    raise UsageError(f"method {method!r} has no parametric form")


def unpack_params(method: str, theta: np.ndarray, k: int):
    """Rebuild the constrained parameter block from the optimizer vector."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != theta_size(method, k):
        raise UsageError(
            f"parameter vector of length {theta.size} does not match "
            f"{method} at K={k} ({theta_size(method, k)} expected)"
        )
    if method == "logistic_indep":
        return LogisticIndepParams(w=theta[:k], c=theta[k])
    if method == "beta_indep":
        a = theta[:k].copy()
        b = theta[k : 2 * k].copy()
        a[0] = POSITIVITY_FLOOR + math.exp(a[0])
        b[0] = POSITIVITY_FLOOR + math.exp(b[0])
        return BetaIndepParams(a=a, b=b, c=theta[2 * k])
    if method == "logistic_dep":
        mu_pos, mu_neg = theta[:k], theta[k : 2 * k]
        off = 2 * k
        vinv_pos = theta[off : off + k * k].reshape(k, k)
        vinv_neg = theta[off + k * k : off + 2 * k * k].reshape(k, k)
        return LogisticDepParams(
            mu_pos=mu_pos, mu_neg=mu_neg, vinv_pos=vinv_pos, vinv_neg=vinv_neg, c=theta[-1]
        )
    if method == "beta_dep":
        d = k + 1
        blocks = [POSITIVITY_FLOOR + np.exp(theta[i * d : (i + 1) * d]) for i in range(4)]
        return BetaDepParams(
            alpha_pos=blocks[0], beta_pos=blocks[1], alpha_neg=blocks[2], beta_neg=blocks[3], c=theta[-1]
        )
    raise UsageError(f"method {method!r} has no parametric form")


def _grad_z_logistic_indep(theta, k, x, r, n):
    g = np.empty(k + 1)
    g[:k] = x.T @ r / n
    g[k] = r.sum() / n
    return g


def _grad_z_beta_indep(theta, k, x, r, n, log_x, log1m_x):
    g = np.empty(2 * k + 1)
    g[:k] = log_x.T @ r / n
    g[k : 2 * k] = -(log1m_x.T @ r) / n
    g[2 * k] = r.sum() / n
    # Chain through the exponential reparameterization of a[0], b[0].
    g[0] *= math.exp(theta[0])
    g[k] *= math.exp(theta[k])
    return g


def _grad_z_logistic_dep(theta, k, x, r, n):
    mu_pos, mu_neg = theta[:k], theta[k : 2 * k]
    off = 2 * k
    w_pos = theta[off : off + k * k].reshape(k, k)
    w_neg = theta[off + k * k : off + 2 * k * k].reshape(k, k)
    d_pos, d_neg = x - mu_pos, x - mu_neg
    y_pos, y_neg = d_pos @ w_pos, d_neg @ w_neg
    g = np.empty(theta.size)
    g[:k] = w_pos @ (y_pos.T @ r) / n
    g[k : 2 * k] = -(w_neg @ (y_neg.T @ r)) / n
    g[off : off + k * k] = (-(d_pos.T @ (r[:, None] * y_pos)) / n).ravel()
    g[off + k * k : off + 2 * k * k] = ((d_neg.T @ (r[:, None] * y_neg)) / n).ravel()
    g[-1] = r.sum() / n
    return g, y_pos, y_neg


def _grad_z_beta_dep(theta, k, r, n, s_star, log_s_star):
    d = k + 1
    alpha_pos = POSITIVITY_FLOOR + np.exp(theta[:d])
    beta_pos = POSITIVITY_FLOOR + np.exp(theta[d : 2 * d])
    alpha_neg = POSITIVITY_FLOOR + np.exp(theta[2 * d : 3 * d])
    beta_neg = POSITIVITY_FLOOR + np.exp(theta[3 * d : 4 * d])
    r_sum = r.sum()

    def class_grads(alpha, beta, sign):
        lam = beta[1:] / beta[0]
        t = s_star @ lam
        log1p_t = np.log1p(t)
        inv1p_t = 1.0 / (1.0 + t)
        a_total = alpha.sum()
        g_alpha = np.empty(d)
        g_alpha[0] = sign * -(log1p_t @ r) / n
        g_alpha[1:] = sign * (
            np.log(lam) * (r_sum / n) + (log_s_star.T @ r) / n - (log1p_t @ r) / n
        )
        g_beta = np.empty(d)
        weighted = s_star.T @ (r * inv1p_t)  # (K,)
        g_beta[1:] = sign * ((alpha[1:] / beta[1:]) * (r_sum / n) - (a_total / beta[0]) * weighted / n)
        u = t * inv1p_t
        g_beta[0] = sign * (-(alpha[1:].sum() / beta[0]) * (r_sum / n) + (a_total / beta[0]) * (u @ r) / n)
        return g_alpha, g_beta

    ga_pos, gb_pos = class_grads(alpha_pos, beta_pos, +1.0)
    ga_neg, gb_neg = class_grads(alpha_neg, beta_neg, -1.0)
    g = np.empty(theta.size)
    g[:d] = ga_pos * (alpha_pos - POSITIVITY_FLOOR)
    g[d : 2 * d] = gb_pos * (beta_pos - POSITIVITY_FLOOR)
    g[2 * d : 3 * d] = ga_neg * (alpha_neg - POSITIVITY_FLOOR)
    g[3 * d : 4 * d] = gb_neg * (beta_neg - POSITIVITY_FLOOR)
    g[-1] = r_sum / n
    return g


def nll_objective(method: str, x: np.ndarray, m: np.ndarray, ridge: float = DEFAULT_RIDGE):
    """Mean binary NLL (plus L2 ridge) and its gradient over unconstrained parameters."""
    if method not in PARAMETRIC_METHODS:
        raise UsageError(f"method {method!r} has no likelihood objective")
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    n, k = x.shape
    if method == "beta_indep":
        log_x, log1m_x = np.log(x), np.log1p(-x)
    if method == "beta_dep":
        s_star = x / (1.0 - x)
        log_s_star = np.log(s_star)

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        # Extreme line-search trial points may overflow; the resulting
        # non-finite values are rejected by the optimizer, so the warnings
        # are noise.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            params = unpack_params(method, theta, k)
            if method == "beta_dep":
                z = _llr_beta_dep(params, x)
            elif method == "beta_indep":
                z = log_x @ params.a - log1m_x @ params.b + params.c
            else:
                z = _LLR[method](params, x)
            value = float(np.mean(_softplus(z) - m * z)) + ridge * float(theta @ theta)
            r = sigmoid(z) - m
            if method == "logistic_indep":
                g = _grad_z_logistic_indep(theta, k, x, r, n)
            elif method == "beta_indep":
                g = _grad_z_beta_indep(theta, k, x, r, n, log_x, log1m_x)
            elif method == "logistic_dep":
                g, _, _ = _grad_z_logistic_dep(theta, k, x, r, n)
            else:
                g = _grad_z_beta_dep(theta, k, r, n, s_star, log_s_star)
            return value, g + 2.0 * ridge * theta

    return objective


def identity_theta(method: str, k: int) -> np.ndarray:
    """Parameter vector reproducing the identity map on the confidence dimension."""
    theta = np.zeros(theta_size(method, k))
    log_unit = math.log(1.0 - POSITIVITY_FLOOR)
    if method == "logistic_indep":
        theta[0] = 1.0
    elif method == "beta_indep":
        theta[0] = log_unit
        theta[k] = log_unit
    elif method == "logistic_dep":
        theta[0] = 0.5
        theta[k] = -0.5
        eye = np.eye(k).ravel()
        theta[2 * k : 2 * k + k * k] = eye
        theta[2 * k + k * k : 2 * k + 2 * k * k] = eye
    elif method == "beta_dep":
        d = k + 1
        alpha_pos = np.ones(d)
        alpha_pos[1] = 2.0
        alpha_neg = np.ones(d)
        alpha_neg[0] = 2.0
        theta[:d] = np.log(alpha_pos - POSITIVITY_FLOOR)
        theta[2 * d : 3 * d] = np.log(alpha_neg - POSITIVITY_FLOOR)
        theta[d : 2 * d] = log_unit
        theta[3 * d : 4 * d] = log_unit
    else:
        raise UsageError(f"method {method!r} has no parametric form")
    return theta


def _moment_theta_logistic_dep(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    k = x.shape[1]
    theta = np.zeros(theta_size("logistic_dep", k))
    pos, neg = m > 0.5, m <= 0.5
    theta[:k] = x[pos].mean(axis=0)
    theta[k : 2 * k] = x[neg].mean(axis=0)
    eye = np.eye(k).ravel()
    theta[2 * k : 2 * k + k * k] = eye
    theta[2 * k + k * k : 2 * k + 2 * k * k] = eye
    theta[-1] = math.log(pos.sum() / neg.sum())
    return theta




def fit_parametric(
    method: str,
    samples: Sequence[MatchedSample],
    fs: FeatureSet | Sequence[str],
    *,
    config: OptimizerConfig | None = None,
    ridge: float = DEFAULT_RIDGE,
    eps: float = DEFAULT_CLIP,
    category_id: int | None = None,
) -> CalibrationModel:
    """Fit one of the four parametric calibration maps by minimizing the mean NLL.

    Requires both match labels in the training data. Deterministic for a
    fixed configuration; raises :class:`ConvergenceError` when the optimizer
    budget runs out before the gradient tolerance is met.
    """
    if method not in PARAMETRIC_METHODS:
        raise UsageError(f"unknown parametric method {method!r}")
    fs = _normalize_feature_set(method, fs)
    x = build_feature_matrix(samples, fs, eps)
    m = labels(samples).astype(np.float64)
    n_pos = int(m.sum())
    if n_pos == 0 or n_pos == len(m):
        raise DegenerateDataError(
            f"parametric fitting needs both match labels; got {n_pos} positives "
            f"out of {len(m)} samples"
        )
    cfg = config or OptimizerConfig()
    objective = nll_objective(method, x, m, ridge)

    if method == "logistic_dep":
        starts = [_moment_theta_logistic_dep(x, m)]
    else:
        starts = [identity_theta(method, fs.k)]
    theta, report = minimize(objective, starts[0], cfg)

    # Guarantee the fit is no worse than the identity map: when a start other
    # than identity converged above the identity objective, refit from there.
    identity = identity_theta(method, fs.k)
    if not np.array_equal(starts[0], identity):
        identity_value, _ = objective(identity)
        if not report.converged or report.final_value > identity_value:
            theta2, report2 = minimize(objective, identity, cfg)
            better = (report2.converged and not report.converged) or (
                report2.converged == report.converged and report2.final_value < report.final_value
            )
            if better:
                theta, report = theta2, report2

    if not report.converged:
        raise ConvergenceError(
            f"{method} fit did not converge within {cfg.max_iterations} iterations "
            f"(final gradient norm {report.gradient_norm:.3e})",
            iterate=theta,
            gradient_norm=report.gradient_norm,
        )
    return CalibrationModel(
        method=method,
        feature_set=fs,
        params=unpack_params(method, theta, fs.k),
        category_id=category_id,
        fit_metadata=FitMetadata(
            n_samples=len(samples),
            final_nll=report.final_value,
            n_iterations=report.iterations,
            converged=report.converged,
        ),
    )


def fit(
    method: str,
    samples: Sequence[MatchedSample],
    fs: FeatureSet | Sequence[str],
    *,
    bin_counts: int | Sequence[int] | None = None,
    config: OptimizerConfig | None = None,
    ridge: float = DEFAULT_RIDGE,
    eps: float = DEFAULT_CLIP,
    category_id: int | None = None,
) -> CalibrationModel:
    """Dispatch to histogram binning or the parametric fitter by method name."""
    if method == "hist_binning":
        return fit_hist_binning(samples, fs, bin_counts, category_id=category_id)
    return fit_parametric(
        method, samples, fs, config=config, ridge=ridge, eps=eps, category_id=category_id
    )


def fit_per_class(
    method: str,
    samples: Sequence[MatchedSample],
    fs: FeatureSet | Sequence[str],
    **kwargs,
) -> dict[int, CalibrationModel]:
    """Fit one model per category_id present in the samples."""
    by_class: dict[int, list[MatchedSample]] = {}
    for s in samples:
        by_class.setdefault(s.detection.category_id, []).append(s)
    return {
        cid: fit(method, class_samples, fs, category_id=cid, **kwargs)
        for cid, class_samples in sorted(by_class.items())
    }


# ---------------------------------------------------------------------------
# Serialization


def _nested(table: np.ndarray):
    """NaN-free nested lists for JSON: empty cells become null."""
    if table.ndim == 1:
        return [None if math.isnan(v) else float(v) for v in table]
    return [_nested(row) for row in table]


def _unnested(data, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.asarray(data, dtype=object).reshape(-1)
    arr = np.array([np.nan if v is None else float(v) for v in flat], dtype=np.float64)
    return arr.reshape(shape)


def _params_to_json(method: str, params) -> dict:
    if method == "logistic_indep":
        return {"w": params.w.tolist(), "c": params.c}
    if method == "beta_indep":
        return {"a": params.a.tolist(), "b": params.b.tolist(), "c": params.c}
    if method == "logistic_dep":
        return {
            "mu_pos": params.mu_pos.tolist(),
            "mu_neg": params.mu_neg.tolist(),
            "vinv_pos": params.vinv_pos.tolist(),
            "vinv_neg": params.vinv_neg.tolist(),
            "c": params.c,
        }
    if method == "beta_dep":
        return {
            "alpha_pos": params.alpha_pos.tolist(),
            "beta_pos": params.beta_pos.tolist(),
            "alpha_neg": params.alpha_neg.tolist(),
            "beta_neg": params.beta_neg.tolist(),
            "c": params.c,
        }
    return {
        "bin_counts": list(params.bin_counts),
        "tables": [_nested(t) for t in params.tables],
        "global_precision": params.global_precision,
    }


def _params_from_json(method: str, data: dict):
    try:
        if method == "logistic_indep":
            return LogisticIndepParams(w=data["w"], c=data["c"])
        if method == "beta_indep":
            return BetaIndepParams(a=data["a"], b=data["b"], c=data["c"])
        if method == "logistic_dep":
            return LogisticDepParams(
                mu_pos=data["mu_pos"],
                mu_neg=data["mu_neg"],
                vinv_pos=data["vinv_pos"],
                vinv_neg=data["vinv_neg"],
                c=data["c"],
            )
        if method == "beta_dep":
            return BetaDepParams(
                alpha_pos=data["alpha_pos"],
                beta_pos=data["beta_pos"],
                alpha_neg=data["alpha_neg"],
                beta_neg=data["beta_neg"],
                c=data["c"],
            )
        counts = tuple(int(c) for c in data["bin_counts"])
        tables = tuple(
            _unnested(t, counts[: j + 1]) for j, t in enumerate(data["tables"])
        )
        return HistBinningParams(
            bin_counts=counts, tables=tables, global_precision=data["global_precision"]
        )
    except KeyError as exc:
        raise ValidationError(f"model parameter block missing field {exc}") from exc


def model_to_json(model: CalibrationModel) -> dict:
    meta = model.fit_metadata
    return {
        "schema_version": SCHEMA_VERSION,
        "method": model.method,
        "feature_set": {
            "members": list(model.feature_set.members),
            "confidence_encoding": model.feature_set.confidence_encoding,
        },
        "category_id": model.category_id,
        "params": _params_to_json(model.method, model.params),
        "fit_metadata": {
            "n_samples": meta.n_samples,
            "final_nll": meta.final_nll,
            "n_iterations": meta.n_iterations,
            "converged": meta.converged,
        },
    }


def model_from_json(data: dict) -> CalibrationModel:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported model schema version {version!r} (expected {SCHEMA_VERSION})"
        )
    method = data.get("method")
    if method not in METHODS:
        raise ValidationError(f"unknown calibration method {method!r}")
    try:
        fs = FeatureSet(
            members=tuple(data["feature_set"]["members"]),
            confidence_encoding=data["feature_set"]["confidence_encoding"],
        )
        meta_data = data["fit_metadata"]
        meta = FitMetadata(
            n_samples=int(meta_data["n_samples"]),
            final_nll=meta_data["final_nll"],
            n_iterations=int(meta_data["n_iterations"]),
            converged=bool(meta_data["converged"]),
        )
        params = _params_from_json(method, data["params"])
        category = data["category_id"]
    except KeyError as exc:
        raise ValidationError(f"model file missing field {exc}") from exc
    return CalibrationModel(
        method=method,
        feature_set=fs,
        params=params,
        category_id=None if category is None else int(category),
        fit_metadata=meta,
    )


def save_model(model: CalibrationModel, path: str | Path) -> None:
    """Write the model as JSON; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_model(path: str | Path) -> CalibrationModel:
    """Read a model written by :func:`save_model`, validating its schema."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}: malformed model JSON: {exc.msg}") from exc
    return model_from_json(data)
