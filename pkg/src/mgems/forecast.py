"""Auto-regressive kernel ridge regression forecasts and the demand-response load model.

A model maps ``x_n = [P_{n-N_L+1}, ..., P_n, t_n]`` to the increment
``P_{n+1} - P_n``; multi-step forecasts roll it out recursively. Solar
rollouts can be anchored to a dictionary of bell-shaped daily profiles.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la

log = logging.getLogger(__name__)

DEFAULT_LAG = 3
MSMS_FLOOR = 1e-6
# default MSMS search grid used when a kind has no fixed hyperparameters
SIGMA_GRID = tuple(np.logspace(np.log10(0.02), np.log10(5.0), 12))
LAMBDA_GRID = tuple(np.logspace(-7, -1, 7))


class ForecastError(ValueError):
    pass


def gaussian_kernel(X: np.ndarray, Y: np.ndarray, sigma: float) -> np.ndarray:
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))


@dataclass(frozen=True)
class KrrModel:
    training_inputs: np.ndarray
    dual_weights: np.ndarray
    bandwidth: float
    regularization: float
    lag: int

    def predict(self, X) -> np.ndarray:
        return gaussian_kernel(np.atleast_2d(X), self.training_inputs, self.bandwidth) @ self.dual_weights


def fit_krr(inputs, targets, sigma: float, lam: float) -> KrrModel:
    """Dual weights ``(K + lam I)^{-1} y`` of a Gaussian-kernel ridge regression."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(y) < 1 or X.shape[0] != len(y):
        raise ForecastError("need at least one sample and matching targets")
    if sigma <= 0 or lam < 0:
        raise ForecastError("sigma must be positive and lambda non-negative")
    K = gaussian_kernel(X, X, sigma)
    M = K + lam * np.eye(len(y))
    try:
        w = la.solve(M, y, assume_a="sym")
    except la.LinAlgError as exc:
        raise ForecastError("singular K + lambda I; use lambda > 0 for duplicated inputs") from exc
    if not np.all(np.isfinite(w)):
        raise ForecastError("singular K + lambda I; use lambda > 0 for duplicated inputs")
    return KrrModel(X, w, float(sigma), float(lam), X.shape[1] - 1)


def time_feature(step: int, steps_per_day: int) -> float:
    return (step % steps_per_day) / steps_per_day


def make_samples(series, lag: int, steps_per_day: int, start: int = 0):
    """Sliding-window (input, increment) pairs over a continuous series.

    ``start`` is the day-grid index of the first series element.
    """
    s = np.asarray(series, dtype=float)
    n = len(s) - lag
    if n < 1:
        raise ForecastError("series shorter than lag + 1")
    X = np.empty((n, lag + 1))
    y = np.empty(n)
    for i in range(n):
        last = i + lag - 1
        X[i, :lag] = s[i:i + lag]
        X[i, lag] = time_feature(start + last, steps_per_day)
        y[i] = s[last + 1] - s[last]
    return X, y


def predict_increment(model: KrrModel, window, t_n: float) -> float:
    w = np.asarray(window, dtype=float).ravel()
    if len(w) != model.lag:
        raise ForecastError(f"window length {len(w)} != lag {model.lag}")
    return float(model.predict(np.append(w, t_n)[None, :])[0])


@dataclass(frozen=True)
class ProfileDictionary:
    profiles: np.ndarray  # (N_dict, steps_per_day)

    def __post_init__(self):
        p = np.asarray(self.profiles, dtype=float)
        if p.ndim != 2 or len(p) == 0:
            raise ForecastError("dictionary needs at least one profile")
        if p.min() < 0 or p.max() > 1:
            raise ForecastError("dictionary values must lie in [0, 1]")

    @property
    def steps_per_day(self) -> int:
        return self.profiles.shape[1]

    def value(self, i: int, n: int) -> float:
        return float(self.profiles[i, n % self.steps_per_day])

    def nearest(self, value: float, n: int) -> int:
        col = self.profiles[:, n % self.steps_per_day]
        return int(np.argmin(np.abs(col - value)))  # argmin keeps the lowest index on ties


def bell(steps_per_day: int, center_h: float = 12.0, width_h: float = 2.5,
         sunrise_h: float = 6.0, sunset_h: float = 18.0) -> np.ndarray:
    """Bell-shaped clear-sky profile with unit peak, zero outside daylight."""
    dt = 24.0 / steps_per_day
    h = np.arange(steps_per_day) * dt
    p = np.exp(-((h - center_h) ** 2) / (2 * width_h**2))
    p[(h <= sunrise_h) | (h >= sunset_h)] = 0.0
    return p / p.max()


def bell_dictionary(steps_per_day: int, n_dict: int = 8, **kw) -> ProfileDictionary:
    base = bell(steps_per_day, **kw)
    scales = np.arange(1, n_dict + 1) / n_dict
    return ProfileDictionary(scales[:, None] * base[None, :])


def solar_forecast_step(krr_value: float, dictionary: ProfileDictionary, previous_value: float, n: int) -> float:
    """Average the KRR prediction for step n+1 with the nearest dictionary profile's value there."""
    i = dictionary.nearest(previous_value, n)
    return max(0.0, 0.5 * (krr_value + dictionary.value(i, n + 1)))


def rollout(model: KrrModel, window, step: int, n_steps: int, steps_per_day: int,
            dictionary: ProfileDictionary | None = None, nonnegative: bool = False,
            anchor: str = "rollout") -> np.ndarray:
    """Forecast ``n_steps`` values after day-grid index ``step`` (the last window entry).

    With a dictionary, every step is anchored. ``anchor="rollout"`` picks the
    profile from the previous rollout value at each step; ``"measurement"``
    picks it once from the last measured value and keeps it.
    """
    if anchor not in ("rollout", "measurement"):
        raise ForecastError(f"unknown anchor mode {anchor!r}")
    w = list(np.asarray(window, dtype=float).ravel())
    if len(w) != model.lag:
        raise ForecastError(f"window length {len(w)} != lag {model.lag}")
    out = np.empty(n_steps)
    n = step
    fixed = dictionary.nearest(w[-1], step) if dictionary is not None and anchor == "measurement" else None
    for j in range(n_steps):
        prev = w[-1]
        val = prev + predict_increment(model, w, time_feature(n, steps_per_day))
        if fixed is not None:
            val = max(0.0, 0.5 * (val + dictionary.value(fixed, n + 1)))
        elif dictionary is not None:
            val = solar_forecast_step(val, dictionary, prev, n)
        elif nonnegative:
            val = max(val, 0.0)
        out[j] = val
        w = w[1:] + [val]
        n += 1
    return out


def base_load_rollout(model: KrrModel, window, step: int, n_pre: int, steps_per_day: int) -> np.ndarray:
    """Zero-incentive load trajectory (same units as the training series)."""
    return rollout(model, window, step, n_pre, steps_per_day)


def msms_score(days: Sequence[np.ndarray], sigma: float, lam: float, lag: int = DEFAULT_LAG,
               n_folds: int = 3, n_starts: int = 4, n_steps: int = 6) -> float:
    """Mean squared relative error of ``n_steps`` rollouts over folds and start points.

    Each fold holds out a contiguous block of days; rollouts start at
    ``n_starts`` evenly spaced points of the held-out series. Targets below
    ``MSMS_FLOOR`` are skipped.
    """
    days = [np.asarray(d, dtype=float) for d in days]
    T = len(days[0])
    if any(len(d) != T for d in days):
        raise ForecastError("historical days must share one length")
    if len(days) < n_folds or n_folds < 2:
        raise ForecastError("need at least n_folds >= 2 historical days")
    folds = np.array_split(np.arange(len(days)), n_folds)
    errs = []
    for fold in folds:
        train = [i for i in range(len(days)) if i not in set(fold)]
        Xs, ys = [], []
        for block in _contiguous(train):
            series = np.concatenate([days[i] for i in block])
            X, y = make_samples(series, lag, T)
            Xs.append(X)
            ys.append(y)
        model = fit_krr(np.vstack(Xs), np.concatenate(ys), sigma, lam)
        test = np.concatenate([days[i] for i in fold])
        last_start = len(test) - n_steps - 1
        if last_start < lag - 1:
            raise ForecastError("test fold too short for the rollout horizon")
        starts = np.linspace(lag - 1, last_start, n_starts).round().astype(int)
        for s in starts:
            pred = rollout(model, test[s - lag + 1:s + 1], s, n_steps, T)
            truth = test[s + 1:s + 1 + n_steps]
            keep = np.abs(truth) >= MSMS_FLOOR
            if keep.any():
                errs.append(np.mean(((pred[keep] - truth[keep]) / truth[keep]) ** 2))
    if not errs:
        raise ForecastError("no nonzero targets to score")
    return float(np.mean(errs))


def _contiguous(idx):
    out, cur = [], []
    for i in idx:
        if cur and i != cur[-1] + 1:
            out.append(cur)
            cur = []
        cur.append(i)
    if cur:
        out.append(cur)
    return out


def msms_tune(days, sigmas: Sequence[float], lams: Sequence[float], lag: int = DEFAULT_LAG,
              n_folds: int = 3, n_starts: int = 4, n_steps: int = 6):
    """Exhaustive grid search of the MSMS objective; first minimum in grid order wins."""
    grid = list(itertools.product(sigmas, lams))
    if not grid:
        raise ForecastError("empty hyperparameter grid")
    best = None
    for s, l in grid:
        score = msms_score(days, s, l, lag, n_folds, n_starts, n_steps)
        if best is None or score < best[2]:
            best = (float(s), float(l), score)
    return best


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


@dataclass(frozen=True)
class DemandResponseParams:
    """Elasticity per load type and tariff period, incentive bound and energy cap."""

    elasticity: dict[str, dict[str, float]] = field(default_factory=lambda: {
        "residential": {"valley": -0.10, "offpeak": -0.20, "peak": -0.35},
        "business": {"valley": -0.15, "offpeak": -0.30, "peak": -0.50},
    })
    k_adj: float = 0.002
    cap_fraction: float = 1e-3  # epsilon as a fraction of forecast daily load energy
    enabled: bool = True

    def __post_init__(self):
        for table in self.elasticity.values():
            if any(v > 0 for v in table.values()):
                raise ForecastError("elasticities must be <= 0")
        if self.k_adj < 0 or self.cap_fraction < 0:
            raise ForecastError("k_adj and the cap fraction must be >= 0")


def price_sensitivity(elasticity, base_load, tariff) -> np.ndarray:
    """alpha = elasticity * consumption / tariff, in power per ($/kWh).

    ``base_load`` uses the injection convention (loads negative), so the
    consumption is ``-base_load`` and alpha <= 0: a price rise
    (positive incentive) lowers consumption.
    """
    tariff = np.asarray(tariff, dtype=float)
    if np.any(tariff <= 0):
        raise ForecastError("tariff must be positive")
    return np.asarray(elasticity, dtype=float) * (-np.asarray(base_load, dtype=float)) / tariff


def dr_adjusted_load(base_load, alpha, dC) -> np.ndarray:
    """Injection trajectory under incentives: base minus the cumulative alpha * dC response."""
    resp = np.cumsum(np.asarray(alpha, dtype=float) * np.asarray(dC, dtype=float), axis=-1)
    return np.asarray(base_load, dtype=float) - resp


@dataclass
class ForecastBundle:
    solar: np.ndarray  # (n_pv, N) pu
    base_load: np.ndarray  # (n_loads, N) pu, negative
    alpha: np.ndarray  # (n_loads, N) pu per $/kWh

    def __post_init__(self):
        if self.solar.size and self.solar.min() < 0:
            raise ForecastError("solar forecast must be non-negative")
        if self.base_load.shape != self.alpha.shape:
            raise ForecastError("base_load and alpha shapes differ")


@dataclass
class Forecaster:
    """Per-profile-kind KRR models on normalized series; shared by all devices of a kind."""

    models: dict[str, KrrModel]
    steps_per_day: int
    dictionary: ProfileDictionary | None = None
    use_dictionary: bool = True
    anchor: str = "rollout"

    def predict(self, kind: str, window, step: int, n: int) -> np.ndarray:
        model = self.models[kind]
        if kind == "solar":
            d = self.dictionary if self.use_dictionary else None
            return rollout(model, window, step, n, self.steps_per_day, d, nonnegative=True, anchor=self.anchor)
        return rollout(model, window, step, n, self.steps_per_day, nonnegative=True)


def train_forecaster(history: dict[str, Sequence[np.ndarray]], steps_per_day: int,
                     hyper: dict[str, tuple[float, float]] | None = None, lag: int = DEFAULT_LAG,
                     dictionary: ProfileDictionary | None = None, use_dictionary: bool = True,
                     anchor: str = "rollout") -> Forecaster:
    """Fit one model per kind on the concatenated historical days.

    Kinds missing from ``hyper`` are tuned with ``msms_tune`` over the
    default grid.
    """
    models = {}
    hyper = hyper or {}
    for kind, days in history.items():
        series = np.concatenate([np.asarray(d, dtype=float) for d in days])
        X, y = make_samples(series, lag, steps_per_day)
        if kind in hyper:
            s, l = hyper[kind]
        else:
            s, l, _ = msms_tune(days, SIGMA_GRID, LAMBDA_GRID, lag)
            log.debug("msms %s: sigma=%.3g lambda=%.3g", kind, s, l)
        models[kind] = fit_krr(X, y, s, l)
    if dictionary is None and "solar" in history:
        dictionary = bell_dictionary(steps_per_day)
    return Forecaster(models, steps_per_day, dictionary, use_dictionary, anchor)


def nrmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    span = truth.max() - truth.min() if truth.size else 0.0
    err = np.sqrt(np.mean((pred - truth) ** 2)) if truth.size else 0.0
    if span <= 0:
        scale = np.abs(truth).max() if truth.size else 0.0
        return float(err / scale) if scale > 0 else float(err)
    return float(err / span)


@dataclass
class ForecastEvalRow:
    start: int
    n_steps: int
    nrmse_vanilla: float
    nrmse_dictionary: float | None
    nrmse_persistence: float
    truth: np.ndarray
    vanilla: np.ndarray
    dictionary: np.ndarray | None
    persistence: np.ndarray


def evaluate_forecasts(history: Sequence[np.ndarray], realized, starts: Sequence[int], kind: str = "solar",
                       hyper: tuple[float, float] | None = None, lag: int = DEFAULT_LAG,
                       dictionary: ProfileDictionary | None = None,
                       n_steps: int | None = None) -> list[ForecastEvalRow]:
    """Multi-step forecasts of the realized day from several start steps.

    A forecast from ``start`` sees realized values up to ``start - 1``
    (earlier ones come from the last historical day) and predicts through
    the end of the day unless ``n_steps`` is given. The dictionary method
    applies to solar only; persistence repeats the last measurement.
    """
    days = [np.asarray(d, dtype=float) for d in history]
    if len(days) < 2:
        raise ForecastError("forecast evaluation needs at least 2 historical days")
    truth_day = np.asarray(realized, dtype=float)
    T = len(truth_day)
    fc = train_forecaster({kind: days}, T, {kind: hyper} if hyper else None, lag,
                          dictionary=dictionary, use_dictionary=False)
    series = np.concatenate([days[-1], truth_day])
    model = fc.models[kind]
    dic = (fc.dictionary or bell_dictionary(T)) if kind == "solar" else None
    rows = []
    for s0 in starts:
        if not 0 <= s0 < T:
            raise ForecastError(f"start {s0} outside the day")
        n = n_steps if n_steps is not None else T - s0
        n = min(n, T - s0)
        last = T + s0 - 1
        window = series[last - lag + 1:last + 1]
        truth = truth_day[s0:s0 + n]
        van = rollout(model, window, s0 - 1, n, T, nonnegative=True)
        per = np.full(n, series[last])
        dct = rollout(model, window, s0 - 1, n, T, dic, nonnegative=True) if dic is not None else None
        rows.append(ForecastEvalRow(s0, n, nrmse(van, truth), nrmse(dct, truth) if dct is not None else None,
                                    nrmse(per, truth), truth, van, dct, per))
    return rows
