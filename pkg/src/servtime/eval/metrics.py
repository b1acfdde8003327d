"""Distributional evaluation of predicted service times."""

import logging
import math

import numpy as np
from scipy import stats

from servtime._types import BaselineDict, EvalReport, ServicePrediction
from servtime.core.exceptions import DataError

logger = logging.getLogger(__name__)

STATIONARY_BASELINES = {
    "pareto": stats.pareto,
    "log_normal": stats.lognorm,
    "gamma": stats.gamma,
}


def _vector(name: str, values: np.ndarray | list[float]) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64).ravel()
    if array.size == 0:
        raise DataError(f"{name} is empty")
    return array


def prediction_error(observed: np.ndarray | list[float], predicted: np.ndarray | list[float]) -> float:
    """1/N sum |s_i - <s~_i>| over uncensored events."""
    s = _vector("observed", observed)
    s_hat = _vector("predicted", predicted)
    if s.shape != s_hat.shape:
        raise DataError(f"length mismatch: {s.size} observed vs {s_hat.size} predicted")
    return float(np.mean(np.abs(s - s_hat)))


def ks_two_sample(a: np.ndarray | list[float], b: np.ndarray | list[float]) -> float:
    """Sup distance between the two empirical CDFs over the merged support."""
    result = stats.ks_2samp(_vector("a", a), _vector("b", b), method="asymp")
    return float(result.statistic)


def qq_export(
    a: np.ndarray | list[float], b: np.ndarray | list[float], n_quantiles: int = 99
) -> list[tuple[float, float]]:
    """Matched quantiles at k/(n+1), k = 1..n, with linear interpolation."""
    a, b = _vector("a", a), _vector("b", b)
    if n_quantiles < 1:
        raise DataError(f"n_quantiles must be positive, got {n_quantiles}")
    limit = min(a.size, b.size)
    if n_quantiles > limit:
        logger.warning("capping %d quantiles to the %d available samples", n_quantiles, limit)
        n_quantiles = limit
    grid = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    qa = np.quantile(a, grid, method="linear")
    qb = np.quantile(b, grid, method="linear")
    return [(float(x), float(y)) for x, y in zip(qa, qb)]


def mean_baseline(train: np.ndarray | list[float], test: np.ndarray | list[float]) -> float:
    """Error of predicting every test service by the training mean."""
    train = _vector("train", train)
    test = _vector("test", test)
    return prediction_error(test, np.full(test.shape, train.mean()))


def stationary_baselines(
    train: np.ndarray | list[float], test: np.ndarray | list[float]
) -> dict[str, BaselineDict]:
    """Pareto, log-normal and Gamma fits to the training services, each
    predicting its mean (median when the mean is infinite)."""
    train = _vector("train", train)
    test = _vector("test", test)
    out: dict[str, BaselineDict] = {}
    for name, family in STATIONARY_BASELINES.items():
        try:
            params = family.fit(train, floc=0.0)
        except (ValueError, RuntimeError) as e:
            logger.warning("skipping the %s baseline: %s", name, e)
            continue
        fitted = family(*params)
        center = float(fitted.mean())
        if not math.isfinite(center):
            center = float(fitted.median())
        samples = fitted.rvs(size=max(test.size, 1000), random_state=np.random.default_rng(0))
        out[name] = {
            "error": prediction_error(test, np.full(test.shape, center)),
            "ks": ks_two_sample(test, samples),
        }
    return out


def build_report(
    predictions: list[ServicePrediction],
    observed: np.ndarray,
    censored: np.ndarray,
    train_services: np.ndarray,
    n_quantiles: int = 99,
    target: str = "service_time",
) -> EvalReport:
    """Report over the uncensored events; censored ones are only counted."""
    observed = np.asarray(observed, dtype=np.float64)
    censored = np.asarray(censored, dtype=bool)
    if len(predictions) != observed.size or censored.size != observed.size:
        raise DataError(
            f"{len(predictions)} predictions for {observed.size} events ({censored.size} flags)"
        )
    keep = np.flatnonzero(~censored)
    if keep.size == 0:
        raise DataError("no uncensored events to evaluate")

    s = observed[keep]
    means = np.array([predictions[i].mean for i in keep])
    pooled = np.concatenate([predictions[i].mc_samples for i in keep])
    return EvalReport(
        error=prediction_error(s, means),
        ks=ks_two_sample(s, pooled),
        qq_pairs=qq_export(s, pooled, n_quantiles),
        n_events=int(observed.size),
        n_censored=int(censored.sum()),
        baseline_error=mean_baseline(train_services, s),
        baselines=stationary_baselines(train_services, s),
        target=target,
    )
