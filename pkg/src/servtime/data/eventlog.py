import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from servtime._types import ArrivalEvent, CensorSplit, NormalizationSpec, QueueTrace
from servtime.core.exceptions import DataError, MissingInputError

logger = logging.getLogger(__name__)

ARRIVAL_COLUMN = "arrival_time"
DEPARTURE_COLUMN = "departure_time"


def parse_float(value: str, column: str, line: int) -> float:
    try:
        number = float(value)
    except ValueError:
        raise DataError(f"line {line}: {column} is not a number: {value!r}")
    if not math.isfinite(number):
        raise DataError(f"line {line}: {column} must be finite, got {value!r}")
    return number


def make_trace(events: list[ArrivalEvent], horizon: float) -> QueueTrace:
    """Sort by arrival (stable) and censor departures beyond the horizon."""
    ordered = sorted(events, key=lambda e: e.arrival_time)
    censored = tuple(
        replace(e, departure_time=None)
        if e.departure_time is not None and e.departure_time > horizon
        else e
        for e in ordered
    )
    return QueueTrace(censored, horizon)


def ingest_csv(path: Path, horizon: float) -> QueueTrace:
    """Read an event CSV; horizon <= 0 takes the latest time found in the file."""
    if not path.exists():
        raise MissingInputError(f"event file not found: {path}")

    events: list[ArrivalEvent] = []
    latest = 0.0
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return QueueTrace((), horizon if horizon > 0 else 1.0)
        header = [h.strip() for h in header]
        if header[:2] != [ARRIVAL_COLUMN, DEPARTURE_COLUMN]:
            raise DataError(
                f"line 1: header must start with {ARRIVAL_COLUMN},{DEPARTURE_COLUMN}"
            )
        n_cov = len(header) - 2

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != n_cov + 2:
                raise DataError(f"line {line}: expected {n_cov + 2} fields, got {len(row)}")

            a = parse_float(row[0], ARRIVAL_COLUMN, line)
            if a < 0:
                raise DataError(f"line {line}: negative arrival time {a}")
            d = None if not row[1].strip() else parse_float(row[1], DEPARTURE_COLUMN, line)
            if d is not None and d < a:
                logger.warning("line %d: departure %r before arrival %r, row skipped", line, d, a)
                continue
            covariates = tuple(parse_float(v, header[k + 2], line) for k, v in enumerate(row[2:]))

            latest = max(latest, a, d or 0.0)
            events.append(ArrivalEvent(a, d, covariates))

    if horizon <= 0:
        horizon = latest if latest > 0 else 1.0
        logger.warning("no horizon given for %s, using the latest time %r", path.name, horizon)

    beyond = [e for e in events if e.arrival_time > horizon]
    if beyond:
        logger.warning("%d arrivals after the horizon %r dropped", len(beyond), horizon)
        events = [e for e in events if e.arrival_time <= horizon]

    return make_trace(events, horizon)


def write_csv(trace: QueueTrace, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            [ARRIVAL_COLUMN, DEPARTURE_COLUMN]
            + [f"cov_{k}" for k in range(trace.n_covariates)]
        )
        for e in trace.events:
            departure = "" if e.departure_time is None else repr(e.departure_time)
            writer.writerow(
                [repr(e.arrival_time), departure] + [repr(x) for x in e.covariates]
            )
    return path


def censor_split(trace: QueueTrace) -> CensorSplit:
    uncensored, services, censored, windows = [], [], [], []
    for i, e in enumerate(trace.events):
        if e.departure_time is None:
            censored.append(i)
            windows.append(trace.horizon - e.arrival_time)
        else:
            uncensored.append(i)
            services.append(e.departure_time - e.arrival_time)
    return CensorSplit(tuple(uncensored), tuple(services), tuple(censored), tuple(windows))


def split_chronological(
    trace: QueueTrace, test_fraction: float
) -> tuple[QueueTrace, QueueTrace]:
    """Suffix by arrival goes to test; the train horizon is the first test arrival."""
    if not 0 < test_fraction < 1:
        raise DataError(f"test fraction must be in (0, 1), got {test_fraction}")
    n = len(trace)
    if n < 2:
        raise DataError(f"need at least 2 events to split, got {n}")

    n_test = max(1, min(n - 1, round(n * test_fraction)))
    cut = n - n_test
    train_events, test_events = trace.events[:cut], trace.events[cut:]

    train = make_trace(list(train_events), test_events[0].arrival_time)
    return train, QueueTrace(test_events, trace.horizon)


def compute_interarrivals(trace: QueueTrace) -> np.ndarray:
    return np.diff(trace.arrivals)


def fit_normalizer(train: QueueTrace | Sequence[QueueTrace]) -> NormalizationSpec:
    """Time scale = mean inter-arrival, pooled over traces; covariates z-scored."""
    traces = [train] if isinstance(train, QueueTrace) else list(train)
    deltas = np.concatenate([compute_interarrivals(t) for t in traces] or [np.empty(0)])
    time_scale = float(deltas.mean()) if deltas.size else 1.0
    if not time_scale > 0:
        time_scale = 1.0

    non_empty = [t for t in traces if len(t)]
    if not non_empty or non_empty[0].n_covariates == 0:
        return NormalizationSpec(time_scale)

    x = np.concatenate([t.covariates for t in non_empty])
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds[~(stds > 0)] = 1.0
    return NormalizationSpec(time_scale, tuple(means.tolist()), tuple(stds.tolist()))


def _transform(
    trace: QueueTrace,
    scale: float,
    means: np.ndarray,
    stds: np.ndarray,
    inverse: bool,
) -> QueueTrace:
    def time(t: float) -> float:
        return t * scale if inverse else t / scale

    def cov(x: tuple[float, ...]) -> tuple[float, ...]:
        if not x:
            return x
        arr = np.asarray(x)
        out = arr * stds + means if inverse else (arr - means) / stds
        return tuple(out.tolist())

    events = tuple(
        ArrivalEvent(
            time(e.arrival_time),
            None if e.departure_time is None else time(e.departure_time),
            cov(e.covariates),
        )
        for e in trace.events
    )
    return QueueTrace(events, time(trace.horizon))


def apply_normalizer(spec: NormalizationSpec, trace: QueueTrace) -> QueueTrace:
    if trace.n_covariates and trace.n_covariates != len(spec.covariate_means):
        raise DataError(
            f"trace has {trace.n_covariates} covariates, normalizer expects "
            f"{len(spec.covariate_means)}"
        )
    return _transform(
        trace,
        spec.time_scale,
        np.asarray(spec.covariate_means),
        np.asarray(spec.covariate_stds),
        inverse=False,
    )


def invert_normalizer(spec: NormalizationSpec, trace: QueueTrace) -> QueueTrace:
    return _transform(
        trace,
        spec.time_scale,
        np.asarray(spec.covariate_means),
        np.asarray(spec.covariate_stds),
        inverse=True,
    )
