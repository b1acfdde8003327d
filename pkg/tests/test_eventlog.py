import logging
from pathlib import Path

import numpy as np
import pytest

from servtime._types import ArrivalEvent, NormalizationSpec, QueueTrace
from servtime.core.exceptions import DataError, MissingInputError
from servtime.data.eventlog import (
    apply_normalizer,
    censor_split,
    compute_interarrivals,
    fit_normalizer,
    ingest_csv,
    invert_normalizer,
    make_trace,
    split_chronological,
    write_csv,
)


def test_ingest_sorts_and_reads_covariates(event_csv: Path):
    trace = ingest_csv(event_csv, 10.0)
    assert trace.arrivals.tolist() == [0.5, 1.0, 2.5]
    assert trace.events[0].departure_time is None
    assert trace.covariates[:, 0].tolist() == [1.5, 0.5, -1.0]
    assert trace.horizon == 10.0


def test_ingest_censors_departures_past_horizon(event_csv: Path):
    trace = ingest_csv(event_csv, 2.6)
    assert trace.censored_mask.tolist() == [True, False, True]


def test_ingest_infers_horizon_with_warning(event_csv: Path, caplog: pytest.LogCaptureFixture):
    with caplog.at_level(logging.WARNING):
        trace = ingest_csv(event_csv, 0.0)
    assert trace.horizon == 3.0
    assert "no horizon given" in caplog.text


def test_ingest_drops_arrivals_past_horizon(event_csv: Path, caplog: pytest.LogCaptureFixture):
    with caplog.at_level(logging.WARNING):
        trace = ingest_csv(event_csv, 2.0)
    assert len(trace) == 2
    assert "1 arrivals after the horizon" in caplog.text


def test_ingest_skips_departure_before_arrival(tmp_path: Path, caplog: pytest.LogCaptureFixture):
    path = tmp_path / "bad.csv"
    path.write_text("arrival_time,departure_time\n1.0,0.5\n2.0,3.0\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        trace = ingest_csv(path, 5.0)
    assert len(trace) == 1
    assert "line 2" in caplog.text


@pytest.mark.parametrize(
    "body, message",
    [
        ("a,b\n1,2\n", "header"),
        ("arrival_time,departure_time\nx,2\n", "line 2"),
        ("arrival_time,departure_time\n1,2,3\n", "expected 2 fields"),
        ("arrival_time,departure_time\n-1,2\n", "negative"),
        ("arrival_time,departure_time\n1,inf\n", "finite"),
    ],
)
def test_ingest_rejects_malformed_files(tmp_path: Path, body: str, message: str):
    path = tmp_path / "bad.csv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(DataError, match=message):
        ingest_csv(path, 10.0)


def test_ingest_missing_file(tmp_path: Path):
    with pytest.raises(MissingInputError):
        ingest_csv(tmp_path / "nope.csv", 1.0)


def test_written_csv_reads_back_identically(small_trace: QueueTrace, tmp_path: Path):
    path = write_csv(small_trace, tmp_path / "out.csv")
    assert ingest_csv(path, small_trace.horizon) == small_trace


def test_censor_split_windows(small_trace: QueueTrace):
    split = censor_split(small_trace)
    assert split.uncensored == (0, 1, 2, 3)
    assert split.service_times == (1.0, 0.25, 2.0, 1.0)
    assert split.censored == (4,)
    assert split.windows == (1.0,)


def test_split_chronological_moves_the_suffix(small_trace: QueueTrace):
    train, test = split_chronological(small_trace, 0.4)
    assert len(train) == 3 and len(test) == 2
    # the train horizon ends at the first test arrival, censoring the 2.0 -> 4.0 event
    assert train.horizon == 3.5
    assert train.censored_mask.tolist() == [False, False, True]
    assert test.horizon == small_trace.horizon


def test_split_chronological_keeps_both_sides_nonempty(small_trace: QueueTrace):
    train, test = split_chronological(small_trace, 0.01)
    assert len(test) == 1
    train, test = split_chronological(small_trace, 0.99)
    assert len(train) == 1
    with pytest.raises(DataError):
        split_chronological(small_trace, 1.0)


def test_normalizer_scales_time_and_zscores(small_trace: QueueTrace):
    spec = fit_normalizer(small_trace)
    assert spec.time_scale == pytest.approx(np.mean(compute_interarrivals(small_trace)))
    norm = apply_normalizer(spec, small_trace)
    assert norm.covariates.mean() == pytest.approx(0.0, abs=1e-12)
    assert norm.covariates.std() == pytest.approx(1.0)

    back = invert_normalizer(spec, norm)
    np.testing.assert_allclose(back.arrivals, small_trace.arrivals)
    np.testing.assert_allclose(back.covariates, small_trace.covariates)


def test_normalizer_pins_constant_covariates():
    trace = make_trace([ArrivalEvent(1.0, 2.0, (4.0,)), ArrivalEvent(2.0, 3.0, (4.0,))], 5.0)
    spec = fit_normalizer(trace)
    assert spec.covariate_stds == (1.0,)
    assert NormalizationSpec.from_dict(spec.to_dict()) == spec
