import logging
from pathlib import Path

import pytest

from servtime.core.exceptions import DataError
from servtime.data.mempool_csv import ingest_mempool_csv, make_series, write_mempool_csv


def test_make_series_gaps_with_and_without_origin():
    rows = [(2.0, 10.0, 5.0), (3.0, 7.0, 3.0), (5.0, 9.0, 4.0)]
    series = make_series(rows)
    assert series.inter_block.tolist() == [1.0, 1.0, 2.0]
    assert series.horizon == 5.0

    series = make_series(rows, horizon=6.0, origin=0.0)
    assert series.inter_block.tolist() == [2.0, 1.0, 2.0]
    assert series.horizon == 6.0


def test_make_series_rejects_unordered_blocks():
    with pytest.raises(DataError, match="strictly increasing"):
        make_series([(1.0, 2.0, 1.0), (1.0, 3.0, 1.0)])
    with pytest.raises(DataError, match="empty"):
        make_series([])


def test_ingest_skips_blocks_taking_more_than_the_backlog(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
):
    path = tmp_path / "m.csv"
    path.write_text(
        "block_time,unconfirmed_count,accepted_count\n1,10,4\n2,3,5\n3,8,8\n",
        encoding="utf-8",
    )
    with caplog.at_level(logging.WARNING):
        series = ingest_mempool_csv(path)
    assert series.block_times.tolist() == [1.0, 3.0]
    assert "line 3" in caplog.text


def test_ingest_requires_header(tmp_path: Path):
    path = tmp_path / "m.csv"
    path.write_text("time,u,b\n1,2,1\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        ingest_mempool_csv(path)


def test_written_series_reads_back(tmp_path: Path):
    series = make_series([(0.5, 4.0, 2.0), (1.25, 3.5, 1.0), (2.0, 6.0, 3.0)])
    again = ingest_mempool_csv(write_mempool_csv(series, tmp_path / "m.csv"))
    assert again == series
