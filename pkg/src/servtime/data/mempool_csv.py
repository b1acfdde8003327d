import csv
import logging
from pathlib import Path

from servtime._types import MempoolRecord, MempoolSeries
from servtime.core.exceptions import DataError, MissingInputError
from servtime.data.eventlog import parse_float

logger = logging.getLogger(__name__)

HEADER = ["block_time", "unconfirmed_count", "accepted_count"]


def make_series(
    rows: list[tuple[float, float, float]],
    horizon: float = 0.0,
    origin: float | None = None,
) -> MempoolSeries:
    """Build records from (block_time, unconfirmed, accepted) rows.

    Without an `origin` the first gap is taken equal to the second one.
    """
    if not rows:
        raise DataError("mempool series is empty")

    times = [r[0] for r in rows]
    for k in range(1, len(times)):
        if not times[k] > times[k - 1]:
            raise DataError(
                f"block times must be strictly increasing: {times[k - 1]!r} then {times[k]!r}"
            )

    if origin is not None:
        if not times[0] > origin:
            raise DataError(f"first block {times[0]!r} is not after the origin {origin!r}")
        first_gap = times[0] - origin
    elif len(times) > 1:
        first_gap = times[1] - times[0]
    else:
        first_gap = times[0] if times[0] > 0 else 1.0

    records = tuple(
        MempoolRecord(
            block_time=d,
            unconfirmed=u,
            accepted=b,
            inter_block=first_gap if k == 0 else d - times[k - 1],
        )
        for k, (d, u, b) in enumerate(rows)
    )
    return MempoolSeries(records, horizon if horizon > 0 else times[-1])


def ingest_mempool_csv(path: Path, horizon: float = 0.0) -> MempoolSeries:
    if not path.exists():
        raise MissingInputError(f"mempool file not found: {path}")

    rows: list[tuple[float, float, float]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"line 1: header must be {','.join(HEADER)}")

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise DataError(f"line {line}: expected 3 fields, got {len(row)}")
            d, u, b = (parse_float(v, col, line) for v, col in zip(row, HEADER))
            if u < 0 or b < 0:
                raise DataError(f"line {line}: counts must be nonnegative")
            if b > u:
                logger.warning("line %d: accepted %r exceeds backlog %r, row skipped", line, b, u)
                continue
            rows.append((d, u, b))

    return make_series(rows, horizon)


def write_mempool_csv(series: MempoolSeries, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HEADER)
        for r in series.records:
            writer.writerow([repr(r.block_time), repr(r.unconfirmed), repr(r.accepted)])
    return path
