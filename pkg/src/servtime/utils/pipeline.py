"""One function per CLI stage: read inputs, run, write outputs and the
resolved configuration next to them."""

import csv
import logging
from pathlib import Path

import numpy as np

from servtime._types import ArrivalEvent, QueueTrace
from servtime.core.config import RunConfig
from servtime.core.exceptions import CheckpointError, DataError
from servtime.data.eventlog import ingest_csv, make_trace, split_chronological, write_csv
from servtime.data.mempool_csv import ingest_mempool_csv, write_mempool_csv
from servtime.eval.metrics import build_report
from servtime.models.advserve import AdvConfig
from servtime.models.base import ServiceModel, checkpoint_kind
from servtime.models.nsx import service_targets
from servtime.models.rpp import RppModel
from servtime.utils.helpers import MODEL_CLASSES, lazy_import, require_file, sibling, write_json

logger = logging.getLogger(__name__)


def _load_trace(path: Path, horizon: float) -> QueueTrace:
    trace = ingest_csv(require_file(path, "event file"), horizon)
    if len(trace) == 0:
        raise DataError(f"{path} holds no events")
    return trace


def _load_service_model(path: Path) -> ServiceModel:
    kind = checkpoint_kind(require_file(path, "checkpoint"))
    if kind not in ("nsx", "adv"):
        raise CheckpointError(f"{path} holds a '{kind}' model, expected a service model")
    return lazy_import(MODEL_CLASSES[kind]).load(path)


def _adv_config(cfg: RunConfig) -> AdvConfig:
    return AdvConfig(
        lambda1=cfg["lambda1"],
        lambda2=cfg.values.get("lambda2", 0.0),
        lambda3=cfg["lambda3"],
        critic_steps=cfg["critic_steps"],
        noise_dim=cfg["noise_dim"],
    )


def _finish(cfg: RunConfig, output: Path) -> Path:
    cfg.write_next_to(output)
    logger.info("wrote %s", output)
    return output


# --------------------------------------------------
# DATA
# --------------------------------------------------
def run_simulate(cfg: RunConfig, output: Path) -> Path:
    from servtime.sim.datasets import SyntheticSpec, make_dataset

    spec = SyntheticSpec(
        base_rate=cfg["base_rate"],
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        link_shift=cfg["link_shift"],
        link_scale=cfg["link_scale"],
        service_rate=cfg["service_rate"],
        phases=cfg["phases"],
    )
    trace = make_dataset(cfg["family"], spec, cfg["horizon"], cfg["seed"])
    logger.info(
        "simulated %d arrivals, %d still in service at %g",
        len(trace),
        int(trace.censored_mask.sum()),
        trace.horizon,
    )
    write_csv(trace, output)
    return _finish(cfg, output)


def run_simulate_mempool(cfg: RunConfig, output: Path) -> Path:
    from servtime.sim.datasets import simulate_sawtooth

    series = simulate_sawtooth(
        cfg["rate"], cfg["block_rate"], cfg["horizon"], cfg["seed"], cfg["drop_fraction"]
    )
    logger.info("simulated %d blocks", len(series))
    write_mempool_csv(series, output)
    return _finish(cfg, output)


def run_ingest(cfg: RunConfig, data: Path, output: Path) -> list[Path]:
    """Validate, sort and optionally split an event file chronologically."""
    trace = _load_trace(data, cfg["horizon"])
    logger.info(
        "%d events, %d censored, %d covariates, horizon %g",
        len(trace),
        int(trace.censored_mask.sum()),
        trace.n_covariates,
        trace.horizon,
    )
    if cfg["test_fraction"] <= 0:
        write_csv(trace, output)
        return [_finish(cfg, output)]

    train, test = split_chronological(trace, cfg["test_fraction"])
    test_path = sibling(output, ".test")
    write_csv(train, output)
    write_csv(test, test_path)
    logger.info("split into %d train and %d test events", len(train), len(test))
    return [_finish(cfg, output), test_path]


# --------------------------------------------------
# TRAINING
# --------------------------------------------------
def run_train_rpp(cfg: RunConfig, data: Path, output: Path) -> Path:
    from servtime.models.rpp import train_rpp

    model = train_rpp(
        [_load_trace(data, cfg["horizon"])],
        hidden=cfg["hidden"],
        cell=cfg["cell"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        bptt=cfg["bptt"],
        validation_fraction=cfg["validation_fraction"],
        include_tail=cfg["include_tail"],
        seed=cfg["seed"],
        checkpoint=output,
    )
    model.save(output)
    return _finish(cfg, output)


def run_train_ns(cfg: RunConfig, data: Path, rpp: Path, output: Path) -> Path:
    from servtime.models.nsx import train_ns

    model = train_ns(
        RppModel.load(require_file(rpp, "arrival checkpoint")),
        _load_trace(data, cfg["horizon"]),
        cfg["family"],
        hidden=cfg["hidden"],
        layers=cfg["layers"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        validation_fraction=cfg["validation_fraction"],
        seed=cfg["seed"],
        checkpoint=output,
    )
    model.save(output)
    return _finish(cfg, output)


def run_train_adv(cfg: RunConfig, data: Path, rpp: Path, output: Path) -> Path:
    from servtime.models.advserve import train_adversarial

    model = train_adversarial(
        cfg["variant"],
        RppModel.load(require_file(rpp, "arrival checkpoint")),
        _load_trace(data, cfg["horizon"]),
        _adv_config(cfg),
        hidden=cfg["hidden"],
        layers=cfg["layers"],
        transition_dim=cfg["state_dim"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        bptt=cfg["bptt"],
        seed=cfg["seed"],
        checkpoint=output,
    )
    model.save(output)
    return _finish(cfg, output)


def run_train_mempool(cfg: RunConfig, data: Path, output: Path) -> Path:
    from servtime.models.mempool import train_mempool

    series = ingest_mempool_csv(require_file(data, "mempool file"))
    model, _ = train_mempool(
        cfg["variant"],
        series,
        _adv_config(cfg),
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        bptt=cfg["bptt"],
        seed=cfg["seed"],
        checkpoint=output,
    )
    model.save(output)
    return _finish(cfg, output)


# --------------------------------------------------
# INFERENCE
# --------------------------------------------------
def run_sample_rpp(cfg: RunConfig, rpp: Path, output: Path, history: Path | None = None) -> Path:
    """Arrivals sampled after `history` (or from scratch) up to the horizon,
    written as an event file with open departures."""
    model = RppModel.load(require_file(rpp, "arrival checkpoint"))
    past = _load_trace(history, 0.0) if history is not None else None
    horizon = cfg["horizon"]
    if past is not None and horizon <= past.horizon:
        raise DataError(f"horizon {horizon} does not extend the history ending at {past.horizon}")

    times = model.sample_path(horizon, cfg["seed"], past)
    logger.info("sampled %d arrivals up to %g", times.size, horizon)
    write_csv(make_trace([ArrivalEvent(float(t)) for t in times], horizon), output)
    return _finish(cfg, output)


def run_predict(cfg: RunConfig, model_path: Path, rpp: Path | None, data: Path, output: Path) -> Path:
    kind = checkpoint_kind(require_file(model_path, "checkpoint"))
    if kind == "mempool":
        return _predict_mempool(cfg, model_path, data, output)
    if rpp is None:
        raise DataError("service models need the arrival checkpoint (--rpp)")

    model = _load_service_model(model_path)
    arrivals = RppModel.load(require_file(rpp, "arrival checkpoint"))
    trace = _load_trace(data, cfg["horizon"])
    predictions = model.predict(
        trace, arrivals.hidden_states(trace), cfg["n_samples"], cfg["seed"]
    )
    values, censored = service_targets(trace)

    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["arrival_time", "observed", "censored", "predicted_mean"])
        for event, value, cens, p in zip(trace.events, values, censored, predictions):
            writer.writerow([repr(event.arrival_time), repr(float(value)), int(cens), repr(p.mean)])
    return _finish(cfg, output)


def _predict_mempool(cfg: RunConfig, model_path: Path, data: Path, output: Path) -> Path:
    from servtime.models.mempool import MempoolModel, forecast_mempool

    model = MempoolModel.load(model_path)
    series = ingest_mempool_csv(require_file(data, "mempool file"))
    forecast = forecast_mempool(model, series, cfg["n_samples"], cfg["seed"])

    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            [
                "block_time",
                "unconfirmed",
                "predicted_unconfirmed",
                "accepted",
                "predicted_accepted",
                "expected_gap",
            ]
        )
        rows = zip(
            forecast.block_times,
            series.unconfirmed[1:],
            forecast.unconfirmed_mean,
            series.accepted[1:],
            forecast.accepted_mean,
            forecast.expected_gap,
        )
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    logger.info(
        "next block in %.4g, backlog %.1f, accepted %.1f",
        forecast.next_gap,
        forecast.next_unconfirmed,
        forecast.next_accepted,
    )
    return _finish(cfg, output)


# --------------------------------------------------
# EVALUATION
# --------------------------------------------------
def _write_qq(pairs: list[tuple[float, float]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["empirical", "model"])
        writer.writerows([repr(a), repr(b)] for a, b in pairs)
    return path


def run_evaluate(
    cfg: RunConfig,
    model_path: Path,
    rpp: Path | None,
    data: Path,
    report: Path,
    qq: Path | None = None,
) -> Path:
    """Predict over the whole trace, score the chronological test suffix.

    Baselines are fitted on the services observed before the test suffix.
    """
    kind = checkpoint_kind(require_file(model_path, "checkpoint"))
    if kind == "mempool":
        return _evaluate_mempool(cfg, model_path, data, report, qq)
    if rpp is None:
        raise DataError("service models need the arrival checkpoint (--rpp)")

    model = _load_service_model(model_path)
    arrivals = RppModel.load(require_file(rpp, "arrival checkpoint"))
    trace = _load_trace(data, cfg["horizon"])
    train, _ = split_chronological(trace, cfg["test_fraction"])
    cut = len(train)

    predictions = model.predict(
        trace, arrivals.hidden_states(trace), cfg["n_samples"], cfg["seed"]
    )
    values, censored = service_targets(trace)
    train_values, train_censored = service_targets(train)
    train_services = train_values[~train_censored]
    if train_services.size == 0:
        raise DataError("no observed services before the test suffix")

    result = build_report(
        predictions[cut:], values[cut:], censored[cut:], train_services, cfg["n_quantiles"]
    )
    logger.info(
        "error %.5g (mean baseline %.5g), KS %.4f over %d events",
        result.error,
        result.baseline_error,
        result.ks,
        result.n_events - result.n_censored,
    )
    write_json(result.to_dict(), report)
    if qq is not None:
        _write_qq(result.qq_pairs, qq)
    return _finish(cfg, report)


def _evaluate_mempool(
    cfg: RunConfig, model_path: Path, data: Path, report: Path, qq: Path | None
) -> Path:
    """Reports one-step backlog forecasts to `report` and accepted counts to
    `<report>.accepted.json`."""
    from servtime._types import ServicePrediction
    from servtime.models.mempool import MempoolModel, forecast_mempool

    model = MempoolModel.load(model_path)
    series = ingest_mempool_csv(require_file(data, "mempool file"))
    forecast = forecast_mempool(model, series, cfg["n_samples"], cfg["seed"])

    steps = len(series) - 1
    n_test = max(1, min(steps - 1, round(steps * cfg["test_fraction"])))
    cut = steps - n_test
    targets = {
        "unconfirmed_count": (series.unconfirmed[1:], forecast.unconfirmed),
        "accepted_count": (series.accepted[1:], forecast.accepted),
    }
    paths = {"unconfirmed_count": report, "accepted_count": sibling(report, ".accepted")}

    for target, (observed, draws) in targets.items():
        predictions = [ServicePrediction((), row) for row in draws[cut:]]
        result = build_report(
            predictions,
            observed[cut:],
            np.zeros(n_test, dtype=bool),
            observed[: max(cut, 1)],
            cfg["n_quantiles"],
            target=target,
        )
        logger.info(
            "%s: error %.5g (mean baseline %.5g), KS %.4f",
            target,
            result.error,
            result.baseline_error,
            result.ks,
        )
        write_json(result.to_dict(), paths[target])
        if qq is not None and target == "unconfirmed_count":
            _write_qq(result.qq_pairs, qq)
    return _finish(cfg, report)
