"""Neural service models: an MLP over (arrival state, covariates) emitting the
parameters of a fixed service-time family, fitted by censored likelihood."""

import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import torch
from typing_extensions import Self, override

from servtime._types import NormalizationSpec, QueueTrace, ServicePrediction
from servtime.core.constants import (
    DEFAULT_LR,
    DEFAULT_MC_SAMPLES,
    DEFAULT_TEST_FRACTION,
    PARETO_CAP_FRACTION,
    POSITIVE_FLOOR,
)
from servtime.core.exceptions import DataError, DivergenceError
from servtime.data.eventlog import censor_split
from servtime.models.base import DivergenceGuard, ServiceModel
from servtime.models.families import Distribution, get_distribution
from servtime.models.rpp import RppModel
from servtime.nn.autodiff import backward
from servtime.nn.layers import LayerSpec, forward_mlp, init_layer
from servtime.nn.optim import Adam
from servtime.nn.params import DTYPE, ParamSet

logger = logging.getLogger(__name__)


def loss_ns(
    distribution: Distribution,
    p: torch.Tensor,
    values: torch.Tensor,
    censored: torch.Tensor,
) -> torch.Tensor:
    """-(sum over D of log pdf(s) + sum over C of log survival(T))."""
    if values.numel() == 0:
        raise DataError("empty batch")
    # keep the unused branch finite so its gradient stays clean
    safe = torch.clamp(values, min=1e-300)
    log_pdf = distribution.log_pdf(p, safe)
    log_surv = distribution.log_survival(p, values)
    return -torch.where(censored, log_surv, log_pdf).sum()


def conditioning(
    arrival_states: torch.Tensor, trace: QueueTrace, normalizer: NormalizationSpec
) -> torch.Tensor:
    """concat(h^a_i, z-scored x_i) per event."""
    if arrival_states.shape[0] != len(trace):
        raise DataError(
            f"{arrival_states.shape[0]} arrival states for {len(trace)} events"
        )
    x = trace.covariates
    if x.shape[1]:
        x = (x - np.asarray(normalizer.covariate_means)) / np.asarray(normalizer.covariate_stds)
    return torch.cat([arrival_states.to(DTYPE), torch.from_numpy(x)], dim=1)


def service_targets(trace: QueueTrace) -> tuple[np.ndarray, np.ndarray]:
    """Observed s_i or window T_i per event, and the censored mask."""
    split = censor_split(trace)
    values = np.empty(len(trace))
    censored = np.zeros(len(trace), dtype=bool)
    values[list(split.uncensored)] = split.service_times
    values[list(split.censored)] = split.windows
    censored[list(split.censored)] = True
    return values, censored


class NsxModel(ServiceModel):
    kind = "nsx"

    def __init__(
        self,
        family: str,
        state_dim: int,
        n_covariates: int = 0,
        hidden: int = 256,
        layers: int = 2,
        normalizer: NormalizationSpec | None = None,
        service_scale: float = 1.0,
        support_cap: float | None = None,
        seed: int = 0,
    ) -> None:
        self.distribution = get_distribution(family)
        self.family = family
        self.state_dim = state_dim
        self.n_covariates = n_covariates
        self.hidden = hidden
        self.layers = layers
        self.normalizer = normalizer or NormalizationSpec(1.0)
        self.service_scale = service_scale
        self.support_cap = support_cap
        self.seed = seed

        self.head_spec = LayerSpec(
            "mlp",
            state_dim + n_covariates,
            hidden,
            self.distribution.n_params,
            n_layers=layers,
        )
        self.params = ParamSet()
        init_layer(self.head_spec, self.params, "head", torch.Generator().manual_seed(seed))

    @override
    def describe(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "state_dim": self.state_dim,
            "n_covariates": self.n_covariates,
            "hidden": self.hidden,
            "layers": self.layers,
            "normalizer": self.normalizer.to_dict(),
            "service_scale": self.service_scale,
            "support_cap": self.support_cap,
            "seed": self.seed,
        }

    @classmethod
    @override
    def from_description(cls, meta: dict[str, Any]) -> Self:
        return cls(
            family=meta["family"],
            state_dim=int(meta["state_dim"]),
            n_covariates=int(meta["n_covariates"]),
            hidden=int(meta["hidden"]),
            layers=int(meta["layers"]),
            normalizer=NormalizationSpec.from_dict(meta["normalizer"]),
            service_scale=float(meta["service_scale"]),
            support_cap=meta["support_cap"],
            seed=int(meta["seed"]),
        )

    def distribution_params(self, inputs: torch.Tensor) -> torch.Tensor:
        """Family parameters in units of `service_scale`, shape (n, n_params)."""
        raw = forward_mlp(self.head_spec, self.params.view("head"), inputs)
        return self.distribution.link(raw, self.support_cap)

    @override
    def fit(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        *,
        epochs: int = 50,
        lr: float = DEFAULT_LR,
        batch_size: int = 256,
        validation_fraction: float = DEFAULT_TEST_FRACTION,
        checkpoint: Path | None = None,
    ) -> list[dict[str, float]]:
        inputs = conditioning(arrival_states, trace, self.normalizer)
        values, censored = service_targets(trace)
        # zero-length services sit on the floor so every family has a finite density
        targets = torch.from_numpy(np.maximum(values / self.service_scale, POSITIVE_FLOOR))
        mask = torch.from_numpy(censored)

        n = len(trace)
        n_val = round(n * validation_fraction) if validation_fraction > 0 and n >= 3 else 0
        n_train = n - n_val
        if n_train < 1:
            raise DataError("no events left for training")

        rng = np.random.default_rng(self.seed)
        optim = Adam(self.params, lr=lr)
        guard = DivergenceGuard(self, checkpoint)
        history: list[dict[str, float]] = []

        for epoch in range(1, epochs + 1):
            order = rng.permutation(n_train)
            total = 0.0
            for start in range(0, n_train, batch_size):
                idx = torch.from_numpy(order[start : start + batch_size])
                self.params.zero_grad()
                p = self.distribution_params(inputs[idx])
                loss = loss_ns(self.distribution, p, targets[idx], mask[idx])
                guard.check(loss, f"ns-{self.family}")
                backward(loss / idx.numel(), self.params)
                try:
                    optim.step()
                except DivergenceError as e:
                    guard.abort(str(e))
                total += float(loss.detach())

            guard.commit()
            record = {"epoch": float(epoch), "train_nll": total / n_train}
            if n_val:
                with torch.no_grad():
                    p = self.distribution_params(inputs[n_train:])
                    heldout = loss_ns(self.distribution, p, targets[n_train:], mask[n_train:])
                record["heldout_nll"] = float(heldout) / n_val + math.log(self.service_scale)
            history.append(record)
            logger.info(
                "ns-%s epoch %d/%d  train nll %.5f%s",
                self.family,
                epoch,
                epochs,
                record["train_nll"],
                f"  held-out nll {record['heldout_nll']:.5f}" if n_val else "",
            )
        return history

    @override
    def predict(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        n_samples: int = DEFAULT_MC_SAMPLES,
        seed: int = 0,
    ) -> list[ServicePrediction]:
        if n_samples < 1:
            raise DataError(f"n_samples must be >= 1, got {n_samples}")
        with torch.no_grad():
            params = self.distribution_params(
                conditioning(arrival_states, trace, self.normalizer)
            ).numpy()
        rng = np.random.default_rng(seed)
        return [
            ServicePrediction(
                tuple(p.tolist()),
                self.distribution.sample(p, rng, n_samples) * self.service_scale,
            )
            for p in params
        ]


def train_ns(
    rpp: RppModel,
    trace: QueueTrace,
    family: str,
    *,
    hidden: int = 256,
    layers: int = 2,
    epochs: int = 50,
    lr: float = DEFAULT_LR,
    batch_size: int = 256,
    validation_fraction: float = DEFAULT_TEST_FRACTION,
    seed: int = 0,
    checkpoint: Path | None = None,
) -> NsxModel:
    """Two-stage fit: the arrival model is frozen and only supplies h^a."""
    if len(trace) == 0:
        raise DataError("no events to train on")
    rpp.params.freeze()
    states = rpp.hidden_states(trace)

    values, censored = service_targets(trace)
    observed = values[~censored]
    scale = float(observed.mean()) if observed.size else float(values.mean())
    if not scale > 0:
        scale = 1.0
    cap = None
    if family == "pareto" and observed.size:
        # below the smallest target, floored like the targets in fit
        cap = PARETO_CAP_FRACTION * max(float(observed.min()) / scale, POSITIVE_FLOOR)

    model = NsxModel(
        family,
        state_dim=rpp.hidden,
        n_covariates=trace.n_covariates,
        hidden=hidden,
        layers=layers,
        normalizer=rpp.normalizer,
        service_scale=scale,
        support_cap=cap,
        seed=seed,
    )
    model.fit(
        trace,
        states,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        validation_fraction=validation_fraction,
        checkpoint=checkpoint,
    )
    return model
