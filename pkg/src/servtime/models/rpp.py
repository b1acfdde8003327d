"""Recurrent point process for arrivals.

After event j the next inter-arrival has intensity
lambda(delta) = exp(alpha_j + w * delta) with alpha_j = v . h_j + b, so the
integrated intensity, survival, density and inverse CDF are closed form.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, cast

import numpy as np
import torch
from scipy import integrate
from typing_extensions import Self, override

from servtime._types import NormalizationSpec, QueueTrace
from servtime.core.constants import (
    DEFAULT_BPTT,
    DEFAULT_LR,
    DEFAULT_TEST_FRACTION,
    QUAD_ABS_TOL,
    SMALL_SLOPE,
    SURVIVAL_TRUNCATION,
)
from servtime.core.exceptions import DataError, DivergenceError, SamplingError
from servtime.data.eventlog import apply_normalizer, fit_normalizer
from servtime.models.base import Checkpointable, DivergenceGuard
from servtime.nn.autodiff import backward
from servtime.nn.layers import LayerKind, LayerSpec, init_layer, step_gru, step_lstm
from servtime.nn.optim import Adam
from servtime.nn.params import DTYPE, ParamSet

logger = logging.getLogger(__name__)

Recurrent = tuple[torch.Tensor, torch.Tensor | None]


@dataclass(frozen=True)
class RppState:
    """Head of the next-arrival law after the last event, in original time units."""

    alpha: float
    w: float
    last_arrival: float = 0.0
    h: torch.Tensor | None = None
    c: torch.Tensor | None = None


# --------------------------------------------------
# CLOSED FORMS
# --------------------------------------------------
def cumulative_intensity(alpha: float, w: float, tau: float) -> float:
    if abs(w) < SMALL_SLOPE:
        return math.exp(alpha) * tau * (1.0 + w * tau / 2.0)
    return math.exp(alpha) * math.expm1(w * tau) / w


def intensity(state: RppState, t: float) -> float:
    if t < state.last_arrival:
        raise SamplingError(f"t={t} precedes the last arrival {state.last_arrival}")
    return math.exp(state.alpha + state.w * (t - state.last_arrival))


def log_f_star(state: RppState, delta: float) -> float:
    if delta < 0:
        raise SamplingError(f"inter-arrival must be nonnegative, got {delta}")
    return state.alpha + state.w * delta - cumulative_intensity(state.alpha, state.w, delta)


def survival_G(state: RppState, tau: float) -> float:
    if tau < 0:
        raise SamplingError(f"elapsed time must be nonnegative, got {tau}")
    return math.exp(-cumulative_intensity(state.alpha, state.w, tau))


def survival_at_infinity(state: RppState) -> float:
    """Probability that no further arrival ever happens."""
    if state.w >= 0:
        return 0.0
    return math.exp(math.exp(state.alpha) / state.w)


def _invert_cumulative(alpha: float, w: float, mass: float) -> float | None:
    """tau with cumulative_intensity(tau) == mass, None when never reached."""
    z = mass * math.exp(-alpha)
    if abs(w) < SMALL_SLOPE:
        if 1.0 + w * z <= 0:
            return None
        return z * (1.0 - w * z / 2.0 + (w * z) ** 2 / 3.0)
    arg = w * z
    if 1.0 + arg <= 0:
        return None
    return math.log1p(arg) / w


def is_defective(state: RppState) -> bool:
    return survival_at_infinity(state) > SURVIVAL_TRUNCATION


def expected_next(state: RppState, horizon: float | None = None) -> tuple[float, bool]:
    """Mean time to the next arrival and whether the law is defective.

    For a defective law the mean is conditional on an arrival within
    `horizon` (default: where the intensity has decayed by SURVIVAL_TRUNCATION).
    """
    alpha, w = state.alpha, state.w

    def G(t: float) -> float:
        return math.exp(-cumulative_intensity(alpha, w, t))

    if not is_defective(state):
        upper = _invert_cumulative(alpha, w, -math.log(SURVIVAL_TRUNCATION))
        if upper is None:
            # defective boundary, the cut is never reached
            upper = math.log(SURVIVAL_TRUNCATION) / w
        value, _ = integrate.quad(G, 0.0, upper, epsabs=QUAD_ABS_TOL, limit=200)
        return float(value), False

    if horizon is None:
        horizon = math.log(SURVIVAL_TRUNCATION) / w
    g_h = G(horizon)
    if 1.0 - g_h <= 0:
        return math.inf, True
    tail, _ = integrate.quad(lambda t: G(t) - g_h, 0.0, horizon, epsabs=QUAD_ABS_TOL, limit=200)
    return float(tail / (1.0 - g_h)), True


def inverse_cdf_sample(state: RppState, y: float) -> float | None:
    """F^{-1}(y); None (no arrival) when y lies beyond the defective mass."""
    if not 0.0 <= y < 1.0:
        raise SamplingError(f"y must lie in [0, 1), got {y}")
    if y == 0.0:
        return 0.0
    return _invert_cumulative(state.alpha, state.w, -math.log1p(-y))


def log_density_terms(
    alpha: torch.Tensor, w: torch.Tensor, delta: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(log f*, integrated intensity) elementwise, differentiable in alpha and w."""
    small = w.abs() < SMALL_SLOPE
    w_safe = torch.where(small, torch.ones_like(w), w)
    ramp = torch.where(
        small,
        delta * (1.0 + w * delta / 2.0),
        torch.expm1(w_safe * delta) / w_safe,
    )
    cumulative = torch.exp(alpha) * ramp
    return alpha + w * delta - cumulative, cumulative


# --------------------------------------------------
# MODEL
# --------------------------------------------------
class RppModel(Checkpointable):
    kind = "rpp"

    def __init__(
        self,
        hidden: int = 16,
        cell: str = "gru",
        n_covariates: int = 0,
        normalizer: NormalizationSpec | None = None,
        seed: int = 0,
        include_tail: bool = False,
    ) -> None:
        if cell not in ("gru", "lstm"):
            raise DataError(f"arrival cell must be gru or lstm, got '{cell}'")
        self.hidden = hidden
        self.cell = cell
        self.n_covariates = n_covariates
        self.normalizer = normalizer or NormalizationSpec(1.0)
        self.seed = seed
        self.include_tail = include_tail

        generator = torch.Generator().manual_seed(seed)
        self.cell_spec = LayerSpec(cast(LayerKind, cell), 1 + n_covariates, hidden)
        self.params = ParamSet()
        init_layer(self.cell_spec, self.params, "cell", generator)
        self.params.add("head.v", (hidden,))
        self.params.add("head.w", (1,))
        self.params.add("head.b", (1,))

    @property
    def time_scale(self) -> float:
        return self.normalizer.time_scale

    @override
    def describe(self) -> dict[str, Any]:
        return {
            "hidden": self.hidden,
            "cell": self.cell,
            "n_covariates": self.n_covariates,
            "normalizer": self.normalizer.to_dict(),
            "seed": self.seed,
            "include_tail": self.include_tail,
        }

    @classmethod
    @override
    def from_description(cls, meta: dict[str, Any]) -> Self:
        return cls(
            hidden=int(meta["hidden"]),
            cell=str(meta["cell"]),
            n_covariates=int(meta["n_covariates"]),
            normalizer=NormalizationSpec.from_dict(meta["normalizer"]),
            seed=int(meta["seed"]),
            include_tail=bool(meta["include_tail"]),
        )

    # ---- recurrence ---------------------------------------------------
    def zero_state(self) -> Recurrent:
        h = torch.zeros(self.hidden, dtype=DTYPE)
        return h, (torch.zeros(self.hidden, dtype=DTYPE) if self.cell == "lstm" else None)

    def _step(self, x: torch.Tensor, state: Recurrent) -> Recurrent:
        h, c = state
        view = self.params.view("cell")
        if self.cell == "lstm":
            assert c is not None
            return step_lstm(self.cell_spec, view, x, (h, c))
        return step_gru(self.cell_spec, view, x, h), None

    def inputs(self, trace: QueueTrace) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-event features (log(1 + delta), x) and normalized inter-arrivals,
        delta_0 measured from time 0."""
        if trace.n_covariates != self.n_covariates:
            raise DataError(
                f"trace has {trace.n_covariates} covariates, model expects {self.n_covariates}"
            )
        norm = apply_normalizer(self.normalizer, trace)
        deltas = np.diff(norm.arrivals, prepend=0.0)
        features = np.column_stack([np.log1p(deltas), norm.covariates])
        return torch.from_numpy(features), torch.from_numpy(deltas)

    def unroll(
        self, features: torch.Tensor, state: Recurrent
    ) -> tuple[torch.Tensor, torch.Tensor, Recurrent]:
        """States before each event (m, H), states after each event (m, H), final state."""
        before, after = [], []
        for j in range(features.shape[0]):
            before.append(state[0])
            state = self._step(features[j], state)
            after.append(state[0])
        if not before:
            empty = torch.zeros((0, self.hidden), dtype=DTYPE)
            return empty, empty, state
        return torch.stack(before), torch.stack(after), state

    def head_alpha(self, hs: torch.Tensor) -> torch.Tensor:
        """Normalized-units alpha for each state row."""
        return hs @ self.params["head.v"] + self.params["head.b"][0]

    @property
    def slope(self) -> torch.Tensor:
        return self.params["head.w"][0]

    # ---- training -----------------------------------------------------
    def fit(
        self,
        traces: Sequence[QueueTrace],
        *,
        epochs: int = 20,
        lr: float = DEFAULT_LR,
        bptt: int = DEFAULT_BPTT,
        validation_fraction: float = DEFAULT_TEST_FRACTION,
        checkpoint: Path | None = None,
    ) -> list[dict[str, float]]:
        """Maximize sum log f*(delta_{j+1} | h_j) by truncated BPTT."""
        for trace in traces:
            if len(trace) < 2:
                raise DataError(f"need at least 2 arrivals per trace, got {len(trace)}")

        optim = Adam(self.params, lr=lr)
        guard = DivergenceGuard(self, checkpoint)
        prepared = [(trace, *self.inputs(trace)) for trace in traces]
        history: list[dict[str, float]] = []

        for epoch in range(1, epochs + 1):
            total, count = 0.0, 0
            for trace, features, deltas in prepared:
                n = len(trace)
                n_train = n - _n_validation(n, validation_fraction)
                state = self.zero_state()
                for start in range(0, n_train, bptt):
                    stop = min(start + bptt, n_train)
                    self.params.zero_grad()
                    before, _, state = self.unroll(features[start:stop], state)
                    log_f, _ = log_density_terms(
                        self.head_alpha(before), self.slope, deltas[start:stop]
                    )
                    loss = -log_f.sum()
                    if self.include_tail and stop == n_train:
                        loss = loss + self._tail_term(trace, state, n_train)
                    guard.check(loss, "rpp")

                    backward(loss / (stop - start), self.params)
                    try:
                        optim.step()
                    except DivergenceError as e:
                        guard.abort(str(e))

                    state = _detach(state)
                    total += float(loss.detach())
                    count += stop - start

            guard.commit()
            record = {"epoch": float(epoch), "train_nll": total / max(count, 1)}
            heldout = self._heldout_score(prepared, validation_fraction)
            if heldout is not None:
                record["heldout_log_f"] = heldout
            history.append(record)
            logger.info(
                "rpp epoch %d/%d  train nll %.5f%s",
                epoch,
                epochs,
                record["train_nll"],
                f"  held-out log f* {heldout:.5f}" if heldout is not None else "",
            )
        return history

    def _tail_term(self, trace: QueueTrace, state: Recurrent, n_train: int) -> torch.Tensor:
        """Integrated intensity over the open interval closing the training window.

        The window ends at the horizon, or at the first held-out arrival.
        """
        end = trace.horizon if n_train == len(trace) else trace.events[n_train].arrival_time
        open_interval = (end - trace.events[n_train - 1].arrival_time) / self.time_scale
        alpha = self.head_alpha(state[0].unsqueeze(0))
        _, cumulative = log_density_terms(
            alpha, self.slope, torch.tensor([open_interval], dtype=DTYPE)
        )
        return cumulative.sum()

    def _heldout_score(
        self,
        prepared: list[tuple[QueueTrace, torch.Tensor, torch.Tensor]],
        validation_fraction: float,
    ) -> float | None:
        values = []
        for trace, features, deltas in prepared:
            n_val = _n_validation(len(trace), validation_fraction)
            if n_val == 0:
                continue
            with torch.no_grad():
                before, _, _ = self.unroll(features, self.zero_state())
                log_f, _ = log_density_terms(self.head_alpha(before), self.slope, deltas)
            values.append(log_f[-n_val:].numpy() - math.log(self.time_scale))
        if not values:
            return None
        return float(np.concatenate(values).mean())

    # ---- inference ----------------------------------------------------
    def score(self, trace: QueueTrace) -> np.ndarray:
        """log f* of every observed inter-arrival in original units."""
        features, deltas = self.inputs(trace)
        with torch.no_grad():
            before, _, _ = self.unroll(features, self.zero_state())
            log_f, _ = log_density_terms(self.head_alpha(before), self.slope, deltas)
        return log_f.numpy() - math.log(self.time_scale)

    def hidden_states(self, trace: QueueTrace) -> torch.Tensor:
        """h_i after each arrival i, detached, shape (n, H)."""
        features, _ = self.inputs(trace)
        with torch.no_grad():
            _, after, _ = self.unroll(features, self.zero_state())
        return after.detach()

    def _to_state(self, h: torch.Tensor, c: torch.Tensor | None, last_arrival: float) -> RppState:
        with torch.no_grad():
            alpha_norm = float(self.head_alpha(h.unsqueeze(0))[0])
            w_norm = float(self.slope)
        scale = self.time_scale
        return RppState(
            alpha=alpha_norm - math.log(scale),
            w=w_norm / scale,
            last_arrival=last_arrival,
            h=h.detach(),
            c=None if c is None else c.detach(),
        )

    def initial_state(self) -> RppState:
        h, c = self.zero_state()
        return self._to_state(h, c, 0.0)

    def state_sequence(self, trace: QueueTrace) -> list[RppState]:
        """State after each arrival."""
        features, _ = self.inputs(trace)
        states = []
        state = self.zero_state()
        with torch.no_grad():
            for j, event in enumerate(trace.events):
                state = self._step(features[j], state)
                states.append(self._to_state(state[0], state[1], event.arrival_time))
        return states

    def advance(
        self, state: RppState, arrival: float, covariates: Sequence[float] = ()
    ) -> RppState:
        delta = arrival - state.last_arrival
        if delta < 0:
            raise SamplingError(f"arrival {arrival} precedes {state.last_arrival}")
        x = np.zeros(self.n_covariates)
        if self.n_covariates and covariates:
            x = (np.asarray(covariates, dtype=np.float64) - self.normalizer.covariate_means) / (
                np.asarray(self.normalizer.covariate_stds)
            )
        feature = torch.from_numpy(
            np.concatenate([[math.log1p(delta / self.time_scale)], x])
        )
        assert state.h is not None
        with torch.no_grad():
            h, c = self._step(feature, (state.h, state.c))
        return self._to_state(h, c, arrival)

    def sample_path(
        self,
        horizon: float,
        seed: int,
        history: QueueTrace | None = None,
    ) -> np.ndarray:
        """Inverse-transform sampling of arrivals after `history` up to `horizon`.

        Sampled arrivals carry zero (mean) covariates.
        """
        rng = np.random.default_rng(seed)
        if history is not None and len(history):
            state = self.state_sequence(history)[-1]
        else:
            state = self.initial_state()

        times: list[float] = []
        while True:
            tau = inverse_cdf_sample(state, float(rng.random()))
            if tau is None:
                logger.debug("defective law, no further arrival after %g", state.last_arrival)
                break
            t = state.last_arrival + tau
            if t > horizon:
                break
            times.append(t)
            state = self.advance(state, t)
        return np.asarray(times, dtype=np.float64)


def _n_validation(n: int, fraction: float) -> int:
    if fraction <= 0 or n < 3:
        return 0
    return max(1, min(n - 2, round(n * fraction)))


def _detach(state: Recurrent) -> Recurrent:
    h, c = state
    return h.detach(), None if c is None else c.detach()


def train_rpp(
    traces: Sequence[QueueTrace],
    *,
    hidden: int = 16,
    cell: str = "gru",
    epochs: int = 20,
    lr: float = DEFAULT_LR,
    bptt: int = DEFAULT_BPTT,
    validation_fraction: float = DEFAULT_TEST_FRACTION,
    include_tail: bool = False,
    seed: int = 0,
    checkpoint: Path | None = None,
) -> RppModel:
    if not traces:
        raise DataError("no traces to train on")
    model = RppModel(
        hidden=hidden,
        cell=cell,
        n_covariates=traces[0].n_covariates,
        normalizer=fit_normalizer(traces),
        seed=seed,
        include_tail=include_tail,
    )
    model.fit(
        traces,
        epochs=epochs,
        lr=lr,
        bptt=bptt,
        validation_fraction=validation_fraction,
        checkpoint=checkpoint,
    )
    return model
