"""Mempool backlog model.

Three parts share teacher-forced recurrent states computed from the data:
the backlog recurrence h^U over (eps, tau_i, u_i) with a head for u_{i+1};
a recurrent point process for block creation whose log-intensity after
block j reads both h^M_j and h^U_{j-1}; and a head for the accepted count
b_{i+1} over (h^M_i, h^U_{i-1}). `nms-g` uses Gamma heads and likelihood,
`ams` noise-injected MLPs trained against critics.

Counts are positive reals. The state h^U_j consumes the gap to block j+1,
so quantities describing block j+1 read h^U_{j-1}.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from typing_extensions import Self, override

from servtime._types import MempoolSeries, MempoolVariant
from servtime.core.constants import (
    CRITIC_COLLAPSE,
    DEFAULT_BPTT,
    DEFAULT_MC_SAMPLES,
    DEFAULT_MEMPOOL_LR,
    POSITIVE_FLOOR,
)
from servtime.core.exceptions import ConfigError, DataError, DivergenceError
from servtime.models.advserve import AdvConfig, lipschitz_penalty, match_deviation, wasserstein_loss
from servtime.models.base import Checkpointable, DivergenceGuard
from servtime.models.families import Gamma, positive
from servtime.models.rpp import RppState, expected_next, log_density_terms
from servtime.nn.autodiff import backward
from servtime.nn.layers import LayerSpec, draw_noise, forward_mlp, init_layer, softplus, step_lstm
from servtime.nn.optim import Adam
from servtime.nn.params import DTYPE, ParamSet, ParamTensor

logger = logging.getLogger(__name__)

VARIANTS: tuple[MempoolVariant, ...] = ("nms-g", "ams")

# (backlog state, backlog head, block state, accepted head)
VARIANT_SIZES: dict[str, tuple[int, int, int, int]] = {
    "nms-g": (16, 32, 62, 32),
    "ams": (20, 20, 10, 10),
}

LstmState = tuple[torch.Tensor, torch.Tensor]

_GAMMA = Gamma()


@dataclass(frozen=True)
class MempoolScales:
    unconfirmed: float = 1.0
    accepted: float = 1.0
    time: float = 1.0

    @classmethod
    def fit(cls, series: MempoolSeries) -> Self:
        def mean_or_one(values: np.ndarray) -> float:
            m = float(values.mean()) if values.size else 0.0
            return m if m > 0 else 1.0

        return cls(
            mean_or_one(series.unconfirmed),
            mean_or_one(series.accepted),
            mean_or_one(series.inter_block),
        )


@dataclass
class MempoolForecast:
    """One-step forecasts for blocks 1..n-1 of a series plus the step past its end."""

    block_times: np.ndarray
    unconfirmed: np.ndarray  # (n-1, n_samples)
    accepted: np.ndarray  # (n-1, n_samples), clamped to the matching backlog draw
    expected_gap: np.ndarray
    next_gap: float
    next_unconfirmed: float
    next_accepted: float

    @property
    def unconfirmed_mean(self) -> np.ndarray:
        return self.unconfirmed.mean(axis=1)

    @property
    def accepted_mean(self) -> np.ndarray:
        return self.accepted.mean(axis=1)


@dataclass
class _Teacher:
    """Normalized teacher-forcing tensors for a series of n blocks."""

    tau: torch.Tensor  # (n-1,) gap after block i
    u: torch.Tensor  # (n,)
    b: torch.Tensor  # (n,)
    block_features: torch.Tensor  # (n, 2)

    @property
    def steps(self) -> int:
        return self.tau.shape[0]


def gamma_nll(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -_GAMMA.log_pdf(p, torch.clamp(target, min=POSITIVE_FLOOR)).sum()


class MempoolModel(Checkpointable):
    kind = "mempool"

    def __init__(
        self,
        variant: MempoolVariant,
        u_state: int | None = None,
        u_hidden: int | None = None,
        m_state: int | None = None,
        m_hidden: int | None = None,
        config: AdvConfig | None = None,
        scales: MempoolScales | None = None,
        seed: int = 0,
    ) -> None:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown mempool variant '{variant}', expected one of {', '.join(VARIANTS)}")
        sizes = VARIANT_SIZES[variant]
        self.variant = variant
        self.u_state = u_state or sizes[0]
        self.u_hidden = u_hidden or sizes[1]
        self.m_state = m_state or sizes[2]
        self.m_hidden = m_hidden or sizes[3]
        self.config = config or AdvConfig()
        self.scales = scales or MempoolScales()
        self.seed = seed

        adversarial = variant == "ams"
        noise = self.config.noise_dim if adversarial else 0
        layers = 3 if adversarial else 1
        self.u_cell = LayerSpec("lstm", noise + 2, self.u_state)
        self.u_head = LayerSpec(
            "mlp", self.u_state, self.u_hidden, 1 if adversarial else 2, layers, noise_inject=adversarial
        )
        self.m_cell = LayerSpec("lstm", 2, self.m_state)
        self.acc_head = LayerSpec(
            "mlp",
            self.m_state + self.u_state + noise,
            self.m_hidden,
            1 if adversarial else 2,
            layers,
            noise_inject=adversarial,
        )

        generator = torch.Generator().manual_seed(seed)
        self.params = ParamSet()
        init_layer(self.u_cell, self.params, "u.cell", generator)
        init_layer(self.u_head, self.params, "u.head", generator)
        init_layer(self.m_cell, self.params, "m.cell", generator)
        self.params.add("m.intensity.v_m", (self.m_state,))
        self.params.add("m.intensity.v_u", (self.u_state,))
        self.params.add("m.intensity.w", (1,))
        self.params.add("m.intensity.b", (1,))
        init_layer(self.acc_head, self.params, "acc.head", generator)

        self.u_critic: LayerSpec | None = None
        self.acc_critic: LayerSpec | None = None
        if adversarial:
            self.u_critic = LayerSpec("mlp", 2, self.u_hidden, 1, 3)
            self.acc_critic = LayerSpec("mlp", 1, self.m_hidden, 1, 3)
            init_layer(self.u_critic, self.params, "u.critic", generator)
            init_layer(self.acc_critic, self.params, "acc.critic", generator)

        self.noise = torch.Generator().manual_seed(seed + 1)

    @override
    def describe(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "u_state": self.u_state,
            "u_hidden": self.u_hidden,
            "m_state": self.m_state,
            "m_hidden": self.m_hidden,
            "config": asdict(self.config),
            "scales": asdict(self.scales),
            "seed": self.seed,
        }

    @classmethod
    @override
    def from_description(cls, meta: dict[str, Any]) -> Self:
        return cls(
            variant=meta["variant"],
            u_state=int(meta["u_state"]),
            u_hidden=int(meta["u_hidden"]),
            m_state=int(meta["m_state"]),
            m_hidden=int(meta["m_hidden"]),
            config=AdvConfig(**meta["config"]),
            scales=MempoolScales(**meta["scales"]),
            seed=int(meta["seed"]),
        )

    @property
    def adversarial(self) -> bool:
        return self.variant == "ams"

    def zero_state(self, spec: LayerSpec, batch: int = 1) -> LstmState:
        shape = (batch, spec.hidden_dim)
        return torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE)

    def _eps(self, batch: int, noise: bool) -> torch.Tensor:
        dim = self.config.noise_dim if self.adversarial else 0
        if noise and dim:
            return torch.randn((batch, dim), generator=self.noise, dtype=DTYPE)
        return torch.zeros((batch, dim), dtype=DTYPE)

    def _head(self, spec: LayerSpec, prefix: str, inputs: torch.Tensor, noise: bool) -> torch.Tensor:
        if not self.adversarial:
            return positive(forward_mlp(spec, self.params.view(prefix), inputs))
        layer_noise = draw_noise(spec, (inputs.shape[0],), self.noise) if noise else None
        return softplus(forward_mlp(spec, self.params.view(prefix), inputs, layer_noise).squeeze(-1))

    # ---- the three parts ----------------------------------------------
    def step_u(
        self, tau: torch.Tensor, u: torch.Tensor, state: LstmState, noise: bool = True
    ) -> tuple[torch.Tensor, LstmState]:
        """Consume the normalized gap tau_i and backlog u_i (shape (B,)).

        Returns Gamma parameters (B, 2) for `nms-g` or samples (B,) for
        `ams`, both for u_{i+1} in units of `scales.unconfirmed`.
        """
        batch = u.shape[0]
        inputs = torch.cat([self._eps(batch, noise), tau.unsqueeze(-1), u.unsqueeze(-1)], dim=-1)
        state = step_lstm(self.u_cell, self.params.view("u.cell"), inputs, state)
        return self._head(self.u_head, "u.head", state[0], noise), state

    def step_blocks(self, b: torch.Tensor, gap: torch.Tensor, state: LstmState) -> LstmState:
        """LSTM step on (log1p b_i, log1p gap_i), both normalized."""
        features = torch.stack([torch.log1p(b), torch.log1p(gap)], dim=-1)
        return step_lstm(self.m_cell, self.params.view("m.cell"), features, state)

    def log_intensity_base(self, h_m: torch.Tensor, h_u: torch.Tensor) -> torch.Tensor:
        p = self.params
        return h_m @ p["m.intensity.v_m"] + h_u @ p["m.intensity.v_u"] + p["m.intensity.b"][0]

    @property
    def slope(self) -> torch.Tensor:
        return self.params["m.intensity.w"][0]

    def block_intensity(self, h_m: torch.Tensor, h_u: torch.Tensor, elapsed: torch.Tensor) -> torch.Tensor:
        """Block-creation intensity in normalized time, `elapsed` after the last block."""
        return torch.exp(self.log_intensity_base(h_m, h_u) + self.slope * elapsed)

    def block_state(self, h_m: torch.Tensor, h_u: torch.Tensor, last_block: float) -> RppState:
        """The next-block law as an RppState in original time units."""
        with torch.no_grad():
            alpha = float(self.log_intensity_base(h_m, h_u).mean())
            w = float(self.slope)
        return RppState(
            alpha=alpha - math.log(self.scales.time), w=w / self.scales.time, last_arrival=last_block
        )

    def generate_accepted(
        self, h_m: torch.Tensor, h_u_prev: torch.Tensor, noise: bool = True
    ) -> torch.Tensor:
        """Gamma parameters (`nms-g`) or samples (`ams`) for b_{i+1}, unclamped."""
        inputs = torch.cat([h_m, h_u_prev, self._eps(h_m.shape[0], noise)], dim=-1)
        return self._head(self.acc_head, "acc.head", inputs, noise)

    def critic_u(self, u: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        assert self.u_critic is not None
        inputs = torch.cat([u.unsqueeze(-1), tau], dim=-1)
        return forward_mlp(self.u_critic, self.params.view("u.critic"), inputs).squeeze(-1)

    def critic_accepted(self, b: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        assert self.acc_critic is not None
        inputs = torch.cat([b.unsqueeze(-1), x], dim=-1)
        return forward_mlp(self.acc_critic, self.params.view("acc.critic"), inputs).squeeze(-1)

    # ---- teacher forcing ----------------------------------------------
    def teacher(self, series: MempoolSeries) -> _Teacher:
        if len(series) < 2:
            raise DataError("a mempool series needs at least 2 blocks")
        gaps = torch.from_numpy(series.inter_block / self.scales.time)
        b = torch.from_numpy(series.accepted / self.scales.accepted)
        return _Teacher(
            tau=gaps[1:],
            u=torch.from_numpy(series.unconfirmed / self.scales.unconfirmed),
            b=b,
            block_features=torch.stack([b, gaps], dim=-1),
        )

    def unroll_u(
        self, data: _Teacher, window: slice, state: LstmState, noise: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor, LstmState]:
        """Head outputs and states h^U_i for steps i in `window` (batch 1)."""
        outs, hs = [], []
        for i in range(*window.indices(data.steps)):
            out, state = self.step_u(data.tau[i : i + 1], data.u[i : i + 1], state, noise)
            outs.append(out)
            hs.append(state[0])
        return torch.cat(outs), torch.cat(hs), state

    def unroll_blocks(self, data: _Teacher, window: slice, state: LstmState) -> tuple[torch.Tensor, LstmState]:
        hs = []
        for j in range(*window.indices(data.block_features.shape[0])):
            f = data.block_features[j : j + 1]
            state = self.step_blocks(f[:, 0], f[:, 1], state)
            hs.append(state[0])
        return torch.cat(hs), state

    def u_states(self, data: _Teacher) -> torch.Tensor:
        """h^U_{i-1} for every block i, zeros before the first, shape (n, u_state)."""
        with torch.no_grad():
            _, hs, _ = self.unroll_u(data, slice(0, data.steps), self.zero_state(self.u_cell))
        return torch.cat([torch.zeros((1, self.u_state), dtype=DTYPE), hs])

    def block_states(self, data: _Teacher) -> torch.Tensor:
        with torch.no_grad():
            hs, _ = self.unroll_blocks(data, slice(0, data.b.shape[0]), self.zero_state(self.m_cell))
        return hs

    # ---- objectives ---------------------------------------------------
    def block_nll(self, h_m: torch.Tensor, h_u_prev: torch.Tensor, gaps: torch.Tensor) -> torch.Tensor:
        """-sum log f*(gap to block j+1) under the combined intensity, normalized time."""
        log_f, _ = log_density_terms(self.log_intensity_base(h_m, h_u_prev), self.slope, gaps)
        return -log_f.sum()


def _step(
    optim: Adam, guard: DivergenceGuard, params: list[ParamTensor], loss: torch.Tensor, what: str
) -> None:
    guard.check(loss, what)
    backward(loss, params)
    try:
        optim.step()
    except DivergenceError as e:
        guard.abort(str(e))


class _Trainer:
    def __init__(self, model: MempoolModel, lr: float, bptt: int, checkpoint: Path | None) -> None:
        self.model = model
        self.bptt = bptt
        self.guard = DivergenceGuard(model, checkpoint)
        p = model.params
        self.groups = {
            "u": p.select("u.cell", "u.head"),
            "m": p.select("m.cell", "m.intensity"),
            "acc": p.select("acc.head"),
        }
        if model.adversarial:
            self.groups["u.critic"] = p.select("u.critic")
            self.groups["acc.critic"] = p.select("acc.critic")
        self.optims = {name: Adam(group, lr=lr) for name, group in self.groups.items()}

    def update(self, name: str, loss: torch.Tensor) -> float:
        _step(self.optims[name], self.guard, self.groups[name], loss, name)
        return float(loss.detach())

    def windows(self, n: int) -> list[slice]:
        return [slice(s, min(s + self.bptt, n)) for s in range(0, n, self.bptt)]

    def critic_update(
        self,
        name: str,
        critic: Any,
        real: tuple[torch.Tensor, torch.Tensor],
        fake: tuple[torch.Tensor, torch.Tensor],
    ) -> float:
        cfg = self.model.config
        for _ in range(cfg.critic_steps):
            w = wasserstein_loss(critic, real, fake)
            l1 = lipschitz_penalty(critic, real, fake, self.model.noise)
            self.update(name, -(w - cfg.lambda1 * l1))
        return float(l1.detach())

    def backlog_epoch(self, data: _Teacher) -> tuple[float, float]:
        model = self.model
        total, penalty = 0.0, 0.0
        state = model.zero_state(model.u_cell)
        for window in self.windows(data.steps):
            targets = data.u[window.start + 1 : window.stop + 1]
            tau = data.tau[window].unsqueeze(-1)
            if model.adversarial:
                with torch.no_grad():
                    fake, _, _ = model.unroll_u(data, window, state)
                penalty = max(
                    penalty, self.critic_update("u.critic", model.critic_u, (targets, tau), (fake, tau))
                )
                fake, _, next_state = model.unroll_u(data, window, state)
                loss = -model.critic_u(fake, tau).mean() + model.config.lambda3 * match_deviation(targets, fake)
            else:
                p, _, next_state = model.unroll_u(data, window, state)
                loss = gamma_nll(p, targets)
            total += self.update("u", loss)
            state = (next_state[0].detach(), next_state[1].detach())
        return total, penalty

    def block_epoch(self, data: _Teacher, h_u_prev: torch.Tensor) -> float:
        model = self.model
        total = 0.0
        state = model.zero_state(model.m_cell)
        for window in self.windows(data.steps):
            h_m, next_state = model.unroll_blocks(data, window, state)
            total += self.update("m", model.block_nll(h_m, h_u_prev[window], data.tau[window]))
            state = (next_state[0].detach(), next_state[1].detach())
        return total

    def accepted_epoch(self, data: _Teacher, h_m: torch.Tensor, h_u_prev: torch.Tensor) -> tuple[float, float]:
        model = self.model
        total, penalty = 0.0, 0.0
        for window in self.windows(data.steps):
            targets = data.b[window.start + 1 : window.stop + 1]
            none = torch.zeros((targets.shape[0], 0), dtype=DTYPE)
            if model.adversarial:
                with torch.no_grad():
                    fake = model.generate_accepted(h_m[window], h_u_prev[window])
                penalty = max(
                    penalty,
                    self.critic_update("acc.critic", model.critic_accepted, (targets, none), (fake, none)),
                )
                fake = model.generate_accepted(h_m[window], h_u_prev[window])
                loss = -model.critic_accepted(fake, none).mean()
            else:
                loss = gamma_nll(model.generate_accepted(h_m[window], h_u_prev[window]), targets)
            total += self.update("acc", loss)
        return total, penalty


def train_mempool(
    variant: MempoolVariant,
    series: MempoolSeries,
    config: AdvConfig | None = None,
    *,
    epochs: int = 50,
    lr: float = DEFAULT_MEMPOOL_LR,
    bptt: int = DEFAULT_BPTT,
    seed: int = 0,
    checkpoint: Path | None = None,
    model: MempoolModel | None = None,
) -> tuple[MempoolModel, list[dict[str, float]]]:
    """Fit the backlog, block and accepted objectives in that order every epoch."""
    if len(series) < 3:
        raise DataError(f"mempool training needs at least 3 blocks, got {len(series)}")
    if model is None:
        model = MempoolModel(variant, config=config, scales=MempoolScales.fit(series), seed=seed)
    data = model.teacher(series)
    trainer = _Trainer(model, lr, bptt, checkpoint)
    history: list[dict[str, float]] = []

    for epoch in range(1, epochs + 1):
        u_loss, u_penalty = trainer.backlog_epoch(data)
        h_u_prev = model.u_states(data)
        block_loss = trainer.block_epoch(data, h_u_prev)
        acc_loss, acc_penalty = trainer.accepted_epoch(data, model.block_states(data), h_u_prev)
        trainer.guard.commit()

        steps = data.steps
        record = {
            "epoch": float(epoch),
            "unconfirmed_loss": u_loss / steps,
            "block_nll": block_loss / steps,
            "accepted_loss": acc_loss / steps,
        }
        history.append(record)
        if max(u_penalty, acc_penalty) > CRITIC_COLLAPSE:
            logger.warning("critic penalty exceeds %.0e at epoch %d", CRITIC_COLLAPSE, epoch)
        logger.info(
            "%s epoch %d/%d  unconfirmed %.5f  blocks %.5f  accepted %.5f",
            variant,
            epoch,
            epochs,
            record["unconfirmed_loss"],
            record["block_nll"],
            record["accepted_loss"],
        )
    return model, history


def _draw(model: MempoolModel, out: torch.Tensor, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """(B, n_samples)-consistent draws: adversarial chains already are samples."""
    if model.adversarial:
        return out.numpy()
    p = out[0].numpy()
    return rng.gamma(p[0], 1.0 / p[1], size=n_samples)


def forecast_mempool(
    model: MempoolModel,
    series: MempoolSeries,
    n_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
) -> MempoolForecast:
    """One-step forecasts of u_{i+1} and b_{i+1} given the history through block i
    and the observed gap tau_i; `ams` runs `n_samples` chains of h^U."""
    if n_samples < 1:
        raise DataError(f"n_samples must be >= 1, got {n_samples}")
    model.noise.manual_seed(seed)
    rng = np.random.default_rng(seed)
    data = model.teacher(series)
    chains = n_samples if model.adversarial else 1
    scales = model.scales
    times = series.block_times

    u_draws, b_draws, gaps = [], [], []
    u_state = model.zero_state(model.u_cell, chains)
    m_state = model.zero_state(model.m_cell)
    with torch.no_grad():
        for i in range(len(series)):
            f = data.block_features[i : i + 1]
            m_state = model.step_blocks(f[:, 0], f[:, 1], m_state)
            h_m = m_state[0].expand(chains, -1)
            h_u_prev = u_state[0]
            gap, _ = expected_next(model.block_state(h_m, h_u_prev, float(times[i])))
            if not math.isfinite(gap):
                gap = scales.time
            acc = _draw(model, model.generate_accepted(h_m, h_u_prev), rng, n_samples)

            if i < data.steps:
                tau = data.tau[i].expand(chains)
            else:
                tau = torch.full((chains,), gap / scales.time, dtype=DTYPE)
            out, u_state = model.step_u(tau, data.u[i].expand(chains), u_state)
            u_next = _draw(model, out, rng, n_samples) * scales.unconfirmed
            acc = np.minimum(acc * scales.accepted, u_next)

            u_draws.append(u_next)
            b_draws.append(acc)
            gaps.append(gap)

    return MempoolForecast(
        block_times=times[1:],
        unconfirmed=np.stack(u_draws[:-1]),
        accepted=np.stack(b_draws[:-1]),
        expected_gap=np.asarray(gaps[:-1]),
        next_gap=float(gaps[-1]),
        next_unconfirmed=float(np.mean(u_draws[-1])),
        next_accepted=float(np.mean(b_draws[-1])),
    )
