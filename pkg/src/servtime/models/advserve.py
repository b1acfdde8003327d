"""Adversarial service models.

`as` maps (h^a, x, eps) through a noise-injected MLP; `ras` runs an LSTM
transition over (eps, h^a, x) and reads samples off its state; `ras_nh`
drops h^a from the transition. Generators are trained against a critic
f(s, x) with the Wasserstein objective plus the Lipschitz, censoring and
matching penalties.
"""

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from typing_extensions import Self, override

from servtime._types import AdvVariant, NormalizationSpec, QueueTrace, ServicePrediction
from servtime.core.constants import (
    CRITIC_COLLAPSE,
    CRITIC_STEPS,
    DEFAULT_BPTT,
    DEFAULT_LR,
    DEFAULT_MC_SAMPLES,
    LAMBDA_CENSOR,
    LAMBDA_LIPSCHITZ,
    LAMBDA_MATCH,
    NOISE_DIM,
)
from servtime.core.exceptions import ConfigError, DataError, DivergenceError
from servtime.models.base import DivergenceGuard, ServiceModel
from servtime.models.nsx import conditioning, service_targets
from servtime.models.rpp import RppModel
from servtime.nn.autodiff import backward
from servtime.nn.layers import LayerSpec, draw_noise, forward_mlp, init_layer, softplus, step_lstm
from servtime.nn.optim import Adam
from servtime.nn.params import DTYPE, ParamSet

logger = logging.getLogger(__name__)

VARIANTS: tuple[AdvVariant, ...] = ("as", "ras", "ras_nh")

Critic = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
LstmState = tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class AdvConfig:
    lambda1: float = LAMBDA_LIPSCHITZ
    lambda2: float = LAMBDA_CENSOR
    lambda3: float = LAMBDA_MATCH
    critic_steps: int = CRITIC_STEPS
    noise_dim: int = NOISE_DIM

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("penalty weights must be nonnegative")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be positive")
        if self.noise_dim < 0:
            raise ConfigError("noise_dim must be nonnegative")


# --------------------------------------------------
# OBJECTIVE TERMS
# --------------------------------------------------
def wasserstein_loss(
    critic: Critic,
    real: tuple[torch.Tensor, torch.Tensor],
    fake: tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    """E_real f - E_fake f; the critic ascends it."""
    if real[0].numel() == 0 or fake[0].numel() == 0:
        raise DataError("wasserstein loss needs nonempty batches")
    return critic(*real).mean() - critic(*fake).mean()


def lipschitz_penalty(
    critic: Critic,
    real: tuple[torch.Tensor, torch.Tensor],
    fake: tuple[torch.Tensor, torch.Tensor],
    generator: torch.Generator,
) -> torch.Tensor:
    """One-sided penalty E[max(0, |df/ds| - 1)^2] at random real/fake interpolates.

    Covariates at an interpolate come from its real member.
    """
    real_s, real_x = real
    fake_s = fake[0]
    n = min(real_s.shape[0], fake_s.shape[0])
    if n == 0:
        raise DataError("lipschitz penalty needs nonempty batches")
    real_idx = torch.randperm(real_s.shape[0], generator=generator)[:n]
    fake_idx = torch.randperm(fake_s.shape[0], generator=generator)[:n]
    u = torch.rand(n, generator=generator, dtype=DTYPE)

    s_hat = (u * real_s[real_idx] + (1.0 - u) * fake_s[fake_idx]).detach().requires_grad_(True)
    scores = critic(s_hat, real_x[real_idx])
    (grad,) = torch.autograd.grad(scores.sum(), s_hat, create_graph=True)
    return (F.relu(grad.abs() - 1.0) ** 2).mean()


def censor_hinge(samples: torch.Tensor, windows: torch.Tensor) -> torch.Tensor:
    """E[max(0, T - s)]; zero on an empty batch."""
    if samples.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return F.relu(windows - samples).mean()


def match_deviation(observed: torch.Tensor, samples: torch.Tensor) -> torch.Tensor:
    """E|s_obs - s|; zero on an empty batch."""
    if samples.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return (observed - samples).abs().mean()


def full_objective(
    loss: torch.Tensor,
    l1: torch.Tensor,
    l2: torch.Tensor,
    l3: torch.Tensor,
    config: AdvConfig,
) -> torch.Tensor:
    return loss + config.lambda1 * l1 + config.lambda2 * l2 + config.lambda3 * l3


# --------------------------------------------------
# MODEL
# --------------------------------------------------
class AdversarialModel(ServiceModel):
    kind = "adv"

    def __init__(
        self,
        variant: AdvVariant,
        state_dim: int,
        n_covariates: int = 0,
        hidden: int = 100,
        layers: int = 3,
        transition_dim: int = 16,
        config: AdvConfig | None = None,
        normalizer: NormalizationSpec | None = None,
        service_scale: float = 1.0,
        seed: int = 0,
    ) -> None:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}', expected one of {', '.join(VARIANTS)}")
        self.variant = variant
        self.state_dim = state_dim
        self.n_covariates = n_covariates
        self.hidden = hidden
        self.layers = layers
        self.transition_dim = transition_dim
        self.config = config or AdvConfig()
        self.normalizer = normalizer or NormalizationSpec(1.0)
        self.service_scale = service_scale
        self.seed = seed

        noise = self.config.noise_dim
        generator = torch.Generator().manual_seed(seed)
        self.params = ParamSet()
        if variant == "as":
            self.transition_spec = None
            self.gen_spec = LayerSpec(
                "mlp", state_dim + n_covariates + noise, hidden, 1, layers, noise_inject=True
            )
        else:
            arrival = state_dim if variant == "ras" else 0
            self.transition_spec = LayerSpec("lstm", noise + arrival + n_covariates, transition_dim)
            init_layer(self.transition_spec, self.params, "gen.transition", generator)
            self.gen_spec = LayerSpec("mlp", transition_dim, hidden, 1, layers, noise_inject=True)
        init_layer(self.gen_spec, self.params, "gen.mlp", generator)

        self.critic_spec = LayerSpec("mlp", 1 + n_covariates, hidden, 1, layers)
        init_layer(self.critic_spec, self.params, "critic", generator)

        self.noise = torch.Generator().manual_seed(seed + 1)

    @override
    def describe(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "state_dim": self.state_dim,
            "n_covariates": self.n_covariates,
            "hidden": self.hidden,
            "layers": self.layers,
            "transition_dim": self.transition_dim,
            "config": asdict(self.config),
            "normalizer": self.normalizer.to_dict(),
            "service_scale": self.service_scale,
            "seed": self.seed,
        }

    @classmethod
    @override
    def from_description(cls, meta: dict[str, Any]) -> Self:
        return cls(
            variant=meta["variant"],
            state_dim=int(meta["state_dim"]),
            n_covariates=int(meta["n_covariates"]),
            hidden=int(meta["hidden"]),
            layers=int(meta["layers"]),
            transition_dim=int(meta["transition_dim"]),
            config=AdvConfig(**meta["config"]),
            normalizer=NormalizationSpec.from_dict(meta["normalizer"]),
            service_scale=float(meta["service_scale"]),
            seed=int(meta["seed"]),
        )

    @property
    def recurrent(self) -> bool:
        return self.transition_spec is not None

    def critic(self, s: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        inputs = torch.cat([s.unsqueeze(-1), x], dim=-1)
        return forward_mlp(self.critic_spec, self.params.view("critic"), inputs).squeeze(-1)

    def zero_transition(self, batch: int) -> LstmState:
        assert self.transition_spec is not None
        shape = (batch, self.transition_dim)
        return torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE)

    def _eps(self, batch: int, noise: bool) -> torch.Tensor:
        if noise:
            return torch.randn((batch, self.config.noise_dim), generator=self.noise, dtype=DTYPE)
        return torch.zeros((batch, self.config.noise_dim), dtype=DTYPE)

    def _output(self, inputs: torch.Tensor, noise: bool) -> torch.Tensor:
        layer_noise = draw_noise(self.gen_spec, (inputs.shape[0],), self.noise) if noise else None
        raw = forward_mlp(self.gen_spec, self.params.view("gen.mlp"), inputs, layer_noise)
        return softplus(raw.squeeze(-1))

    def generate(
        self,
        h_a: torch.Tensor,
        x: torch.Tensor,
        phi_prev: LstmState | None = None,
        noise: bool = True,
    ) -> tuple[torch.Tensor, LstmState | None]:
        """Service samples (in units of `service_scale`) for a batch of events,
        and for recurrent variants the next transition state."""
        batch = h_a.shape[0]
        eps = self._eps(batch, noise)
        if self.transition_spec is None:
            return self._output(torch.cat([h_a, x, eps], dim=-1), noise), None

        parts = [eps, h_a, x] if self.variant == "ras" else [eps, x]
        if phi_prev is None:
            phi_prev = self.zero_transition(batch)
        phi = step_lstm(
            self.transition_spec, self.params.view("gen.transition"), torch.cat(parts, dim=-1), phi_prev
        )
        return self._output(phi[0], noise), phi

    def unroll(
        self,
        h_a: torch.Tensor,
        x: torch.Tensor,
        phi: LstmState,
        noise: bool = True,
    ) -> tuple[torch.Tensor, LstmState]:
        """One sample per event along a sequence; h_a, x are (m, .) and phi is batch 1."""
        samples = []
        for j in range(h_a.shape[0]):
            s, next_phi = self.generate(h_a[j : j + 1], x[j : j + 1], phi, noise)
            assert next_phi is not None
            phi = next_phi
            samples.append(s)
        if not samples:
            return torch.zeros(0, dtype=DTYPE), phi
        return torch.cat(samples), phi

    # ---- penalties over this generator --------------------------------
    def censor_penalty(
        self, h_a: torch.Tensor, x: torch.Tensor, windows: torch.Tensor, phi_prev: LstmState | None = None
    ) -> torch.Tensor:
        if windows.numel() == 0:
            return torch.zeros((), dtype=DTYPE)
        samples, _ = self.generate(h_a, x, phi_prev)
        return censor_hinge(samples, windows)

    def match_penalty(
        self, h_a: torch.Tensor, x: torch.Tensor, observed: torch.Tensor, phi_prev: LstmState | None = None
    ) -> torch.Tensor:
        if observed.numel() == 0:
            return torch.zeros((), dtype=DTYPE)
        samples, _ = self.generate(h_a, x, phi_prev)
        return match_deviation(observed, samples)

    # ---- training -----------------------------------------------------
    def _critic_step(
        self,
        optim: Adam,
        guard: DivergenceGuard,
        real: tuple[torch.Tensor, torch.Tensor],
        fake: tuple[torch.Tensor, torch.Tensor],
    ) -> tuple[float, float]:
        critic_params = self.params.select("critic")
        self.params.zero_grad()
        w_loss = wasserstein_loss(self.critic, real, fake)
        l1 = lipschitz_penalty(self.critic, real, fake, self.noise)
        loss = -(w_loss - self.config.lambda1 * l1)
        guard.check(loss, "critic")
        backward(loss, critic_params)
        try:
            optim.step()
        except DivergenceError as e:
            guard.abort(str(e))
        return float(w_loss.detach()), float(l1.detach())

    def _generator_step(
        self, optim: Adam, guard: DivergenceGuard, loss: torch.Tensor
    ) -> None:
        self.params.zero_grad()
        guard.check(loss, "generator")
        backward(loss, self.params.select("gen"))
        try:
            optim.step()
        except DivergenceError as e:
            guard.abort(str(e))

    @override
    def fit(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        *,
        epochs: int = 50,
        lr: float = DEFAULT_LR,
        batch_size: int = 256,
        bptt: int = DEFAULT_BPTT,
        checkpoint: Path | None = None,
    ) -> list[dict[str, float]]:
        inputs = conditioning(arrival_states, trace, self.normalizer)
        h_a, x = inputs[:, : self.state_dim], inputs[:, self.state_dim :]
        values, censored = service_targets(trace)
        targets = torch.from_numpy(values / self.service_scale)
        mask = torch.from_numpy(censored)
        if bool(mask.all()):
            raise DataError("adversarial training needs at least one uncensored service")

        gen_optim = Adam(self.params.select("gen"), lr=lr)
        critic_optim = Adam(self.params.select("critic"), lr=lr)
        guard = DivergenceGuard(self, checkpoint)
        rng = np.random.default_rng(self.seed)
        history: list[dict[str, float]] = []

        for epoch in range(1, epochs + 1):
            if self.recurrent:
                stats = self._epoch_recurrent(
                    h_a, x, targets, mask, bptt, gen_optim, critic_optim, guard
                )
            else:
                stats = self._epoch_static(
                    h_a, x, targets, mask, batch_size, rng, gen_optim, critic_optim, guard
                )
            guard.commit()

            record = {"epoch": float(epoch), **stats}
            history.append(record)
            if stats["lipschitz"] > CRITIC_COLLAPSE:
                logger.warning(
                    "critic penalty %.3g exceeds %.0e at epoch %d", stats["lipschitz"], CRITIC_COLLAPSE, epoch
                )
            logger.info(
                "%s epoch %d/%d  W %.5f  L1 %.5f  L2 %.5f  L3 %.5f",
                self.variant,
                epoch,
                epochs,
                stats["wasserstein"],
                stats["lipschitz"],
                stats["censor"],
                stats["match"],
            )
        return history

    def _epoch_static(
        self,
        h_a: torch.Tensor,
        x: torch.Tensor,
        targets: torch.Tensor,
        mask: torch.Tensor,
        batch_size: int,
        rng: np.random.Generator,
        gen_optim: Adam,
        critic_optim: Adam,
        guard: DivergenceGuard,
    ) -> dict[str, float]:
        observed = np.flatnonzero(~mask.numpy())
        windows = np.flatnonzero(mask.numpy())
        sums = {"wasserstein": 0.0, "lipschitz": 0.0, "censor": 0.0, "match": 0.0}
        steps = 0

        order = rng.permutation(observed)
        for start in range(0, order.size, batch_size):
            batch = torch.from_numpy(order[start : start + batch_size])
            for _ in range(self.config.critic_steps):
                critic_batch = torch.from_numpy(rng.choice(observed, size=batch.numel()))
                with torch.no_grad():
                    fake_s, _ = self.generate(h_a[critic_batch], x[critic_batch])
                real = (targets[critic_batch], x[critic_batch])
                w, l1 = self._critic_step(critic_optim, guard, real, (fake_s, x[critic_batch]))

            fake_s, _ = self.generate(h_a[batch], x[batch])
            adversarial = -self.critic(fake_s, x[batch]).mean()
            l3 = match_deviation(targets[batch], fake_s)
            if windows.size:
                cens = torch.from_numpy(rng.choice(windows, size=min(batch.numel(), windows.size)))
                l2 = self.censor_penalty(h_a[cens], x[cens], targets[cens])
            else:
                l2 = torch.zeros((), dtype=DTYPE)
            loss = adversarial + self.config.lambda2 * l2 + self.config.lambda3 * l3
            self._generator_step(gen_optim, guard, loss)

            steps += 1
            sums["wasserstein"] += w
            sums["lipschitz"] += l1
            sums["censor"] += float(l2.detach())
            sums["match"] += float(l3.detach())
        return {k: v / max(steps, 1) for k, v in sums.items()}

    def _epoch_recurrent(
        self,
        h_a: torch.Tensor,
        x: torch.Tensor,
        targets: torch.Tensor,
        mask: torch.Tensor,
        bptt: int,
        gen_optim: Adam,
        critic_optim: Adam,
        guard: DivergenceGuard,
    ) -> dict[str, float]:
        sums = {"wasserstein": 0.0, "lipschitz": 0.0, "censor": 0.0, "match": 0.0}
        steps = 0
        phi = self.zero_transition(1)
        n = targets.shape[0]

        for start in range(0, n, bptt):
            window = slice(start, min(start + bptt, n))
            observed = ~mask[window]
            real = (targets[window][observed], x[window][observed])

            w = l1 = 0.0
            if observed.any():
                for _ in range(self.config.critic_steps):
                    with torch.no_grad():
                        fake_s, _ = self.unroll(h_a[window], x[window], phi)
                    w, l1 = self._critic_step(
                        critic_optim, guard, real, (fake_s[observed], real[1])
                    )

            fake_s, next_phi = self.unroll(h_a[window], x[window], phi)
            loss = torch.zeros((), dtype=DTYPE)
            l3 = match_deviation(real[0], fake_s[observed])
            if observed.any():
                loss = loss - self.critic(fake_s[observed], real[1]).mean()
            l2 = censor_hinge(fake_s[~observed], targets[window][~observed])
            loss = loss + self.config.lambda2 * l2 + self.config.lambda3 * l3
            self._generator_step(gen_optim, guard, loss)

            phi = (next_phi[0].detach(), next_phi[1].detach())
            steps += 1
            sums["wasserstein"] += w
            sums["lipschitz"] += l1
            sums["censor"] += float(l2.detach())
            sums["match"] += float(l3.detach())
        return {k: v / max(steps, 1) for k, v in sums.items()}

    # ---- inference ----------------------------------------------------
    @override
    def predict(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        n_samples: int = DEFAULT_MC_SAMPLES,
        seed: int = 0,
    ) -> list[ServicePrediction]:
        """Monte Carlo predictions; recurrent variants run `n_samples` chains
        through the whole trace."""
        if n_samples < 1:
            raise DataError(f"n_samples must be >= 1, got {n_samples}")
        self.noise.manual_seed(seed)
        inputs = conditioning(arrival_states, trace, self.normalizer)
        h_a, x = inputs[:, : self.state_dim], inputs[:, self.state_dim :]

        samples: list[np.ndarray] = []
        with torch.no_grad():
            if self.recurrent:
                phi = self.zero_transition(n_samples)
                for i in range(len(trace)):
                    s, next_phi = self.generate(
                        h_a[i].expand(n_samples, -1), x[i].expand(n_samples, -1), phi
                    )
                    assert next_phi is not None
                    phi = next_phi
                    samples.append(s.numpy())
            else:
                for i in range(len(trace)):
                    s, _ = self.generate(
                        h_a[i].expand(n_samples, -1), x[i].expand(n_samples, -1)
                    )
                    samples.append(s.numpy())

        return [ServicePrediction((), s * self.service_scale) for s in samples]


def train_adversarial(
    variant: AdvVariant,
    rpp: RppModel,
    trace: QueueTrace,
    config: AdvConfig | None = None,
    *,
    hidden: int = 100,
    layers: int = 3,
    transition_dim: int = 16,
    epochs: int = 50,
    lr: float = DEFAULT_LR,
    batch_size: int = 256,
    bptt: int = DEFAULT_BPTT,
    seed: int = 0,
    checkpoint: Path | None = None,
) -> AdversarialModel:
    if len(trace) == 0:
        raise DataError("no events to train on")
    rpp.params.freeze()
    states = rpp.hidden_states(trace)
    values, censored = service_targets(trace)
    observed = values[~censored]
    scale = float(observed.mean()) if observed.size else 1.0

    model = AdversarialModel(
        variant,
        state_dim=rpp.hidden,
        n_covariates=trace.n_covariates,
        hidden=hidden,
        layers=layers,
        transition_dim=transition_dim,
        config=config,
        normalizer=rpp.normalizer,
        service_scale=scale if scale > 0 else 1.0,
        seed=seed,
    )
    model.fit(
        trace, states, epochs=epochs, lr=lr, batch_size=batch_size, bptt=bptt, checkpoint=checkpoint
    )
    return model
