import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from servtime.core.exceptions import ConfigError
from servtime.nn.layers import softplus

logger = logging.getLogger(__name__)

LinkKind = Literal["identity", "softplus", "cap"]


@dataclass(frozen=True)
class Link:
    """Nonnegative monotone map applied to the linear Hawkes intensity."""

    kind: LinkKind = "identity"
    shift: float = 0.0
    scale: float = 1.0
    cap: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "softplus", "cap"):
            raise ConfigError(f"unknown link: {self.kind}")
        if self.scale <= 0:
            raise ConfigError(f"link scale must be positive, got {self.scale}")
        if self.kind == "cap" and (self.cap is None or self.cap < 0):
            raise ConfigError("cap link needs a nonnegative bound")

    @property
    def bounded(self) -> bool:
        return self.kind == "cap"

    def __call__(self, x: float) -> float:
        if self.kind == "softplus":
            return self.scale * softplus(x - self.shift)
        clipped = max(x, 0.0)
        if self.kind == "cap":
            assert self.cap is not None
            return min(clipped, self.cap)
        return clipped


@dataclass(frozen=True)
class HawkesSpec:
    """Exponential kernel alpha * exp(-beta * t) over base rate lambda0."""

    base_rate: float
    alpha: float
    beta: float
    link: Link | None = None

    def __post_init__(self) -> None:
        if self.base_rate <= 0:
            raise ConfigError(f"base rate must be positive, got {self.base_rate}")
        if self.beta <= 0:
            raise ConfigError(f"kernel decay must be positive, got {self.beta}")
        if self.alpha < 0 and self.link is None:
            raise ConfigError("negative kernel amplitude needs a nonlinear link")
        bounded = self.link is not None and self.link.bounded
        if self.alpha > 0 and not bounded and self.alpha / self.beta >= 1:
            raise ConfigError(
                f"nonstationary kernel: alpha/beta = {self.alpha / self.beta:.3g} >= 1"
            )

    @property
    def branching_ratio(self) -> float:
        return self.alpha / self.beta

    @property
    def stationary_rate(self) -> float:
        """Long-run rate of the linear process."""
        return self.base_rate / (1.0 - self.branching_ratio)


def _thinning(spec: HawkesSpec, link: Link, horizon: float, seed: int | np.random.Generator) -> np.ndarray:
    rng = np.random.default_rng(seed)
    times: list[float] = []
    t = 0.0
    excitation = 0.0

    while True:
        # between events the excitation relaxes monotonically towards 0
        bound = link(max(spec.base_rate + excitation, spec.base_rate))
        if bound <= 0:
            break
        wait = rng.exponential(1.0 / bound)
        t += wait
        if t > horizon:
            break
        excitation *= math.exp(-spec.beta * wait)
        intensity = link(spec.base_rate + excitation)
        if rng.uniform() * bound <= intensity:
            times.append(t)
            excitation += spec.alpha

    logger.debug("thinning accepted %d points on [0, %g]", len(times), horizon)
    return np.asarray(times, dtype=np.float64)


def simulate_hawkes(
    spec: HawkesSpec, horizon: float, seed: int | np.random.Generator
) -> np.ndarray:
    """Ogata thinning for the linear process; any link on `spec` is ignored."""
    if spec.alpha < 0:
        raise ConfigError("linear Hawkes needs a nonnegative kernel amplitude")
    return _thinning(spec, Link("identity"), horizon, seed)


def simulate_nonlinear_hawkes(
    spec: HawkesSpec, horizon: float, seed: int | np.random.Generator
) -> np.ndarray:
    if spec.link is None:
        raise ConfigError("nonlinear Hawkes needs a link")
    return _thinning(spec, spec.link, horizon, seed)
