import math
from abc import ABC, abstractmethod
from typing import Any, ClassVar

import numpy as np
import torch
from scipy import special
from typing_extensions import override

from servtime._types import ServiceFamily
from servtime.core.constants import POSITIVE_FLOOR
from servtime.core.exceptions import ConfigError
from servtime.nn.layers import softplus

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _log_q(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log of the regularized upper incomplete gamma, asymptotic where it underflows."""
    with np.errstate(divide="ignore"):
        out = np.log(special.gammaincc(a, x))
    tiny = ~np.isfinite(out)
    if np.any(tiny):
        at, xt = a[tiny], x[tiny]
        out[tiny] = (at - 1.0) * np.log(xt) - xt - special.gammaln(at) + np.log1p((at - 1.0) / xt)
    return out


class _LogGammaincc(torch.autograd.Function):
    """log Q(a, x); analytic derivative in x, central difference in a."""

    @staticmethod
    def forward(ctx: Any, a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        a_np = a.detach().numpy()
        x_np = np.maximum(x.detach().numpy(), 1e-300)
        out = torch.from_numpy(_log_q(a_np, x_np))
        ctx.save_for_backward(a, x, out)
        return out

    @staticmethod
    def backward(ctx: Any, grad: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, x, out = ctx.saved_tensors
        a_np = a.detach().numpy()
        x_np = np.maximum(x.detach().numpy(), 1e-300)
        log_q = out.numpy()

        d_x = -np.exp((a_np - 1.0) * np.log(x_np) - x_np - special.gammaln(a_np) - log_q)
        h = np.minimum(1e-6 * np.maximum(1.0, a_np), a_np / 2.0)
        d_a = (_log_q(a_np + h, x_np) - _log_q(a_np - h, x_np)) / (2.0 * h)
        return grad * torch.from_numpy(d_a), grad * torch.from_numpy(d_x)


def log_gammaincc(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    a, x = torch.broadcast_tensors(a, x)
    return _LogGammaincc.apply(a.contiguous(), x.contiguous())


def positive(raw: torch.Tensor) -> torch.Tensor:
    return softplus(raw) + POSITIVE_FLOOR


class Distribution(ABC):
    """A service-time family over raw head outputs of width `n_params`."""

    name: ClassVar[ServiceFamily]
    n_params: ClassVar[int]

    @abstractmethod
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        raise NotImplementedError()

    @abstractmethod
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError()

    @abstractmethod
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError()

    @abstractmethod
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError()


class Gamma(Distribution):
    """shape k, rate beta."""

    name = "gamma"
    n_params = 2

    @override
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        return positive(raw)

    @override
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        k, rate = p[..., 0], p[..., 1]
        return k * torch.log(rate) + (k - 1.0) * torch.log(s) - rate * s - torch.lgamma(k)

    @override
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return log_gammaincc(p[..., 0], p[..., 1] * t)

    @override
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.gamma(p[0], 1.0 / p[1], size=size)


class Exponential(Distribution):
    name = "exponential"
    n_params = 1

    @override
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        return positive(raw)

    @override
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        rate = p[..., 0]
        return torch.log(rate) - rate * s

    @override
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return -p[..., 0] * t

    @override
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / p[0], size=size)


class Pareto(Distribution):
    """shape a, scale x_m; support [x_m, inf)."""

    name = "pareto"
    n_params = 2

    @override
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        a = positive(raw[..., 0])
        x_m = positive(raw[..., 1])
        if support_cap is not None:
            x_m = torch.clamp(x_m, max=support_cap)
        return torch.stack([a, x_m], dim=-1)

    @override
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        a, x_m = p[..., 0], p[..., 1]
        value = torch.log(a) + a * torch.log(x_m) - (a + 1.0) * torch.log(s)
        return torch.where(s >= x_m, value, torch.full_like(value, -math.inf))

    @override
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        a, x_m = p[..., 0], p[..., 1]
        t_safe = torch.maximum(t, x_m)
        return a * (torch.log(x_m) - torch.log(t_safe))

    @override
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        return p[1] * (1.0 + rng.pareto(p[0], size=size))


class ChiSquare(Distribution):
    """Continuous degrees of freedom k: Gamma(k/2, 1/2)."""

    name = "chi_square"
    n_params = 1

    @override
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        return positive(raw)

    @override
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        half_k = p[..., 0] / 2.0
        return (
            -half_k * math.log(2.0)
            + (half_k - 1.0) * torch.log(s)
            - s / 2.0
            - torch.lgamma(half_k)
        )

    @override
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return log_gammaincc(p[..., 0] / 2.0, t / 2.0)

    @override
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.chisquare(p[0], size=size)


class LogNormal(Distribution):
    """mu unconstrained, sigma positive."""

    name = "log_normal"
    n_params = 2

    @override
    def link(self, raw: torch.Tensor, support_cap: float | None = None) -> torch.Tensor:
        return torch.stack([raw[..., 0], positive(raw[..., 1])], dim=-1)

    @override
    def log_pdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        mu, sigma = p[..., 0], p[..., 1]
        log_s = torch.log(s)
        return -log_s - torch.log(sigma) - _HALF_LOG_2PI - (log_s - mu) ** 2 / (2.0 * sigma**2)

    @override
    def log_survival(self, p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        mu, sigma = p[..., 0], p[..., 1]
        z = (torch.log(torch.clamp(t, min=1e-300)) - mu) / sigma
        return torch.special.log_ndtr(-z)

    @override
    def sample(self, p: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.lognormal(p[0], p[1], size=size)


DISTRIBUTIONS: dict[str, Distribution] = {
    d.name: d for d in (Gamma(), Exponential(), Pareto(), ChiSquare(), LogNormal())
}


def get_distribution(name: str) -> Distribution:
    try:
        return DISTRIBUTIONS[name]
    except KeyError:
        raise ConfigError(
            f"unknown service family '{name}', expected one of {', '.join(DISTRIBUTIONS)}"
        )
