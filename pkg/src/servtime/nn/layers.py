import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Literal, overload

import torch
import torch.nn.functional as F

from servtime.core.exceptions import ConfigError, DimensionError
from servtime.nn.params import DTYPE, ParamSet

LayerKind = Literal["mlp", "gru", "lstm"]
Activation = Literal["tanh", "linear"]

GRU_GATES = ("z", "r", "n")
LSTM_GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one MLP (n_layers hidden layers + linear output) or one recurrent cell."""

    kind: LayerKind
    input_dim: int
    hidden_dim: int
    output_dim: int = 1
    n_layers: int = 1
    noise_inject: bool = False
    activation: Activation = "tanh"

    def __post_init__(self) -> None:
        if self.kind not in ("mlp", "gru", "lstm"):
            raise ConfigError(f"unknown layer kind: {self.kind}")
        dims = (self.input_dim, self.hidden_dim, self.output_dim, self.n_layers)
        if min(dims) <= 0:
            raise ConfigError(f"layer dimensions must be positive: {self}")
        if self.noise_inject and self.kind != "mlp":
            raise ConfigError("noise injection is only defined for mlp layers")
        if self.kind != "mlp" and self.n_layers != 1:
            raise ConfigError("recurrent cells are single-layer")


def init_layer(
    spec: LayerSpec, params: ParamSet, prefix: str, generator: torch.Generator
) -> None:
    if spec.kind == "mlp":
        fan_in = spec.input_dim
        for k in range(spec.n_layers):
            params.add(f"{prefix}.l{k}.weight", (spec.hidden_dim, fan_in), generator, "glorot")
            params.add(f"{prefix}.l{k}.bias", (spec.hidden_dim,))
            fan_in = spec.hidden_dim
        out = spec.n_layers
        params.add(f"{prefix}.l{out}.weight", (spec.output_dim, fan_in), generator, "glorot")
        params.add(f"{prefix}.l{out}.bias", (spec.output_dim,))
        return

    gates = GRU_GATES if spec.kind == "gru" else LSTM_GATES
    for gate in gates:
        params.add(f"{prefix}.w_{gate}", (spec.hidden_dim, spec.input_dim), generator, "glorot")
        params.add(f"{prefix}.u_{gate}", (spec.hidden_dim, spec.hidden_dim), generator, "glorot")
        params.add(f"{prefix}.b_{gate}", (spec.hidden_dim,))


def _check_last_dim(name: str, x: torch.Tensor, expected: int) -> None:
    if x.shape[-1] != expected:
        raise DimensionError(f"{name}: expected last dimension {expected}, got {tuple(x.shape)}")


def _affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return x @ weight.T + bias


def draw_noise(
    spec: LayerSpec, batch_shape: tuple[int, ...], generator: torch.Generator
) -> list[torch.Tensor]:
    """One fresh standard-normal draw per hidden layer."""
    return [
        torch.randn((*batch_shape, spec.hidden_dim), generator=generator, dtype=DTYPE)
        for _ in range(spec.n_layers)
    ]


def forward_mlp(
    spec: LayerSpec,
    params: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    noise: Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    _check_last_dim("mlp input", x, spec.input_dim)
    if noise is not None and len(noise) != spec.n_layers:
        raise DimensionError(f"expected {spec.n_layers} noise tensors, got {len(noise)}")

    hidden = x
    for k in range(spec.n_layers):
        pre = _affine(hidden, params[f"l{k}.weight"], params[f"l{k}.bias"])
        if noise is not None:
            _check_last_dim(f"noise[{k}]", noise[k], spec.hidden_dim)
            pre = pre + noise[k]
        hidden = torch.tanh(pre) if spec.activation == "tanh" else pre

    out = spec.n_layers
    return _affine(hidden, params[f"l{out}.weight"], params[f"l{out}.bias"])


def step_gru(
    spec: LayerSpec,
    params: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    h_prev: torch.Tensor,
) -> torch.Tensor:
    _check_last_dim("gru input", x, spec.input_dim)
    _check_last_dim("gru state", h_prev, spec.hidden_dim)

    def gate(g: str, h: torch.Tensor) -> torch.Tensor:
        return _affine(x, params[f"w_{g}"], params[f"b_{g}"]) + h @ params[f"u_{g}"].T

    z = torch.sigmoid(gate("z", h_prev))
    r = torch.sigmoid(gate("r", h_prev))
    n = torch.tanh(gate("n", r * h_prev))
    return z * h_prev + (1.0 - z) * n


def step_lstm(
    spec: LayerSpec,
    params: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    state: tuple[torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    h_prev, c_prev = state
    _check_last_dim("lstm input", x, spec.input_dim)
    _check_last_dim("lstm state", h_prev, spec.hidden_dim)
    _check_last_dim("lstm cell", c_prev, spec.hidden_dim)

    def gate(g: str) -> torch.Tensor:
        return _affine(x, params[f"w_{g}"], params[f"b_{g}"]) + h_prev @ params[f"u_{g}"].T

    i = torch.sigmoid(gate("i"))
    f = torch.sigmoid(gate("f"))
    g = torch.tanh(gate("g"))
    o = torch.sigmoid(gate("o"))
    c_next = f * c_prev + i * g
    return o * torch.tanh(c_next), c_next


@overload
def softplus(x: float) -> float: ...
@overload
def softplus(x: torch.Tensor) -> torch.Tensor: ...
def softplus(x: float | torch.Tensor) -> float | torch.Tensor:
    if isinstance(x, torch.Tensor):
        return F.softplus(x)
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def log_softplus(x: torch.Tensor) -> torch.Tensor:
    """log(softplus(x)) without underflow for very negative x."""
    safe = torch.clamp(x, min=-30.0)
    return torch.where(x < -30.0, x, torch.log(F.softplus(safe)))
