"""Float64 parameter registry, gate-level MLP/GRU/LSTM layers and Adam on top of torch autograd."""

from servtime.nn.autodiff import backward
from servtime.nn.layers import (
    LayerSpec,
    draw_noise,
    forward_mlp,
    init_layer,
    log_softplus,
    softplus,
    step_gru,
    step_lstm,
)
from servtime.nn.optim import Adam
from servtime.nn.params import DTYPE, ParamSet, ParamTensor

__all__ = [
    "DTYPE",
    "Adam",
    "LayerSpec",
    "ParamSet",
    "ParamTensor",
    "backward",
    "draw_noise",
    "forward_mlp",
    "init_layer",
    "log_softplus",
    "softplus",
    "step_gru",
    "step_lstm",
]
