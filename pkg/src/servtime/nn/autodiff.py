from collections.abc import Iterable

import torch

from servtime.core.exceptions import DimensionError
from servtime.nn.params import ParamTensor


def backward(loss: torch.Tensor, params: Iterable[ParamTensor]) -> None:
    """Populate `.grad` of every parameter; unreachable ones get exact zeros."""
    if loss.numel() != 1:
        raise DimensionError(f"loss must be scalar, got shape {tuple(loss.shape)}")

    params = list(params)
    leaves = [p.values for p in params]
    if not loss.requires_grad:
        grads: tuple[torch.Tensor | None, ...] = (None,) * len(leaves)
    else:
        grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)

    for p, g in zip(params, grads):
        p.values.grad = torch.zeros_like(p.values) if g is None else g.detach()
