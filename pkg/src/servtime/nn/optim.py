from collections.abc import Iterable

import torch

from servtime.core.constants import DEFAULT_LR
from servtime.core.exceptions import DivergenceError
from servtime.nn.params import ParamTensor


class Adam:
    """Adam with bias correction over a fixed list of ParamTensors."""

    def __init__(
        self,
        params: Iterable[ParamTensor],
        lr: float = DEFAULT_LR,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._optim = torch.optim.Adam(
            [p.values for p in self.params],
            lr=lr,
            betas=(beta1, beta2),
            eps=eps,
            foreach=False,
        )

    def step(self) -> None:
        for p in self.params:
            if not bool(torch.isfinite(p.grad).all()):
                raise DivergenceError(f"non-finite gradient in parameter '{p.name}'")
            if p.values.grad is None:
                p.values.grad = torch.zeros_like(p.values)

        self._optim.step()
        self.step_count += 1

    def moments(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """First and second moment estimates of one parameter."""
        for p in self.params:
            if p.name == name:
                state = self._optim.state.get(p.values, {})
                zeros = torch.zeros_like(p.values)
                return state.get("exp_avg", zeros), state.get("exp_avg_sq", zeros)
        raise KeyError(name)
