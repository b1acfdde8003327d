import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np
import torch

from servtime.core.exceptions import CheckpointError, DimensionError

DTYPE = torch.float64


@dataclass
class ParamTensor:
    """A named trainable array; `values` is a float64 autograd leaf."""

    name: str
    values: torch.Tensor

    @property
    def shape(self) -> list[int]:
        return list(self.values.shape)

    @property
    def grad(self) -> torch.Tensor:
        if self.values.grad is None:
            return torch.zeros_like(self.values)
        return self.values.grad

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.values).all())


def glorot_uniform(shape: tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * a


class ParamSet:
    """Ordered registry of the ParamTensors of one model."""

    def __init__(self) -> None:
        self._params: dict[str, ParamTensor] = {}

    def add(
        self,
        name: str,
        shape: tuple[int, ...],
        generator: torch.Generator | None = None,
        init: str = "zeros",
    ) -> ParamTensor:
        if name in self._params:
            raise DimensionError(f"duplicate parameter name: {name}")
        if any(d <= 0 for d in shape):
            raise DimensionError(f"{name}: dimensions must be positive, got {shape}")

        if init == "glorot":
            assert generator is not None
            values = glorot_uniform(shape, generator)
        else:
            values = torch.zeros(shape, dtype=DTYPE)

        param = ParamTensor(name, values.requires_grad_(True))
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name].values

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensor(self, name: str) -> ParamTensor:
        return self._params[name]

    def view(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under `prefix.` keyed by their short names."""
        head = prefix + "."
        return {
            name[len(head) :]: p.values
            for name, p in self._params.items()
            if name.startswith(head)
        }

    def select(self, *prefixes: str) -> list[ParamTensor]:
        return [
            p
            for name, p in self._params.items()
            if any(name == pre or name.startswith(pre + ".") for pre in prefixes)
        ]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.values.grad = None

    def freeze(self) -> None:
        for p in self._params.values():
            p.values.requires_grad_(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            name: p.values.detach().numpy().copy() for name, p in self._params.items()
        }

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        unexpected = set(state) - set(self._params)
        if missing or unexpected:
            raise CheckpointError(
                f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        with torch.no_grad():
            for name, p in self._params.items():
                array = np.asarray(state[name], dtype=np.float64)
                if list(array.shape) != p.shape:
                    raise CheckpointError(
                        f"{name}: shape {list(array.shape)} does not match {p.shape}"
                    )
                p.values.copy_(torch.from_numpy(array))
