import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
import torch
from typing_extensions import Self

from servtime._types import QueueTrace, ServicePrediction
from servtime.core.checkpoint import load_checkpoint, save_checkpoint
from servtime.core.exceptions import CheckpointError, DivergenceError
from servtime.nn.params import ParamSet

logger = logging.getLogger(__name__)


class Checkpointable(ABC):
    """A model whose parameters live in one ParamSet and whose shape is
    described by a JSON-able document."""

    kind: ClassVar[str]
    params: ParamSet

    @abstractmethod
    def describe(self) -> dict[str, Any]:
        raise NotImplementedError()

    @classmethod
    @abstractmethod
    def from_description(cls, meta: dict[str, Any]) -> Self:
        raise NotImplementedError()

    def save(self, path: Path) -> Path:
        return save_checkpoint(
            path, self.params.state_dict(), {"kind": self.kind, **self.describe()}
        )

    @classmethod
    def load(cls, path: Path) -> Self:
        tensors, meta = load_checkpoint(path)
        kind = meta.pop("kind", None)
        if kind != cls.kind:
            raise CheckpointError(f"{path} holds a '{kind}' model, expected '{cls.kind}'")
        model = cls.from_description(meta)
        model.params.load_state_dict(tensors)
        return model


def checkpoint_kind(path: Path) -> str:
    _, meta = load_checkpoint(path)
    return str(meta.get("kind"))


class DivergenceGuard:
    """Remembers the last good parameters; on a non-finite loss or gradient
    restores them, saves them next to `checkpoint` and raises."""

    def __init__(self, model: Checkpointable, checkpoint: Path | None = None) -> None:
        self.model = model
        self.checkpoint = checkpoint
        self._snapshot = model.params.state_dict()

    def check(self, loss: torch.Tensor, what: str) -> None:
        if not bool(torch.isfinite(loss).all()):
            self.abort(f"{what} loss is not finite")

    def commit(self) -> None:
        self._snapshot = self.model.params.state_dict()

    def abort(self, message: str) -> None:
        self.model.params.load_state_dict(self._snapshot)
        saved = None
        if self.checkpoint is not None:
            path = self.checkpoint.with_name(self.checkpoint.name + ".last-good")
            saved = str(self.model.save(path))
        logger.error("training diverged: %s", message)
        raise DivergenceError(message, saved)


class ServiceModel(Checkpointable):
    """Service-time model conditioned on arrival hidden states and covariates."""

    @abstractmethod
    def fit(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        **kwargs: Any,
    ) -> list[dict[str, float]]:
        raise NotImplementedError()

    @abstractmethod
    def predict(
        self,
        trace: QueueTrace,
        arrival_states: torch.Tensor,
        n_samples: int,
        seed: int,
    ) -> list[ServicePrediction]:
        raise NotImplementedError()

    def pooled_samples(self, predictions: list[ServicePrediction]) -> np.ndarray:
        if not predictions:
            return np.empty(0)
        return np.concatenate([p.mc_samples for p in predictions])
