from dataclasses import asdict, dataclass, field
from typing import Any, Literal, TypedDict

import numpy as np

# DATASET TYPES
Family = Literal["h-pt", "h-ps", "nh-pt", "nh-ps", "mixture", "parity"]
ServiceFamily = Literal["gamma", "exponential", "pareto", "chi_square", "log_normal"]
AdvVariant = Literal["as", "ras", "ras_nh"]
MempoolVariant = Literal["nms-g", "ams"]


@dataclass(frozen=True)
class ArrivalEvent:
    """One customer; `departure_time` is None when censored."""

    arrival_time: float
    departure_time: float | None = None
    covariates: tuple[float, ...] = ()

    @property
    def censored(self) -> bool:
        return self.departure_time is None

    @property
    def service_time(self) -> float | None:
        if self.departure_time is None:
            return None
        return self.departure_time - self.arrival_time


@dataclass(frozen=True)
class QueueTrace:
    """Arrivals sorted by time, observed on [0, horizon]."""

    events: tuple[ArrivalEvent, ...]
    horizon: float

    def __len__(self) -> int:
        return len(self.events)

    @property
    def n_covariates(self) -> int:
        return len(self.events[0].covariates) if self.events else 0

    @property
    def arrivals(self) -> np.ndarray:
        return np.array([e.arrival_time for e in self.events], dtype=np.float64)

    @property
    def departures(self) -> np.ndarray:
        """Departure times with NaN where censored."""
        return np.array(
            [np.nan if e.departure_time is None else e.departure_time for e in self.events],
            dtype=np.float64,
        )

    @property
    def covariates(self) -> np.ndarray:
        return np.array(
            [e.covariates for e in self.events], dtype=np.float64
        ).reshape(len(self.events), self.n_covariates)

    @property
    def censored_mask(self) -> np.ndarray:
        return np.array([e.censored for e in self.events], dtype=bool)


@dataclass(frozen=True)
class CensorSplit:
    """Indices of observed (D) and censored (C) services."""

    uncensored: tuple[int, ...]
    service_times: tuple[float, ...]
    censored: tuple[int, ...]
    windows: tuple[float, ...]


@dataclass(frozen=True)
class NormalizationSpec:
    time_scale: float
    covariate_means: tuple[float, ...] = ()
    covariate_stds: tuple[float, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NormalizationSpec":
        return cls(
            time_scale=float(d["time_scale"]),
            covariate_means=tuple(d["covariate_means"]),
            covariate_stds=tuple(d["covariate_stds"]),
        )


# MEMPOOL TYPES
@dataclass(frozen=True)
class MempoolRecord:
    """One block: backlog `unconfirmed` before `block_time`, `accepted` into it."""

    block_time: float
    unconfirmed: float
    accepted: float
    inter_block: float


@dataclass(frozen=True)
class MempoolSeries:
    records: tuple[MempoolRecord, ...]
    horizon: float

    def __len__(self) -> int:
        return len(self.records)

    @property
    def block_times(self) -> np.ndarray:
        return np.array([r.block_time for r in self.records], dtype=np.float64)

    @property
    def unconfirmed(self) -> np.ndarray:
        return np.array([r.unconfirmed for r in self.records], dtype=np.float64)

    @property
    def accepted(self) -> np.ndarray:
        return np.array([r.accepted for r in self.records], dtype=np.float64)

    @property
    def inter_block(self) -> np.ndarray:
        return np.array([r.inter_block for r in self.records], dtype=np.float64)


# PREDICTION / EVALUATION TYPES
@dataclass
class ServicePrediction:
    """Monte Carlo prediction for one event."""

    params: tuple[float, ...]
    mc_samples: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.mc_samples))


class BaselineDict(TypedDict):
    error: float
    ks: float


@dataclass
class EvalReport:
    error: float
    ks: float
    qq_pairs: list[tuple[float, float]]
    n_events: int
    n_censored: int
    baseline_error: float
    baselines: dict[str, BaselineDict] = field(default_factory=dict)
    target: str = "service_time"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["qq_pairs"] = [list(p) for p in self.qq_pairs]
        return d
