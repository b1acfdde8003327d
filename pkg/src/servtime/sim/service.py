import heapq
from dataclasses import dataclass

import numpy as np

from servtime.core.exceptions import ConfigError, DataError


@dataclass(frozen=True)
class PhaseTypeSpec:
    """Absorption time of a CTMC with transient generator `sub_generator`."""

    initial_dist: tuple[float, ...]
    sub_generator: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        pi = np.asarray(self.initial_dist, dtype=np.float64)
        S = np.asarray(self.sub_generator, dtype=np.float64)
        n = pi.size
        if n == 0 or S.shape != (n, n):
            raise ConfigError(f"sub-generator must be {n}x{n}, got {S.shape}")
        if np.any(pi < 0) or not np.isclose(pi.sum(), 1.0):
            raise ConfigError("initial distribution must be a probability vector")
        off = S - np.diag(np.diag(S))
        if np.any(off < 0):
            raise ConfigError("off-diagonal rates must be nonnegative")
        rows = S.sum(axis=1)
        if np.any(rows > 1e-12) or not np.any(rows < 0):
            raise ConfigError("row sums must be <= 0 with absorption reachable")
        if np.any(np.diag(S) >= 0):
            raise ConfigError("every phase needs a positive holding rate")

    @property
    def n_phases(self) -> int:
        return len(self.initial_dist)

    @classmethod
    def exponential(cls, rate: float) -> "PhaseTypeSpec":
        return cls.erlang(1, rate)

    @classmethod
    def erlang(cls, n_phases: int, rate: float) -> "PhaseTypeSpec":
        if n_phases < 1 or rate <= 0:
            raise ConfigError(f"invalid Erlang({n_phases}, {rate})")
        S = np.diag(np.full(n_phases, -rate))
        S += np.diag(np.full(n_phases - 1, rate), k=1)
        pi = np.zeros(n_phases)
        pi[0] = 1.0
        return cls(tuple(pi.tolist()), tuple(map(tuple, S.tolist())))


def phase_type_mean(spec: PhaseTypeSpec) -> float:
    """-pi S^{-1} 1."""
    pi = np.asarray(spec.initial_dist)
    S = np.asarray(spec.sub_generator)
    return float(-pi @ np.linalg.solve(S, np.ones(spec.n_phases)))


def sample_phase_type(
    spec: PhaseTypeSpec, seed: int | np.random.Generator, size: int | None = None
) -> float | np.ndarray:
    """Walk the embedded jump chain until absorption."""
    rng = np.random.default_rng(seed)
    S = np.asarray(spec.sub_generator, dtype=np.float64)
    n = spec.n_phases
    holding = -np.diag(S)
    # row k: jump probabilities to phases 0..n-1 then to absorption
    jumps = np.zeros((n, n + 1))
    jumps[:, :n] = (S + np.diag(holding)) / holding[:, None]
    jumps[:, n] = -S.sum(axis=1) / holding
    jumps /= jumps.sum(axis=1, keepdims=True)

    def one() -> float:
        phase = int(rng.choice(n, p=spec.initial_dist))
        total = 0.0
        while phase < n:
            total += rng.exponential(1.0 / holding[phase])
            phase = int(rng.choice(n + 1, p=jumps[phase]))
        return total

    if size is None:
        return one()
    return np.array([one() for _ in range(size)], dtype=np.float64)


def simulate_ps_queue(arrivals: np.ndarray, requirements: np.ndarray) -> np.ndarray:
    """Exact processor-sharing departures.

    Virtual time advances at rate 1/U(t) while U(t) > 0 jobs are present;
    job i leaves when virtual time reaches its finish tag V(a_i) + r_i.
    """
    arrivals = np.asarray(arrivals, dtype=np.float64)
    requirements = np.asarray(requirements, dtype=np.float64)
    if arrivals.shape != requirements.shape:
        raise DataError("arrivals and requirements must have the same length")
    if np.any(requirements <= 0):
        raise DataError("service requirements must be positive")
    if np.any(np.diff(arrivals) < 0):
        raise DataError("arrivals must be sorted")

    n = arrivals.size
    departures = np.empty(n, dtype=np.float64)
    in_system: list[tuple[float, int]] = []
    clock = 0.0
    virtual = 0.0
    k = 0

    while k < n or in_system:
        next_arrival = arrivals[k] if k < n else np.inf
        if in_system:
            tag = in_system[0][0]
            next_departure = clock + (tag - virtual) * len(in_system)
        else:
            next_departure = np.inf

        if next_arrival <= next_departure:
            if in_system:
                virtual += (next_arrival - clock) / len(in_system)
            clock = next_arrival
            heapq.heappush(in_system, (virtual + requirements[k], k))
            k += 1
        else:
            tag, job = heapq.heappop(in_system)
            virtual = tag
            clock = next_departure
            departures[job] = clock

    return departures
