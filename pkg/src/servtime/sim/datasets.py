import logging
import math
from dataclasses import dataclass

import numpy as np

from servtime._types import ArrivalEvent, Family, MempoolSeries, QueueTrace
from servtime.core.exceptions import ConfigError
from servtime.data.eventlog import make_trace
from servtime.data.mempool_csv import make_series
from servtime.sim.hawkes import HawkesSpec, Link, simulate_hawkes, simulate_nonlinear_hawkes
from servtime.sim.service import PhaseTypeSpec, sample_phase_type, simulate_ps_queue

logger = logging.getLogger(__name__)

FAMILIES: tuple[Family, ...] = ("h-pt", "h-ps", "nh-pt", "nh-ps", "mixture", "parity")

# (weight, log-mean, log-sd) of the two-mode service analogue, before 1/service_rate
MIXTURE_MODES = ((0.5, math.log(1.0), 0.2), (0.5, math.log(5.0), 0.2))
# service scale multipliers for even and odd arrivals
PARITY_SCALES = (0.5, 2.0)
PARITY_SHAPE = 16.0


@dataclass(frozen=True)
class SyntheticSpec:
    base_rate: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    link_shift: float = 0.0
    link_scale: float = 1.0
    service_rate: float = 1.0
    phases: int = 2

    def hawkes(self, nonlinear: bool) -> HawkesSpec:
        link = Link("softplus", self.link_shift, self.link_scale) if nonlinear else None
        return HawkesSpec(self.base_rate, self.alpha, self.beta, link)

    def phase_type(self) -> PhaseTypeSpec:
        # Erlang with overall mean 1 / service_rate
        return PhaseTypeSpec.erlang(self.phases, self.phases * self.service_rate)


def make_dataset(
    family: Family, spec: SyntheticSpec, horizon: float, seed: int
) -> QueueTrace:
    if family not in FAMILIES:
        raise ConfigError(f"unknown family '{family}', expected one of {', '.join(FAMILIES)}")
    if horizon <= 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")

    arrival_seq, service_seq = np.random.SeedSequence(seed).spawn(2)
    arrival_rng = np.random.default_rng(arrival_seq)
    service_rng = np.random.default_rng(service_seq)

    if family in ("mixture", "parity"):
        poisson = HawkesSpec(spec.base_rate, 0.0, 1.0)
        arrivals = simulate_hawkes(poisson, horizon, arrival_rng)
    elif family.startswith("nh-"):
        arrivals = simulate_nonlinear_hawkes(spec.hawkes(nonlinear=True), horizon, arrival_rng)
    else:
        arrivals = simulate_hawkes(spec.hawkes(nonlinear=False), horizon, arrival_rng)

    n = arrivals.size
    if family.endswith("-pt"):
        services = np.asarray(sample_phase_type(spec.phase_type(), service_rng, size=n))
        departures = arrivals + services
    elif family.endswith("-ps"):
        requirements = service_rng.exponential(1.0 / spec.service_rate, size=n)
        departures = simulate_ps_queue(arrivals, requirements)
    elif family == "mixture":
        departures = arrivals + sample_mixture(service_rng, n) / spec.service_rate
    else:
        departures = arrivals + sample_parity(service_rng, n) / spec.service_rate

    events = [ArrivalEvent(float(a), float(d)) for a, d in zip(arrivals, departures)]
    trace = make_trace(events, horizon)
    logger.info(
        "%s: %d arrivals, %d censored at horizon %g",
        family,
        len(trace),
        int(trace.censored_mask.sum()),
        horizon,
    )
    return trace


def sample_mixture(rng: np.random.Generator, n: int) -> np.ndarray:
    weights = np.array([w for w, _, _ in MIXTURE_MODES])
    modes = rng.choice(len(MIXTURE_MODES), size=n, p=weights)
    mu = np.array([m for _, m, _ in MIXTURE_MODES])[modes]
    sigma = np.array([s for _, _, s in MIXTURE_MODES])[modes]
    return rng.lognormal(mu, sigma)


def sample_parity(rng: np.random.Generator, n: int) -> np.ndarray:
    """Gamma services whose mean alternates with the arrival index."""
    scales = np.array(PARITY_SCALES)[np.arange(n) % 2]
    return rng.gamma(PARITY_SHAPE, 1.0 / PARITY_SHAPE, size=n) * scales


def simulate_sawtooth(
    rate: float,
    block_rate: float,
    horizon: float,
    seed: int,
    drop_fraction: float = 0.5,
) -> MempoolSeries:
    """Backlog growing at `rate` between Poisson(`block_rate`) blocks, each
    block taking `drop_fraction` of the backlog."""
    if rate <= 0 or block_rate <= 0 or horizon <= 0:
        raise ConfigError("sawtooth rate, block rate and horizon must be positive")
    if not 0 < drop_fraction <= 1:
        raise ConfigError(f"drop fraction must be in (0, 1], got {drop_fraction}")

    blocks = simulate_hawkes(HawkesSpec(block_rate, 0.0, 1.0), horizon, seed)
    if blocks.size < 3:
        raise ConfigError(f"only {blocks.size} blocks in [0, {horizon}], increase the horizon")

    rows: list[tuple[float, float, float]] = []
    backlog, previous = 0.0, 0.0
    for d in blocks.tolist():
        backlog += rate * (d - previous)
        accepted = drop_fraction * backlog
        rows.append((d, backlog, accepted))
        backlog -= accepted
        previous = d
    return make_series(rows, horizon, origin=0.0)
