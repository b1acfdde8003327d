import numpy as np
import pytest

from servtime.core.exceptions import ConfigError
from servtime.sim.datasets import (
    FAMILIES,
    PARITY_SCALES,
    SyntheticSpec,
    make_dataset,
    sample_parity,
    simulate_sawtooth,
)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_produces_a_valid_trace(family):
    # test that each family yields sorted arrivals and departures after arrivals
    trace = make_dataset(family, SyntheticSpec(), 40.0, seed=3)
    assert len(trace) > 10
    a = trace.arrivals
    assert np.all(np.diff(a) >= 0) and a[-1] <= 40.0
    d = trace.departures
    observed = ~np.isnan(d)
    assert np.all(d[observed] > a[observed])
    assert np.all(d[observed] <= 40.0)


def test_same_seed_same_dataset():
    a = make_dataset("h-ps", SyntheticSpec(), 30.0, seed=5)
    b = make_dataset("h-ps", SyntheticSpec(), 30.0, seed=5)
    assert a == b


def test_unknown_family_and_bad_horizon():
    with pytest.raises(ConfigError, match="unknown family"):
        make_dataset("m-pt", SyntheticSpec(), 10.0, seed=0)  # type: ignore[arg-type]
    with pytest.raises(ConfigError, match="horizon"):
        make_dataset("h-pt", SyntheticSpec(), 0.0, seed=0)


def test_phase_type_services_have_the_configured_mean():
    trace = make_dataset("h-pt", SyntheticSpec(service_rate=2.0), 2000.0, seed=1)
    services = (trace.departures - trace.arrivals)[~trace.censored_mask]
    assert services.mean() == pytest.approx(0.5, rel=0.08)


def test_parity_services_alternate(rng: np.random.Generator):
    services = sample_parity(rng, 4000)
    assert services[0::2].mean() == pytest.approx(PARITY_SCALES[0], rel=0.05)
    assert services[1::2].mean() == pytest.approx(PARITY_SCALES[1], rel=0.05)


def test_sawtooth_backlog():
    series = simulate_sawtooth(2.0, 0.5, 200.0, seed=4, drop_fraction=0.5)
    assert len(series) >= 3
    u, b, tau = series.unconfirmed, series.accepted, series.inter_block
    np.testing.assert_allclose(b, 0.5 * u)
    # backlog left behind plus growth over the next gap
    np.testing.assert_allclose(u[1:], u[:-1] - b[:-1] + 2.0 * tau[1:])
    assert series.block_times[0] == pytest.approx(tau[0])


def test_sawtooth_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        simulate_sawtooth(1.0, 1.0, 10.0, seed=0, drop_fraction=0.0)
    with pytest.raises(ConfigError, match="blocks"):
        simulate_sawtooth(1.0, 1e-4, 1.0, seed=0)
