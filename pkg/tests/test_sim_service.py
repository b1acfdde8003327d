import numpy as np
import pytest

from servtime.core.exceptions import ConfigError, DataError
from servtime.sim.service import PhaseTypeSpec, phase_type_mean, sample_phase_type, simulate_ps_queue
from tests.oracles import ps_walker


def test_phase_type_validation():
    with pytest.raises(ConfigError):
        PhaseTypeSpec((1.0,), ((1.0,),))
    with pytest.raises(ConfigError):
        PhaseTypeSpec((0.5, 0.4), ((-1.0, 0.0), (0.0, -1.0)))
    with pytest.raises(ConfigError, match="absorption"):
        # closed loop, no exit
        PhaseTypeSpec((1.0, 0.0), ((-1.0, 1.0), (1.0, -1.0)))


def test_erlang_mean_and_sample_mean():
    spec = PhaseTypeSpec.erlang(3, 2.0)
    assert phase_type_mean(spec) == pytest.approx(1.5)
    samples = sample_phase_type(spec, 0, size=20000)
    assert isinstance(samples, np.ndarray)
    assert samples.mean() == pytest.approx(1.5, rel=0.03)
    # Erlang(3, 2) variance is 3/4
    assert samples.var() == pytest.approx(0.75, rel=0.08)


def test_exponential_single_draw_is_float():
    value = sample_phase_type(PhaseTypeSpec.exponential(1.0), 5)
    assert isinstance(value, float) and value > 0


def test_ps_single_job_leaves_after_its_requirement():
    d = simulate_ps_queue(np.array([1.0]), np.array([2.5]))
    assert d.tolist() == [3.5]


def test_ps_two_overlapping_jobs_share_the_server():
    # job 0 alone for 1, then both at half speed
    d = simulate_ps_queue(np.array([0.0, 1.0]), np.array([2.0, 1.0]))
    np.testing.assert_allclose(d, [3.0, 3.0])


def test_ps_matches_event_walker(rng: np.random.Generator):
    arrivals = np.sort(rng.uniform(0.0, 20.0, size=60))
    requirements = rng.exponential(0.8, size=60)
    np.testing.assert_allclose(
        simulate_ps_queue(arrivals, requirements), ps_walker(arrivals, requirements), atol=1e-9
    )


def test_ps_rejects_bad_input():
    with pytest.raises(DataError):
        simulate_ps_queue(np.array([1.0, 0.5]), np.array([1.0, 1.0]))
    with pytest.raises(DataError):
        simulate_ps_queue(np.array([1.0]), np.array([0.0]))


def test_ps_staggered_jobs():
    # full rate to 0.5, half rate to 1.5, full rate to 2.0
    d = simulate_ps_queue(np.array([0.0, 0.5]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(d, [1.5, 2.0], atol=1e-12)


def test_ps_busy_time_equals_total_work(rng: np.random.Generator):
    # the server works at unit rate whenever the system is non-empty
    arrivals = np.sort(rng.uniform(0.0, 10.0, size=40))
    requirements = rng.exponential(0.5, size=40)
    departures = simulate_ps_queue(arrivals, requirements)
    edges = sorted([(a, 1) for a in arrivals] + [(d, -1) for d in departures])
    busy, load, last = 0.0, 0, 0.0
    for t, step in edges:
        if load:
            busy += t - last
        load += step
        last = t
    assert busy == pytest.approx(requirements.sum(), abs=1e-9)
