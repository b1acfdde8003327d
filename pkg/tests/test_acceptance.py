"""Simulate-then-fit checks of whole pipelines. Minutes each; run with `-m slow`."""

import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from servtime.eval.metrics import ks_two_sample, mean_baseline, prediction_error
from servtime.models.advserve import AdvConfig, train_adversarial
from servtime.models.mempool import MempoolModel, MempoolScales, forecast_mempool, train_mempool
from servtime.models.nsx import service_targets, train_ns
from servtime.models.rpp import (
    RppState,
    expected_next,
    inverse_cdf_sample,
    log_f_star,
    survival_at_infinity,
    survival_G,
    train_rpp,
)
from servtime.models.families import DISTRIBUTIONS
from servtime.sim.datasets import MIXTURE_MODES, SyntheticSpec, make_dataset, simulate_sawtooth
from servtime.sim.hawkes import HawkesSpec, simulate_hawkes
from servtime.sim.service import PhaseTypeSpec, phase_type_mean, sample_phase_type
from tests.oracles import quad, thinning_sample_rpp

pytestmark = pytest.mark.slow


def test_closed_forms_on_random_heads():
    rng = np.random.default_rng(10)
    for _ in range(50):
        state = RppState(alpha=float(rng.uniform(-1.5, 1.5)), w=float(rng.uniform(0.05, 2.0)))
        mass = quad(lambda t: math.exp(log_f_star(state, t)), 0.0, math.inf, tol=1e-11).value
        assert mass == pytest.approx(1.0, abs=1e-6)
        mean, _ = expected_next(state)
        numeric = quad(lambda t: survival_G(state, t), 0.0, math.inf, tol=1e-11).value
        assert mean == pytest.approx(numeric, abs=1e-6)
        y = float(rng.uniform(0.0, 0.999))
        tau = inverse_cdf_sample(state, y)
        assert tau is not None
        assert 1.0 - survival_G(state, tau) == pytest.approx(y, abs=1e-9)


def test_defective_mass_matches_no_arrival_rate():
    state = RppState(alpha=0.0, w=-1.0)
    rng = np.random.default_rng(11)
    n = 10_000
    missing = sum(inverse_cdf_sample(state, float(rng.random())) is None for _ in range(n))
    p = survival_at_infinity(state)
    se = math.sqrt(p * (1.0 - p) / n)
    assert abs(missing / n - p) < 3.0 * se


def test_inverse_transform_matches_thinning():
    rng = np.random.default_rng(12)
    for _ in range(5):
        alpha, w = float(rng.uniform(-1.0, 1.0)), float(rng.uniform(0.0, 1.5))
        state = RppState(alpha=alpha, w=w)
        a = [inverse_cdf_sample(state, float(rng.random())) for _ in range(10_000)]
        b = [thinning_sample_rpp(alpha, w, rng) for _ in range(10_000)]
        assert stats.ks_2samp(a, b).statistic < 0.05


def test_simulators():
    poisson = simulate_hawkes(HawkesSpec(2.0, 0.0, 1.0), 5000.0, 13)
    assert stats.kstest(np.diff(poisson), "expon", args=(0.0, 0.5)).pvalue > 0.01

    spec = HawkesSpec(1.0, 0.5, 1.0)
    times = simulate_hawkes(spec, 20_000.0, 14)
    assert times.size / 20_000.0 == pytest.approx(spec.stationary_rate, rel=0.05)

    phase = PhaseTypeSpec(
        (0.5, 0.3, 0.2),
        ((-3.0, 1.0, 0.5), (0.2, -2.0, 1.0), (0.0, 0.5, -1.5)),
    )
    draws = np.asarray(sample_phase_type(phase, 15, size=20_000))
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - phase_type_mean(phase)) < 3.0 * se


def test_parameter_recovery_on_poisson_exponential_queue():
    trace = make_dataset("h-pt", SyntheticSpec(alpha=0.0, phases=1), 5000.0, seed=16)
    assert len(trace) >= 4500
    rpp = train_rpp([trace], hidden=8, epochs=3, lr=1e-3, seed=0)
    states = rpp.state_sequence(trace)[::50]
    predicted_gap = np.mean([expected_next(s)[0] for s in states])
    assert predicted_gap == pytest.approx(1.0, rel=0.1)

    ns = train_ns(rpp, trace, "exponential", hidden=16, layers=1, epochs=20, lr=1e-2, seed=0)
    predictions = ns.predict(trace, rpp.hidden_states(trace), n_samples=1)
    rate = np.mean([p.params[0] / ns.service_scale for p in predictions])
    assert rate == pytest.approx(1.0, rel=0.1)


def test_rate_recovery_under_heavy_censoring():
    # uniform arrivals on [0, T] with mu * T = 1.6 leave about half the services open
    mu = 1.6 / 5000.0
    trace = make_dataset("h-pt", SyntheticSpec(alpha=0.0, phases=1, service_rate=mu), 5000.0, seed=17)
    assert trace.censored_mask.mean() == pytest.approx(0.5, abs=0.05)
    rpp = train_rpp([trace], hidden=4, epochs=1, lr=1e-3)
    ns = train_ns(rpp, trace, "exponential", hidden=16, layers=1, epochs=30, lr=1e-2, seed=0)
    predictions = ns.predict(trace, rpp.hidden_states(trace), n_samples=1)
    rate = np.mean([p.params[0] / ns.service_scale for p in predictions])
    assert rate == pytest.approx(mu, rel=0.15)


def test_recurrent_generator_tracks_parity():
    trace = make_dataset("parity", SyntheticSpec(), 2000.0, seed=18)
    rpp = train_rpp([trace], hidden=8, epochs=2, lr=1e-3)
    n_test = len(trace) // 5
    cut = len(trace) - n_test
    values, censored = service_targets(trace)
    observed = ~censored[cut:]

    errors = {}
    for variant in ("as", "ras", "ras_nh"):
        model = train_adversarial(
            variant, rpp, trace, AdvConfig(critic_steps=2, noise_dim=4),
            hidden=32, layers=2, transition_dim=8, epochs=30, lr=1e-3, batch_size=64, bptt=32,
        )
        predictions = model.predict(trace, rpp.hidden_states(trace), n_samples=50, seed=0)
        means = np.array([p.mean for p in predictions[cut:]])
        errors[variant] = prediction_error(values[cut:][observed], means[observed])
    assert errors["ras"] <= errors["as"]
    assert errors["ras"] <= errors["ras_nh"]


def test_adversarial_generator_captures_both_modes():
    # test that pooled AS samples match held-out bimodal services, while the
    # best single parametric family cannot
    train = make_dataset("mixture", SyntheticSpec(), 5000.0, seed=21)
    test = make_dataset("mixture", SyntheticSpec(), 1000.0, seed=22)
    rpp = train_rpp([train], hidden=8, epochs=2, lr=1e-3)
    states = rpp.hidden_states(test)
    values, censored = service_targets(test)
    held_out = values[~censored]

    def pooled(predictions) -> np.ndarray:
        return np.concatenate([p.mc_samples for p in predictions])[~censored]

    model = train_adversarial(
        "as", rpp, train, AdvConfig(critic_steps=2, noise_dim=4),
        hidden=32, layers=2, epochs=30, lr=1e-3, batch_size=64, seed=0,
    )
    samples = pooled(model.predict(test, states, n_samples=1, seed=0))
    adversarial_ks = ks_two_sample(held_out, samples)
    assert adversarial_ks < 0.1

    for weight, log_mean, log_sd in MIXTURE_MODES:
        lo, hi = math.exp(log_mean - 2.0 * log_sd), math.exp(log_mean + 2.0 * log_sd)
        truth = weight * math.erf(2.0 / math.sqrt(2.0))
        mass = np.mean((samples >= lo) & (samples <= hi))
        assert mass == pytest.approx(truth, abs=0.1)

    parametric_ks = []
    for family in DISTRIBUTIONS:
        ns = train_ns(rpp, train, family, hidden=16, layers=1, epochs=20, lr=1e-2, seed=0)
        parametric_ks.append(ks_two_sample(held_out, pooled(ns.predict(test, states, n_samples=1))))
    assert min(parametric_ks) > adversarial_ks


def test_mempool_beats_the_mean():
    series = simulate_sawtooth(2.0, 1.0, 400.0, seed=19)
    steps = len(series) - 1
    cut = int(steps * 0.8)
    observed = series.unconfirmed[1:]
    baseline = mean_baseline(series.unconfirmed[: cut + 1], observed[cut:])

    errors = {}
    for variant in ("nms-g", "ams"):
        config = AdvConfig(critic_steps=2, noise_dim=4)
        model = MempoolModel(variant, config=config, scales=MempoolScales.fit(series), seed=0)
        train_mempool(variant, series, config, epochs=60, lr=1e-3, bptt=32, model=model)
        forecast = forecast_mempool(model, series, n_samples=50, seed=0)
        errors[variant] = prediction_error(observed[cut:], forecast.unconfirmed_mean[cut:])
    assert errors["ams"] < 0.5 * baseline
    assert errors["nms-g"] < baseline


def test_training_is_reproducible(tmp_path: Path):
    trace = make_dataset("h-ps", SyntheticSpec(), 200.0, seed=20)
    paths = []
    for k in range(2):
        model = train_rpp([trace], hidden=6, epochs=2, lr=1e-2, seed=3)
        paths.append(model.save(tmp_path / f"rpp{k}.safetensors"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
