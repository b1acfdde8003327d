from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from servtime._types import ArrivalEvent, QueueTrace
from servtime.core.constants import POSITIVE_FLOOR
from servtime.core.exceptions import DataError
from servtime.data.eventlog import fit_normalizer, make_trace
from servtime.models.families import get_distribution
from servtime.models.nsx import NsxModel, conditioning, loss_ns, service_targets, train_ns
from servtime.models.rpp import RppModel, train_rpp
from servtime.nn.params import DTYPE
from tests.oracles import fd_grad, relative_error


@pytest.fixture
def rpp(hpt_trace: QueueTrace) -> RppModel:
    return train_rpp([hpt_trace], hidden=4, epochs=1, lr=0.01, seed=0)


def test_loss_mixes_density_and_survival():
    # test that censored rows contribute log survival and the rest log density
    dist = get_distribution("exponential")
    p = torch.tensor([[0.5], [0.5]], dtype=DTYPE)
    values = torch.tensor([1.0, 2.0], dtype=DTYPE)
    censored = torch.tensor([False, True])
    ref = stats.expon(scale=2.0)
    expected = -(ref.logpdf(1.0) + ref.logsf(2.0))
    assert float(loss_ns(dist, p, values, censored)) == pytest.approx(expected)


def test_loss_gradient_is_finite_for_zero_window():
    dist = get_distribution("gamma")
    p = torch.tensor([[2.0, 1.0]], dtype=DTYPE, requires_grad=True)
    loss = loss_ns(dist, p, torch.tensor([0.0], dtype=DTYPE), torch.tensor([True]))
    (grad,) = torch.autograd.grad(loss, [p])
    assert torch.all(torch.isfinite(grad))


def test_loss_rejects_empty_batch():
    dist = get_distribution("exponential")
    empty = torch.zeros(0, dtype=DTYPE)
    with pytest.raises(DataError, match="empty"):
        loss_ns(dist, torch.zeros((0, 1), dtype=DTYPE), empty, empty.bool())


def test_service_targets(small_trace: QueueTrace):
    values, censored = service_targets(small_trace)
    np.testing.assert_allclose(values, [1.0, 0.25, 2.0, 1.0, 1.0])
    assert censored.tolist() == [False, False, False, False, True]


def test_conditioning_shape_and_mismatch(small_trace: QueueTrace):
    normalizer = fit_normalizer(small_trace)
    inputs = conditioning(torch.zeros((5, 3), dtype=DTYPE), small_trace, normalizer)
    assert inputs.shape == (5, 4)
    assert float(inputs[:, 3].mean()) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError, match="arrival states"):
        conditioning(torch.zeros((4, 3), dtype=DTYPE), small_trace, normalizer)


def test_exponential_fit_approaches_censored_mle(rpp: RppModel, hpt_trace: QueueTrace):
    # test that a trained exponential head predicts close to the censored MLE mean
    model = train_ns(
        rpp, hpt_trace, "exponential", hidden=16, layers=1, epochs=80, lr=0.01,
        batch_size=64, validation_fraction=0.0, seed=1,
    )
    values, censored = service_targets(hpt_trace)
    mle_mean = values.sum() / (~censored).sum()
    predictions = model.predict(hpt_trace, rpp.hidden_states(hpt_trace), n_samples=200, seed=0)
    fitted = np.mean([model.service_scale / p.params[0] for p in predictions])
    assert fitted == pytest.approx(mle_mean, rel=0.25)


def test_train_freezes_arrival_model(rpp: RppModel, hpt_trace: QueueTrace):
    train_ns(rpp, hpt_trace, "gamma", hidden=8, epochs=1)
    assert not any(p.values.requires_grad for p in rpp.params)


def test_history_has_heldout_nll(rpp: RppModel, hpt_trace: QueueTrace):
    model = NsxModel("log_normal", state_dim=rpp.hidden, normalizer=rpp.normalizer, hidden=8)
    history = model.fit(
        hpt_trace, rpp.hidden_states(hpt_trace), epochs=3, lr=0.01, validation_fraction=0.2
    )
    assert len(history) == 3
    assert all(np.isfinite(h["heldout_nll"]) for h in history)


def test_pareto_scale_below_smallest_service(rpp: RppModel, hpt_trace: QueueTrace):
    model = train_ns(rpp, hpt_trace, "pareto", hidden=8, epochs=2, lr=0.01)
    assert model.support_cap is not None
    values, censored = service_targets(hpt_trace)
    predictions = model.predict(hpt_trace, rpp.hidden_states(hpt_trace), n_samples=5)
    x_m = np.array([p.params[1] for p in predictions]) * model.service_scale
    assert np.all(x_m <= 0.9 * values[~censored].min() + 1e-12)


@pytest.mark.parametrize("family", ["pareto", "gamma", "log_normal"])
def test_zero_length_service_trains(rpp: RppModel, family: str):
    # test that a departure at the arrival instant keeps the loss finite
    events = [ArrivalEvent(float(i), float(i) + 0.5 + 0.1 * (i % 3)) for i in range(11)]
    events.insert(4, ArrivalEvent(3.5, 3.5))
    trace = make_trace(events, 12.0)
    model = train_ns(
        rpp, trace, family, hidden=8, layers=1, epochs=2, lr=0.01, validation_fraction=0.0
    )
    if family == "pareto":
        assert model.support_cap == pytest.approx(0.9 * POSITIVE_FLOOR)
    predictions = model.predict(trace, rpp.hidden_states(trace), n_samples=5, seed=0)
    assert all(np.all(np.isfinite(p.mc_samples)) for p in predictions)


def test_predict_is_seeded_and_positive(rpp: RppModel, hpt_trace: QueueTrace):
    model = NsxModel("gamma", state_dim=rpp.hidden, normalizer=rpp.normalizer, hidden=8)
    states = rpp.hidden_states(hpt_trace)
    a = model.predict(hpt_trace, states, n_samples=7, seed=3)
    b = model.predict(hpt_trace, states, n_samples=7, seed=3)
    assert len(a) == len(hpt_trace)
    assert all(p.mc_samples.shape == (7,) for p in a)
    np.testing.assert_array_equal(a[0].mc_samples, b[0].mc_samples)
    assert np.all(model.pooled_samples(a) > 0)
    with pytest.raises(DataError):
        model.predict(hpt_trace, states, n_samples=0)


def test_checkpoint_keeps_predictions(tmp_path: Path, rpp: RppModel, hpt_trace: QueueTrace):
    model = train_ns(rpp, hpt_trace, "chi_square", hidden=8, epochs=1, seed=4)
    again = NsxModel.load(model.save(tmp_path / "ns.safetensors"))
    states = rpp.hidden_states(hpt_trace)
    np.testing.assert_allclose(
        again.predict(hpt_trace, states, 3, seed=1)[5].mc_samples,
        model.predict(hpt_trace, states, 3, seed=1)[5].mc_samples,
    )


@pytest.mark.parametrize("family", ["gamma", "exponential", "pareto", "chi_square", "log_normal"])
def test_censored_loss_gradients(family):
    # test that the censored likelihood differentiates correctly through the link
    dist = get_distribution(family)
    gen = torch.Generator().manual_seed(0)
    raw = (torch.rand((4, dist.n_params), generator=gen, dtype=DTYPE) - 1.0).requires_grad_(True)
    values = torch.tensor([1.2, 2.0, 0.9, 3.1], dtype=DTYPE)
    censored = torch.tensor([False, True, False, True])

    def loss() -> torch.Tensor:
        return loss_ns(dist, dist.link(raw), values, censored)

    (grad,) = torch.autograd.grad(loss(), [raw])
    (numeric,) = fd_grad(loss, [raw], h=1e-5)
    assert relative_error(grad, numeric) < 1e-4
