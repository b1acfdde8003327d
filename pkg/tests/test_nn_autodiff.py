import pytest
import torch

from servtime.core.exceptions import DimensionError, DivergenceError
from servtime.nn import (
    DTYPE,
    Adam,
    LayerSpec,
    ParamSet,
    backward,
    forward_mlp,
    init_layer,
    step_gru,
    step_lstm,
)
from tests.oracles import fd_grad, relative_error


def test_backward_rejects_non_scalar_loss():
    params = ParamSet()
    params.add("x", (3,))
    with pytest.raises(DimensionError, match="scalar"):
        backward(params["x"] * 2.0, params)


def test_backward_fills_zeros_for_unused_params():
    params = ParamSet()
    params.add("used", (2,))
    params.add("unused", (4,))
    loss = (params["used"] + 1.0).pow(2).sum()
    backward(loss, params)
    assert torch.equal(params.tensor("used").grad, torch.full((2,), 2.0, dtype=DTYPE))
    assert torch.equal(params.tensor("unused").grad, torch.zeros(4, dtype=DTYPE))


def test_linear_loss_gradient_is_exact(torch_gen: torch.Generator):
    params = ParamSet()
    params.add("w", (3, 2), torch_gen, "glorot")
    c = torch.randn(3, 2, dtype=DTYPE, generator=torch_gen)
    backward((params["w"] * c).sum(), params)
    assert torch.allclose(params.tensor("w").grad, c)


def test_mlp_and_gru_gradients_match_finite_differences(torch_gen: torch.Generator):
    mlp = LayerSpec("mlp", 3, 5, 1, n_layers=2)
    gru = LayerSpec("gru", 3, 3)
    params = ParamSet()
    init_layer(mlp, params, "m", torch_gen)
    init_layer(gru, params, "g", torch_gen)
    xs = torch.randn(4, 3, dtype=DTYPE, generator=torch_gen)

    def loss() -> torch.Tensor:
        h = torch.zeros(3, dtype=DTYPE)
        for x in xs:
            h = step_gru(gru, params.view("g"), x, h)
        return forward_mlp(mlp, params.view("m"), h.unsqueeze(0)).pow(2).sum()

    backward(loss(), params)
    numeric = fd_grad(loss, [p.values for p in params])
    for p, g in zip(params, numeric):
        assert relative_error(p.grad, g) < 1e-4, p.name


def test_lstm_gradients_match_finite_differences(torch_gen: torch.Generator):
    lstm = LayerSpec("lstm", 2, 3)
    params = ParamSet()
    init_layer(lstm, params, "l", torch_gen)
    params.add("v", (3,), torch_gen, "glorot")
    xs = torch.randn(5, 2, dtype=DTYPE, generator=torch_gen)

    def loss() -> torch.Tensor:
        h = c = torch.zeros(3, dtype=DTYPE)
        total = torch.zeros((), dtype=DTYPE)
        for x in xs:
            h, c = step_lstm(lstm, params.view("l"), x, (h, c))
            total = total + (h @ params["v"]) ** 2 + c.sum()
        return total

    backward(loss(), params)
    numeric = fd_grad(loss, [p.values for p in params])
    for p, g in zip(params, numeric):
        assert relative_error(p.grad, g) < 1e-4, p.name


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(grad)
    params = ParamSet()
    params.add("x", (2,))
    optim = Adam(params, lr=0.1)
    backward((params["x"] * torch.tensor([3.0, -0.5], dtype=DTYPE)).sum(), params)
    optim.step()
    assert torch.allclose(params["x"].detach(), torch.tensor([-0.1, 0.1], dtype=DTYPE))
    assert optim.step_count == 1
    m, v = optim.moments("x")
    assert torch.allclose(m, torch.tensor([0.3, -0.05], dtype=DTYPE))
    assert torch.allclose(v, torch.tensor([0.009, 0.00025], dtype=DTYPE))


def test_adam_descends_a_quadratic():
    params = ParamSet()
    params.add("x", (1,))
    with torch.no_grad():
        params["x"].fill_(5.0)
    optim = Adam(params, lr=0.1)
    for _ in range(500):
        backward((params["x"] - 2.0).pow(2).sum(), params)
        optim.step()
    assert float(params["x"]) == pytest.approx(2.0, abs=1e-2)


def test_adam_refuses_non_finite_gradient():
    params = ParamSet()
    params.add("bad", (1,))
    optim = Adam(params)
    params["bad"].grad = torch.tensor([float("nan")], dtype=DTYPE)
    with pytest.raises(DivergenceError, match="bad"):
        optim.step()
    assert optim.step_count == 0
