import numpy as np
import pytest

import slider_quant.core.numkit as nk
import slider_quant.core.optim as optim
from slider_quant.core.errors import OptimizerError


def test_zero_learning_rate_leaves_params_unchanged():
    param = nk.Tensor([1.5, -2.0], requires_grad=True)
    state = optim.init_state([param], lr=0.0, weight_decay=0.1)
    optim.adamw_step([param], [np.array([0.3, -0.7], dtype=np.float32)], state, lr=0.0)
    np.testing.assert_array_equal(param.data, [1.5, -2.0])


def test_single_step_matches_unrolled_recurrence():
    theta, grad, lr, decay = 0.8, 0.25, 0.01, 0.1
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    param = nk.Tensor([theta], requires_grad=True)
    state = optim.init_state([param], lr=lr, weight_decay=decay)
    optim.adamw_step([param], [np.array([grad], dtype=np.float32)], state, lr=lr)

    m = (1 - beta1) * grad
    v = (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1)
    v_hat = v / (1 - beta2)
    expected = theta * (1 - lr * decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert param.data[0] == pytest.approx(expected, abs=1e-7)
    assert state.step == 1


def test_none_gradient_is_zero():
    param = nk.Tensor([1.0], requires_grad=True)
    state = optim.init_state([param], lr=0.1)
    optim.adamw_step([param], [None], state, lr=0.1)
    assert param.data[0] == pytest.approx(1.0)


def test_non_finite_gradient():
    param = nk.Tensor([1.0], requires_grad=True)
    state = optim.init_state([param], lr=0.1)
    with pytest.raises(OptimizerError):
        optim.adamw_step([param], [np.array([np.inf], dtype=np.float32)], state, lr=0.1)


def test_negative_learning_rate():
    with pytest.raises(OptimizerError):
        optim.init_state([nk.Tensor([1.0])], lr=-1.0)


def test_linear_decay_reaches_last_step():
    assert optim.linear_decay(1.0, 0, 4) == 1.0
    assert optim.linear_decay(1.0, 3, 4) == 0.25


def test_adamw_groups_use_their_own_rates():
    fast = nk.Tensor([0.0], requires_grad=True)
    slow = nk.Tensor([0.0], requires_grad=True)
    optimizer = optim.AdamW({"fast": ([fast], 1e-1), "slow": ([slow], 1e-3)}, total_steps=10)
    fast.grad = np.array([1.0], dtype=np.float32)
    slow.grad = np.array([1.0], dtype=np.float32)
    optimizer.step()
    # The first Adam step moves each parameter by its learning rate.
    assert fast.data[0] == pytest.approx(-1e-1, rel=1e-4)
    assert slow.data[0] == pytest.approx(-1e-3, rel=1e-4)
    optimizer.zero_grad()
    assert fast.grad is None and slow.grad is None


def test_adamw_minimizes_quadratic():
    x = nk.Tensor([3.0, -2.0], requires_grad=True)
    optimizer = optim.AdamW({"x": ([x], 0.1)}, total_steps=300)
    for _ in range(300):
        optimizer.zero_grad()
        nk.backward(nk.reduce_sum(nk.square(x)))
        optimizer.step()
    assert np.all(np.abs(x.data) < 0.05)
