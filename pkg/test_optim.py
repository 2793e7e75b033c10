import numpy as np
import pytest

from services.optim import AdamConfig, Parameter, adam_step, set_trainable, zero_grad
from services.tensor import Tensor, checking_mode
from utils.validation import ValidationError


def _param(name, value, grad=None, frozen=False):
    with checking_mode():
        p = Parameter(Tensor(np.array(value, dtype=np.float64)), name=name, frozen=frozen)
    if grad is not None:
        p.tensor.grad = np.array(grad, dtype=np.float64)
    return p


def test_first_step_moves_by_learning_rate():
    p = _param("w", [0.0, 0.0], grad=[1.0, -1.0])
    assert adam_step([p], lr=1e-3) == 1
    expected = 1e-3 / (1 + 1e-8)
    np.testing.assert_allclose(p.data, [-expected, expected], rtol=1e-12)
    assert p.step == 1
    assert p.grad is None


def test_bias_correction_keeps_steps_near_lr():
    p = _param("w", [1.0])
    for _ in range(5):
        p.tensor.grad = np.array([0.5])
        adam_step([p], lr=0.01)
    np.testing.assert_allclose(p.data, [1.0 - 5 * 0.01], rtol=1e-6)


def test_frozen_parameter_is_bit_identical():
    frozen = _param("backbone", [0.3, -0.7], grad=[2.0, 2.0], frozen=True)
    live = _param("head", [0.3, -0.7], grad=[2.0, 2.0])
    before = frozen.data.copy()
    m_before, v_before = frozen.m.copy(), frozen.v.copy()
    assert adam_step([frozen, live], lr=0.1) == 1
    assert np.array_equal(frozen.data, before)
    assert np.array_equal(frozen.m, m_before) and np.array_equal(frozen.v, v_before)
    assert frozen.step == 0 and frozen.grad is None
    assert not np.array_equal(live.data, before)


def test_zero_gradient_leaves_value_unchanged():
    p = _param("w", [1.5, -2.0], grad=[0.0, 0.0])
    adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_parameter_without_grad_is_skipped():
    p = _param("w", [1.0])
    assert adam_step([p], lr=0.1) == 0
    assert p.step == 0


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_non_positive_learning_rate_rejected(lr):
    with pytest.raises(ValidationError, match="learning rate must be positive"):
        adam_step([_param("w", [1.0], grad=[1.0])], lr=lr)


def test_non_finite_gradient_rejected():
    with pytest.raises(ValidationError, match="gradient of w: contains non-finite"):
        adam_step([_param("w", [1.0], grad=[np.nan])], lr=0.1)


def test_custom_betas():
    p = _param("w", [0.0], grad=[2.0])
    adam_step([p], lr=1.0, config=AdamConfig(beta1=0.5, beta2=0.5, eps=0.0))
    np.testing.assert_allclose(p.data, [-1.0])


def test_set_trainable_and_zero_grad():
    params = [_param("head.W_c", [1.0], grad=[1.0]), _param("stem.conv.weight", [1.0], grad=[1.0])]
    assert set_trainable(params, lambda name: name.startswith("head.")) == 1
    assert [p.frozen for p in params] == [False, True]
    zero_grad(params)
    assert all(p.grad is None for p in params)


def test_reset_state_clears_moments():
    p = _param("w", [1.0], grad=[1.0])
    adam_step([p], lr=0.1)
    p.reset_state()
    assert p.step == 0 and p.m[0] == 0.0 and p.v[0] == 0.0
