import typing as t

import numpy as np
import pytest

import slider_quant.core.numkit as nk
from slider_quant.calib.config import CalibConfig
from slider_quant.model.corpus import make_calibset
from slider_quant.model.tinymodel import ModelConfig, init_checkpoint

TINY_CONFIG = ModelConfig(vocab_size=11, d_model=16, n_heads=2, n_layers=4, d_ff=32, max_seq_len=16, seed=3)
DEEP_CONFIG = ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=12, d_ff=16, max_seq_len=8, seed=5)


def _numeric_grads(fn: t.Callable[..., nk.Tensor], arrays: t.Sequence[np.ndarray], h: float) -> t.List[np.ndarray]:
    """Central differences; the step is measured after float32 rounding of the perturbed input."""
    grads = []
    for index, array in enumerate(arrays):
        grad = np.zeros(array.shape, dtype=np.float64)
        for position in np.ndindex(array.shape):
            values = [a.copy() for a in arrays]
            base = float(array[position])
            plus, minus = np.float32(base + h), np.float32(base - h)
            values[index][position] = plus
            f_plus = fn(*[nk.Tensor(v) for v in values]).item()
            values[index][position] = minus
            f_minus = fn(*[nk.Tensor(v) for v in values]).item()
            grad[position] = (f_plus - f_minus) / (float(plus) - float(minus))
        grads.append(grad)
    return grads


def _analytic_grads(fn: t.Callable[..., nk.Tensor], arrays: t.Sequence[np.ndarray]) -> t.List[np.ndarray]:
    tensors = [nk.Tensor(a, requires_grad=True) for a in arrays]
    nk.backward(fn(*tensors))
    return [tensor.grad.astype(np.float64) for tensor in tensors]


def check_gradients(fn: t.Callable[..., nk.Tensor], arrays: t.Sequence[np.ndarray],
                    rel: float = 1e-3, h: float = 1e-3) -> None:
    """
    Compare autodiff gradients of the scalar ``fn`` with central finite differences.
    Errors are measured as ‖analytic − numeric‖ / max(‖numeric‖, 1).
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    for index, (analytic, numeric) in enumerate(zip(_analytic_grads(fn, arrays), _numeric_grads(fn, arrays, h))):
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1.0)
        assert error < rel, f"input {index}: relative gradient error {error:.2e}"


def assert_rel_close(actual: np.ndarray, expected: np.ndarray, rel: float) -> None:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    assert actual.shape == expected.shape
    error = np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), 1e-12)
    assert error <= rel, f"relative error {error:.2e} > {rel:.0e}"


@pytest.fixture
def grad_check():
    return check_gradients


@pytest.fixture
def rel_close():
    return assert_rel_close


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def tiny_checkpoint():
    return init_checkpoint(TINY_CONFIG)


@pytest.fixture
def deep_checkpoint():
    return init_checkpoint(DEEP_CONFIG)


@pytest.fixture
def corpus_ids():
    return np.random.default_rng(7).integers(0, TINY_CONFIG.vocab_size, size=400).astype(np.int32)


@pytest.fixture
def calibset(corpus_ids):
    return make_calibset(corpus_ids, c=8, k=8, seed=0)


@pytest.fixture
def eval_tokens():
    return np.random.default_rng(11).integers(0, TINY_CONFIG.vocab_size, size=120).astype(np.int32)


@pytest.fixture
def fast_cfg():
    """Calibration settings small enough for unit tests on the four-block model."""
    return CalibConfig(wbits=4, abits=8, ls=1, ld=1, s=2, i=1, gamma=0.5, rank=2, epochs=2, batch_size=4,
                       lr_scale=1e-2, lr_lora=1e-3, calib_samples=8, calib_tokens=8, seed=0)


@pytest.fixture(autouse=True)
def reset_debug():
    yield
    nk.set_debug(False)
