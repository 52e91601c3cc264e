"""
AdamW with decoupled weight decay and a linear-decay-to-zero learning rate schedule.

    m_t = β1·m + (1 − β1)·g
    v_t = β2·v + (1 − β2)·g²
    θ   = θ·(1 − lr·λ) − lr·m̂ / (√v̂ + ε)
"""
import dataclasses as dc
import typing as t

import numpy as np

import slider_quant.core.logging as logging
from slider_quant.core.errors import ContractError, OptimizerError
from slider_quant.core.numkit import DTYPE, Tensor

logger = logging.get_logger(__name__)


@dc.dataclass
class AdamWState:
    """Moment buffers and hyper-parameters for one group of parameters."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: t.List[np.ndarray] = dc.field(default_factory=list)
    second_moment: t.List[np.ndarray] = dc.field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise OptimizerError(f"Invalid learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise OptimizerError(f"Invalid betas: ({self.beta1}, {self.beta2})")
        if self.eps < 0 or self.weight_decay < 0:
            raise OptimizerError(f"Invalid eps/weight_decay: {self.eps}/{self.weight_decay}")


def init_state(params: t.Sequence[Tensor], lr: float, **hyper) -> AdamWState:
    state = AdamWState(lr=lr, **hyper)
    state.first_moment = [np.zeros(p.shape, dtype=DTYPE) for p in params]
    state.second_moment = [np.zeros(p.shape, dtype=DTYPE) for p in params]
    return state


def adamw_step(params: t.Sequence[Tensor], grads: t.Sequence[t.Optional[np.ndarray]],
               state: AdamWState, lr: float) -> None:
    """
    Apply one AdamW update in place and advance ``state.step``.

    :param params: Parameters to update
    :param grads: One gradient per parameter; None is treated as zero
    :param state: Moment buffers matching ``params``
    :param lr: Effective learning rate for this step
    :raises OptimizerError: On a NaN/Inf gradient or negative learning rate
    """
    if lr < 0:
        raise OptimizerError(f"Invalid learning rate: {lr}")
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ContractError(f"adamw_step: {len(params)} params, {len(grads)} grads, "
                            f"{len(state.first_moment)} moment buffers")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros(param.shape, dtype=DTYPE)
        if grad.shape != param.shape:
            raise ContractError(f"adamw_step: grad shape {grad.shape} != param shape {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"Non-finite gradient for parameter {index} (shape {param.shape}) "
                                 f"at step {state.step}")

        g = grad.astype(np.float64)
        m = state.beta1 * state.first_moment[index].astype(np.float64) + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[index].astype(np.float64) + (1.0 - state.beta2) * g * g
        state.first_moment[index] = m.astype(DTYPE)
        state.second_moment[index] = v.astype(DTYPE)

        theta = param.data.astype(np.float64) * (1.0 - lr * state.weight_decay)
        theta -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = theta.astype(DTYPE)


def linear_decay(base_lr: float, step: int, total_steps: int) -> float:
    """
    Learning rate for 0-based ``step`` of ``total_steps`` decaying linearly to zero;
    the final step runs at ``base_lr / total_steps``.
    """
    if total_steps <= 0:
        raise ContractError(f"linear_decay needs total_steps >= 1, got {total_steps}")
    return base_lr * (total_steps - step) / total_steps


@dc.dataclass
class ParamGroup:
    params: t.List[Tensor]
    state: AdamWState
    name: str = ""


class AdamW:
    """
    AdamW over named parameter groups, each with its own base learning rate, driven by
    a linear-decay schedule over ``total_steps``.
    """

    def __init__(self, groups: t.Dict[str, t.Tuple[t.Sequence[Tensor], float]], total_steps: int,
                 weight_decay: float = 0.0, betas: t.Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.total_steps = total_steps
        self.steps_taken = 0
        self.groups = [
            ParamGroup(list(params), init_state(list(params), lr, beta1=betas[0], beta2=betas[1],
                                                eps=eps, weight_decay=weight_decay), name)
            for name, (params, lr) in groups.items()
        ]

    @property
    def parameters(self) -> t.List[Tensor]:
        return [param for group in self.groups for param in group.params]

    def zero_grad(self) -> None:
        for group in self.groups:
            for param in group.params:
                param.zero_grad()

    def current_lr(self, group: ParamGroup) -> float:
        step = min(self.steps_taken, self.total_steps - 1)
        return linear_decay(group.state.lr, step, self.total_steps)

    def step(self) -> None:
        for group in self.groups:
            adamw_step(group.params, [p.grad for p in group.params], group.state, self.current_lr(group))
        self.steps_taken += 1
