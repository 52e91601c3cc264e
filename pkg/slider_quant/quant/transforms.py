"""
Learnable channel scaling and low-rank weight refinement around each quantized linear:

    X̃ = X ⊘ α,   W̃ = W ⊙ α + A·B,   Y = quantizer(X̃) · quantizer(W̃)

and their absorption into plain weights after calibration.
"""
from enum import Enum
import dataclasses as dc
import typing as t

import numpy as np

import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
import slider_quant.quant.quantizer as qz
from slider_quant.core.errors import ContractError, DimensionError, DomainError

logger = logging.get_logger(__name__)

LINEAR_NAMES = ("q", "k", "v", "o", "up", "gate", "down")

# Block input each channel scale governs, and the linears reading that input.
SCALE_OWNERS: t.Dict[str, t.Tuple[str, ...]] = {
    "attn_in": ("q", "k", "v"),
    "attn_out": ("o",),
    "mlp_in": ("up", "gate"),
    "mlp_out": ("down",),
}
SCALE_OF_LINEAR = {name: owner for owner, names in SCALE_OWNERS.items() for name in names}

DEFAULT_RANK = 4
LORA_INIT_STD = 0.01


class UpstreamKind(Enum):
    NORM_GAIN = "norm_gain"
    LINEAR_COLUMNS = "linear_columns"
    NONE = "none"


@dc.dataclass(frozen=True)
class UpstreamOp:
    """The operator producing a scaled activation; 1/α folds into it."""
    name: str
    kind: UpstreamKind


# Fold sites per scale owner.
#   attn_in, mlp_in: preceding RMSNorm gain.
#   attn_out: O reads the attention context, which is linear in V's output columns.
#   mlp_out: Down reads silu(gate) * up; only Up's columns fold exactly through the product.
UPSTREAM_OF_SCALE: t.Dict[str, UpstreamOp] = {
    "attn_in": UpstreamOp("attn_norm", UpstreamKind.NORM_GAIN),
    "attn_out": UpstreamOp("v", UpstreamKind.LINEAR_COLUMNS),
    "mlp_in": UpstreamOp("mlp_norm", UpstreamKind.NORM_GAIN),
    "mlp_out": UpstreamOp("up", UpstreamKind.LINEAR_COLUMNS),
}


@dc.dataclass
class ChannelScale:
    """α over ``n`` input channels, stored as log α so it stays positive."""
    owner: str
    log_alpha: nk.Tensor

    @classmethod
    def ones(cls, owner: str, channels: int) -> "ChannelScale":
        return cls(owner, nk.Tensor(np.zeros(channels), requires_grad=True))

    @classmethod
    def from_alpha(cls, owner: str, alpha: np.ndarray) -> "ChannelScale":
        alpha = np.asarray(alpha, dtype=nk.DTYPE)
        if np.any(alpha <= 0):
            raise DomainError(f"Channel scale {owner} must be positive to be stored in log space")
        return cls(owner, nk.Tensor(np.log(alpha), requires_grad=True))

    @property
    def channels(self) -> int:
        return self.log_alpha.shape[0]

    def alpha(self) -> nk.Tensor:
        return nk.exp(self.log_alpha)

    def alpha_values(self) -> np.ndarray:
        return np.exp(self.log_alpha.data)


@dc.dataclass
class LoraDelta:
    """Rank-r refinement A·B with A n×r and B r×m."""
    a: nk.Tensor
    b: nk.Tensor

    @classmethod
    def zero_delta(cls, rows: int, cols: int, rank: int, rng: np.random.Generator) -> "LoraDelta":
        if rank < 1:
            raise ContractError(f"LoRA rank must be >= 1, got {rank}")
        a = nk.Tensor(rng.normal(0.0, LORA_INIT_STD, size=(rows, rank)), requires_grad=True)
        b = nk.Tensor(np.zeros((rank, cols)), requires_grad=True)
        return cls(a, b)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> nk.Tensor:
        return self.a @ self.b

    def delta_values(self) -> np.ndarray:
        return self.a.data @ self.b.data


@dc.dataclass
class BlockParams:
    """Learnable state of one transformer block: four channel scales, seven LoRA pairs."""
    scales: t.Dict[str, ChannelScale]
    loras: t.Dict[str, LoraDelta]
    committed: bool = False

    def scale_for(self, linear: str) -> ChannelScale:
        return self.scales[SCALE_OF_LINEAR[linear]]

    def scale_parameters(self) -> t.List[nk.Tensor]:
        return [self.scales[owner].log_alpha for owner in SCALE_OWNERS]

    def lora_parameters(self) -> t.List[nk.Tensor]:
        return [tensor for name in LINEAR_NAMES for tensor in (self.loras[name].a, self.loras[name].b)]

    def commit(self) -> None:
        self.committed = True
        for tensor in self.scale_parameters() + self.lora_parameters():
            tensor.requires_grad = False
            tensor.zero_grad()

    def ensure_trainable(self) -> None:
        if self.committed:
            raise ContractError("BlockParams is committed and rejects further updates")


def init_block_params(weight_shapes: t.Dict[str, t.Tuple[int, int]], rank: int,
                      rng: np.random.Generator) -> BlockParams:
    """
    Identity-initialized transforms (α = 1, B = 0) for a block with the given linear shapes.

    :param weight_shapes: n×m shape per linear name
    :param rank: LoRA rank r
    :param rng: Generator for the LoRA A matrices
    """
    scales = {}
    for owner, names in SCALE_OWNERS.items():
        inputs = {weight_shapes[name][0] for name in names}
        if len(inputs) != 1:
            raise DimensionError(f"Linears sharing scale {owner} disagree on input width: {sorted(inputs)}")
        scales[owner] = ChannelScale.ones(owner, inputs.pop())
    loras = {name: LoraDelta.zero_delta(*weight_shapes[name], rank, rng) for name in LINEAR_NAMES}
    return BlockParams(scales=scales, loras=loras)


def apply_transform(w: nk.Tensor, x: nk.Tensor, scale: ChannelScale,
                    lora: LoraDelta) -> t.Tuple[nk.Tensor, nk.Tensor]:
    """
    (W̃, X̃) with X̃[t, j] = X[t, j] / α[j] and W̃[j, :] = W[j, :]·α[j] + (A·B)[j, :].

    :raises DimensionError: On inconsistent shapes
    :raises DomainError: If any α is zero
    """
    n, m = w.shape
    if x.shape[-1] != n or scale.channels != n:
        raise DimensionError(f"apply_transform: X {x.shape}, W {w.shape}, α ({scale.channels},)")
    if lora.a.shape[0] != n or lora.b.shape[1] != m:
        raise DimensionError(f"apply_transform: LoRA {lora.a.shape}·{lora.b.shape} does not match W {w.shape}")
    alpha = scale.alpha()
    x_scaled = nk.div(x, alpha)
    w_scaled = nk.mul(w, nk.reshape(alpha, (n, 1))) + lora.delta()
    return w_scaled, x_scaled


def quantized_layer_forward(w: nk.Tensor, x: nk.Tensor, scale: ChannelScale, lora: LoraDelta,
                            w_spec: t.Optional[qz.QuantSpec], a_spec: t.Optional[qz.QuantSpec],
                            fraction: float = 1.0) -> nk.Tensor:
    """
    quantizer(X̃) · quantizer(W̃), differentiable in α, A and B through the STE.

    :param w_spec: Weight quantizer; None keeps weights in full precision
    :param a_spec: Activation quantizer; None keeps activations in full precision
    :param fraction: Share of output channels whose weights are quantized; 0 disables all quantization
    """
    w_scaled, x_scaled = apply_transform(w, x, scale, lora)
    if fraction <= 0:
        return x_scaled @ w_scaled
    x_q = qz.fake_quant(x_scaled, a_spec) if a_spec is not None else x_scaled
    w_q = qz.fake_quant_columns(w_scaled, w_spec, fraction) if w_spec is not None else w_scaled
    return x_q @ w_q


def absorb(w: np.ndarray, scale: ChannelScale, lora: LoraDelta) -> np.ndarray:
    """W_final = W ⊙ α + A·B as a plain array."""
    alpha = scale.alpha_values()
    if alpha.shape[0] != w.shape[0]:
        raise DimensionError(f"absorb: α ({alpha.shape[0]},) does not match W {w.shape}")
    return (w * alpha[:, None] + lora.delta_values()).astype(nk.DTYPE)


def fold_scale(upstream: UpstreamOp, params: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """
    Fold the activation division by α into the operator producing that activation.

    :param upstream: Producing operator
    :param params: Its foldable parameters (norm gain vector or n×m weight)
    :param alpha: Channel scale of the consuming linears
    :raises ContractError: If the operator has no foldable parameters
    """
    if upstream.kind is UpstreamKind.NORM_GAIN:
        return (params / alpha).astype(nk.DTYPE)
    if upstream.kind is UpstreamKind.LINEAR_COLUMNS:
        return (params / alpha[None, :]).astype(nk.DTYPE)
    raise ContractError(f"Upstream operator {upstream.name} has no foldable parameters")


def absorb_block(weights: t.Dict[str, np.ndarray], params: BlockParams) -> t.Dict[str, np.ndarray]:
    """
    Absorb a committed block's transforms into its plain weights.

    :param weights: Block weights keyed by short name (q..down, attn_norm, mlp_norm)
    :param params: Committed block params
    :returns: New weight mapping whose FP forward equals the transformed FP forward
    :raises ContractError: If ``params`` is not committed
    """
    if not params.committed:
        raise ContractError("absorb_block needs a committed block")
    absorbed = dict(weights)
    for name in LINEAR_NAMES:
        absorbed[name] = absorb(weights[name], params.scale_for(name), params.loras[name])
    for owner, upstream in UPSTREAM_OF_SCALE.items():
        alpha = params.scales[owner].alpha_values()
        absorbed[upstream.name] = fold_scale(upstream, absorbed[upstream.name], alpha)
    logger.debug("Absorbed channel scales and LoRA deltas into block weights")
    return absorbed
