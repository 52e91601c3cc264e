"""
Desk-scale Llama-style decoder: RMSNorm, rotary attention, SiLU-gated MLP, no biases.

Linear weights are stored n×m (input × output) so a linear is ``x @ W``.
"""
import dataclasses as dc
import math
import typing as t

import numpy as np

import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
import slider_quant.core.optim as optim
from slider_quant.core.errors import ConfigError, ContractError, DimensionError, DivergenceError
from slider_quant.quant.transforms import LINEAR_NAMES

logger = logging.get_logger(__name__)

INIT_STD = 0.02
NORM_NAMES = ("attn_norm", "mlp_norm")
BLOCK_TENSOR_NAMES = NORM_NAMES + LINEAR_NAMES

# Maps (name, x) to the linear's output for one block.
LinearFn = t.Callable[[str, nk.Tensor], nk.Tensor]


@dc.dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 12
    d_ff: int = 344
    max_seq_len: int = 128
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model divisible by n_heads violated: {self.d_model} % {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError(f"even head dimension violated: {self.d_model // self.n_heads}")
        if self.n_layers < 1 or self.max_seq_len < 1 or self.d_ff < 1:
            raise ConfigError(f"positive n_layers/max_seq_len/d_ff violated: {self}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def linear_shape(self, name: str) -> t.Tuple[int, int]:
        d, ff = self.d_model, self.d_ff
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "up": (d, ff), "gate": (d, ff), "down": (ff, d)}[name]

    def linear_shapes(self) -> t.Dict[str, t.Tuple[int, int]]:
        return {name: self.linear_shape(name) for name in LINEAR_NAMES}


def block_key(layer: int, name: str) -> str:
    return f"blocks.{layer}.{name}"


def weight_names(config: ModelConfig) -> t.List[str]:
    """Declared tensor order used by checkpoints."""
    names = ["embed"]
    for layer in range(config.n_layers):
        names += [block_key(layer, name) for name in BLOCK_TENSOR_NAMES]
    return names + ["final_norm", "lm_head"]


def weight_shape(config: ModelConfig, name: str) -> t.Tuple[int, ...]:
    if name == "embed":
        return (config.vocab_size, config.d_model)
    if name == "lm_head":
        return (config.d_model, config.vocab_size)
    if name == "final_norm":
        return (config.d_model,)
    short = name.rsplit(".", 1)[-1]
    if short in NORM_NAMES:
        return (config.d_model,)
    return config.linear_shape(short)


@dc.dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    weights: t.Dict[str, np.ndarray]

    def __post_init__(self):
        expected = weight_names(self.config)
        if list(self.weights) != expected:
            missing = sorted(set(expected) - set(self.weights))
            raise ContractError(f"Checkpoint tensors do not match the declared order; missing={missing[:5]}")
        for name in expected:
            if self.weights[name].shape != weight_shape(self.config, name):
                raise DimensionError(f"{name}: shape {self.weights[name].shape} != "
                                     f"{weight_shape(self.config, name)}")

    def block_weights(self, layer: int) -> t.Dict[str, np.ndarray]:
        return {name: self.weights[block_key(layer, name)] for name in BLOCK_TENSOR_NAMES}


def init_checkpoint(config: ModelConfig) -> Checkpoint:
    if config.vocab_size < 2:
        raise ConfigError(f"vocab_size >= 2 violated: {config.vocab_size}")
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name in weight_names(config):
        shape = weight_shape(config, name)
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=nk.DTYPE)
        else:
            weights[name] = rng.normal(0.0, INIT_STD, size=shape).astype(nk.DTYPE)
    return Checkpoint(config, weights)


def rotary_tables(config: ModelConfig, length: int) -> t.Tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = 1.0 / (config.rope_base ** (np.arange(half, dtype=np.float64) / half))
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(nk.DTYPE), np.sin(angles).astype(nk.DTYPE)


def fp_linear(weights: t.Dict[str, nk.Tensor]) -> LinearFn:
    return lambda name, x: x @ weights[name]


def _split_heads(x: nk.Tensor, n_heads: int) -> nk.Tensor:
    batch, length, width = x.shape
    return nk.transpose(nk.reshape(x, (batch, length, n_heads, width // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: nk.Tensor) -> nk.Tensor:
    batch, heads, length, head_dim = x.shape
    return nk.reshape(nk.transpose(x, (0, 2, 1, 3)), (batch, length, heads * head_dim))


def block_forward(x: nk.Tensor, norms: t.Tuple[nk.Tensor, nk.Tensor], linear: LinearFn,
                  config: ModelConfig) -> nk.Tensor:
    """
    One decoder block over a [B×T×d] input.

    :param norms: (attention norm gain, MLP norm gain)
    :param linear: Computes each of the seven linears; this is where quantization plugs in
    """
    length = x.shape[1]
    cos, sin = rotary_tables(config, length)

    normed = nk.rmsnorm(x, norms[0], config.norm_eps)
    q = nk.rope(_split_heads(linear("q", normed), config.n_heads), cos, sin)
    k = nk.rope(_split_heads(linear("k", normed), config.n_heads), cos, sin)
    v = _split_heads(linear("v", normed), config.n_heads)
    scores = nk.mul(q @ nk.swap_last(k), 1.0 / math.sqrt(config.head_dim))
    context = _merge_heads(nk.softmax(scores, axis=-1, causal=True) @ v)
    h = x + linear("o", context)

    normed = nk.rmsnorm(h, norms[1], config.norm_eps)
    gated = nk.silu(linear("gate", normed)) * linear("up", normed)
    return h + linear("down", gated)


class TinyLM:
    """
    Forward passes over a weight mapping. ``linear_for_block`` may replace the plain
    FP linears of any block (quantized blocks, calibration).
    """

    def __init__(self, config: ModelConfig, weights: t.Dict[str, t.Union[np.ndarray, nk.Tensor]],
                 linear_for_block: t.Optional[t.Callable[[int], t.Optional[LinearFn]]] = None):
        self.config = config
        self.weights = weights
        self.linear_for_block = linear_for_block

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TinyLM":
        return cls(checkpoint.config, checkpoint.weights)

    def tensor(self, name: str) -> nk.Tensor:
        value = self.weights[name]
        return value if isinstance(value, nk.Tensor) else nk.Tensor(value)

    def block_tensors(self, layer: int) -> t.Dict[str, nk.Tensor]:
        return {name: self.tensor(block_key(layer, name)) for name in BLOCK_TENSOR_NAMES}

    def embed(self, tokens: np.ndarray) -> nk.Tensor:
        return nk.embedding(self.tensor("embed"), tokens)

    def block(self, layer: int, x: nk.Tensor, linear: t.Optional[LinearFn] = None) -> nk.Tensor:
        tensors = self.block_tensors(layer)
        if linear is None and self.linear_for_block is not None:
            linear = self.linear_for_block(layer)
        return block_forward(x, (tensors["attn_norm"], tensors["mlp_norm"]),
                             linear or fp_linear(tensors), self.config)

    def head(self, x: nk.Tensor) -> nk.Tensor:
        normed = nk.rmsnorm(x, self.tensor("final_norm"), self.config.norm_eps)
        return normed @ self.tensor("lm_head")

    def run_blocks(self, x: nk.Tensor, start: int, stop: int) -> nk.Tensor:
        for layer in range(start, stop):
            x = self.block(layer, x)
        return x

    def forward(self, tokens: np.ndarray, capture: t.Optional[t.Iterable[int]] = None
                ) -> t.Tuple[np.ndarray, t.Dict[int, np.ndarray]]:
        """
        Causal forward pass without gradient tracking.

        :param tokens: [T] or [B×T] token ids, T <= max_seq_len
        :param capture: Layers whose block input activations are returned
        :returns: (logits [T×V] or [B×T×V], {layer: block input})
        :raises ContractError: On context overflow
        """
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        batch = tokens[None, :] if squeeze else tokens
        if batch.shape[1] > self.config.max_seq_len:
            raise ContractError(f"Context overflow: {batch.shape[1]} tokens > max_seq_len {self.config.max_seq_len}")
        wanted = set(capture or ())
        captured = {}
        with nk.no_grad():
            x = self.embed(batch)
            for layer in range(self.config.n_layers):
                if layer in wanted:
                    captured[layer] = x.data.copy()
                x = self.block(layer, x)
            logits = self.head(x).data
        if squeeze:
            logits = logits[0]
            captured = {layer: act[0] for layer, act in captured.items()}
        return logits, captured

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        return self.forward(tokens)[0]


def forward(checkpoint: Checkpoint, tokens: np.ndarray, capture: t.Optional[t.Iterable[int]] = None
            ) -> t.Tuple[np.ndarray, t.Dict[int, np.ndarray]]:
    return TinyLM.from_checkpoint(checkpoint).forward(tokens, capture)


@dc.dataclass(frozen=True)
class PretrainConfig:
    model: ModelConfig = dc.field(default_factory=ModelConfig)
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 16
    seq_len: t.Optional[int] = None
    weight_decay: float = 0.0
    train_fraction: float = 0.9
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError(f"steps >= 0, lr > 0, batch_size >= 1 violated: "
                              f"{self.steps}, {self.lr}, {self.batch_size}")


@dc.dataclass(frozen=True)
class PretrainResult:
    checkpoint: Checkpoint
    final_loss: float
    losses: t.Tuple[float, ...]


def _sample_batch(rng: np.random.Generator, corpus: np.ndarray, batch_size: int,
                  length: int) -> t.Tuple[np.ndarray, np.ndarray]:
    offsets = rng.integers(0, len(corpus) - length, size=batch_size)
    window = np.stack([corpus[o:o + length + 1] for o in offsets])
    return window[:, :-1], window[:, 1:]


def pretrain(config: ModelConfig, corpus: np.ndarray, steps: int, lr: float, batch_size: int = 16,
             seq_len: t.Optional[int] = None, weight_decay: float = 0.0, log_every: int = 100) -> PretrainResult:
    """
    Train from scratch with next-token cross entropy and AdamW (linear decay to zero).

    :param corpus: Training token ids
    :raises ContractError: If the corpus is shorter than one batch of contexts
    :raises DivergenceError: If the loss becomes non-finite
    """
    seq_len = seq_len or config.max_seq_len
    if seq_len > config.max_seq_len:
        raise ConfigError(f"seq_len <= max_seq_len violated: {seq_len} > {config.max_seq_len}")
    if len(corpus) < (seq_len + 1) * batch_size:
        raise ContractError(f"Corpus of {len(corpus)} tokens is shorter than {batch_size} contexts of {seq_len + 1}")

    initial = init_checkpoint(config)
    if steps == 0:
        return PretrainResult(initial, float("nan"), ())

    params = {name: nk.Tensor(value, requires_grad=True) for name, value in initial.weights.items()}
    optimizer = optim.AdamW({"model": (list(params.values()), lr)}, total_steps=steps, weight_decay=weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    model = TinyLM(config, params)

    losses = []
    for step in range(steps):
        inputs, targets = _sample_batch(rng, corpus, batch_size, seq_len)
        x = model.embed(inputs)
        x = model.run_blocks(x, 0, config.n_layers)
        loss = nk.cross_entropy(model.head(x), targets)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"Pretraining loss is not finite at step {step}")
        optimizer.zero_grad()
        nk.backward(loss, wrt=optimizer.parameters)
        optimizer.step()
        losses.append(loss.item())
        if (step + 1) % log_every == 0 or step + 1 == steps:
            logger.info(f"pretrain step {step + 1}/{steps}: loss {losses[-1]:.4f}")

    weights = {name: tensor.data.copy() for name, tensor in params.items()}
    return PretrainResult(Checkpoint(config, weights), losses[-1], tuple(losses))
