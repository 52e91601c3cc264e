"""
Quantized model artifact: frozen integer weights for quantized blocks, plain float32
tensors for everything else (embedding, norms, final norm, LM head, FP blocks).
"""
import dataclasses as dc
import typing as t

import numpy as np

import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
import slider_quant.quant.quantizer as qz
from slider_quant.core.errors import ContractError
from slider_quant.model.tinymodel import (BLOCK_TENSOR_NAMES, Checkpoint, LinearFn, ModelConfig, TinyLM,
                                         block_key, weight_names)
from slider_quant.quant.transforms import LINEAR_NAMES

logger = logging.get_logger(__name__)

FP_ACTIVATION_BITS = 16


def activation_spec(bits: int) -> t.Optional[qz.QuantSpec]:
    """Per-token dynamic activation quantizer; 16 bits means activations stay FP."""
    return None if bits >= FP_ACTIVATION_BITS else qz.QuantSpec.per_token(bits)


def quantized_linear(weights: t.Dict[str, nk.Tensor], a_spec: t.Optional[qz.QuantSpec]) -> LinearFn:
    def linear(name: str, x: nk.Tensor) -> nk.Tensor:
        x_q = qz.fake_quant(x, a_spec) if a_spec is not None else x
        return x_q @ weights[name]
    return linear


@dc.dataclass(frozen=True)
class QuantizedModel:
    config: ModelConfig
    w_spec: qz.QuantSpec
    a_bits: int
    quantized: t.Dict[str, qz.QuantizedTensor]
    fp: t.Dict[str, np.ndarray]

    def __post_init__(self):
        expected = set(weight_names(self.config))
        present = set(self.quantized) | set(self.fp)
        if present != expected or set(self.quantized) & set(self.fp):
            raise ContractError(f"QuantizedModel tensors do not partition the model: "
                                f"missing={sorted(expected - present)[:5]} extra={sorted(present - expected)[:5]}")

    @property
    def a_spec(self) -> t.Optional[qz.QuantSpec]:
        return activation_spec(self.a_bits)

    def quantized_layers(self) -> t.List[int]:
        return [layer for layer in range(self.config.n_layers)
                if all(block_key(layer, name) in self.quantized for name in LINEAR_NAMES)]

    @property
    def is_complete(self) -> bool:
        return len(self.quantized_layers()) == self.config.n_layers

    def dequantized_weights(self) -> t.Dict[str, np.ndarray]:
        """All tensors in declared order, quantized ones replaced by their dequantized values."""
        return {name: qz.dequantize(self.quantized[name]) if name in self.quantized else self.fp[name]
                for name in weight_names(self.config)}

    def to_model(self) -> TinyLM:
        """Evaluation model: dequantized weights, dynamic per-token activation quantization in quantized blocks."""
        weights = self.dequantized_weights()
        quantized_layers = set(self.quantized_layers())
        a_spec = self.a_spec

        def linear_for_block(layer: int) -> t.Optional[LinearFn]:
            if layer not in quantized_layers:
                return None
            tensors = {name: nk.Tensor(weights[block_key(layer, name)]) for name in LINEAR_NAMES}
            return quantized_linear(tensors, a_spec)

        return TinyLM(self.config, weights, linear_for_block)

    def with_fp_blocks(self, checkpoint: Checkpoint, keep: t.Iterable[int]) -> "QuantizedModel":
        """
        Copy in which only the blocks in ``keep`` stay quantized; every other block takes
        its original FP tensors from ``checkpoint``.
        """
        keep = set(keep)
        quantized = {}
        fp = {name: value for name, value in self.fp.items() if not name.startswith("blocks.")}
        for layer in range(self.config.n_layers):
            for name in BLOCK_TENSOR_NAMES:
                key = block_key(layer, name)
                if layer in keep and key in self.quantized:
                    quantized[key] = self.quantized[key]
                elif layer in keep:
                    fp[key] = self.fp[key]
                else:
                    fp[key] = checkpoint.weights[key]
        return dc.replace(self, quantized=quantized, fp=fp)
