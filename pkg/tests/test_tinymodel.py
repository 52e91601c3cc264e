import dataclasses as dc

import numpy as np
import pytest

import slider_quant.core.numkit as nk
import slider_quant.quant.transforms as tf
from slider_quant.core.errors import ConfigError, ContractError, DimensionError
from slider_quant.model.quantized import QuantizedModel
from slider_quant.model.tinymodel import (Checkpoint, ModelConfig, TinyLM, block_key, forward, init_checkpoint,
                                          pretrain, weight_names)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=12, n_heads=4)
    with pytest.raises(ConfigError):
        init_checkpoint(ModelConfig(vocab_size=1))


def test_checkpoint_declared_order(tiny_checkpoint):
    names = weight_names(tiny_checkpoint.config)
    assert names[0] == "embed" and names[-1] == "lm_head"
    assert names[1:10] == [block_key(0, n) for n in ("attn_norm", "mlp_norm") + tf.LINEAR_NAMES]


def test_checkpoint_rejects_bad_shapes(tiny_checkpoint):
    weights = dict(tiny_checkpoint.weights)
    weights[block_key(0, "q")] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(DimensionError):
        Checkpoint(tiny_checkpoint.config, weights)
    weights = dict(tiny_checkpoint.weights)
    del weights["lm_head"]
    with pytest.raises(ContractError):
        Checkpoint(tiny_checkpoint.config, weights)


def test_forward_shapes_and_capture(tiny_checkpoint):
    tokens = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    logits, captured = forward(tiny_checkpoint, tokens, capture=[0, 2])
    assert logits.shape == (2, 4, 11)
    assert set(captured) == {0, 2}
    assert captured[2].shape == (2, 4, 16)
    single, _ = forward(tiny_checkpoint, tokens[0])
    np.testing.assert_allclose(single, logits[0], rtol=1e-5, atol=1e-6)


def test_forward_is_causal(tiny_checkpoint):
    a = forward(tiny_checkpoint, np.array([1, 2, 3, 4]))[0]
    b = forward(tiny_checkpoint, np.array([1, 2, 3, 9]))[0]
    np.testing.assert_allclose(a[:3], b[:3], rtol=1e-5, atol=1e-6)
    assert not np.allclose(a[3], b[3])


def test_context_overflow(tiny_checkpoint):
    with pytest.raises(ContractError):
        forward(tiny_checkpoint, np.zeros(17, dtype=np.int32))


def test_block_gradient(tiny_checkpoint, grad_check):
    model = TinyLM.from_checkpoint(tiny_checkpoint)
    weights = {name: value * 10 for name, value in tiny_checkpoint.block_weights(0).items()}
    rng = np.random.default_rng(0)
    r = rng.normal(size=(1, 3, 16))

    def loss(x, q):
        tensors = {name: nk.Tensor(value) for name, value in weights.items()}
        tensors["q"] = q
        out = model.block(0, x, linear=lambda name, h: h @ tensors[name])
        return nk.reduce_sum(nk.mul(out, r))

    grad_check(loss, [rng.normal(size=(1, 3, 16)), weights["q"]], rel=1e-2, h=1e-2)


def test_absorbed_model_matches_transformed_model(tiny_checkpoint, rng, rel_close):
    """Absorb random transforms into every block and compare logits with the transformed forward."""
    config = tiny_checkpoint.config
    weights = {name: value * 20 if value.ndim == 2 else value for name, value in tiny_checkpoint.weights.items()}
    checkpoint = Checkpoint(config, weights)
    params = {}
    for layer in range(config.n_layers):
        block = tf.init_block_params(config.linear_shapes(), 2, rng)
        for owner, scale in block.scales.items():
            block.scales[owner] = tf.ChannelScale.from_alpha(owner, rng.uniform(0.5, 2.0, size=scale.channels))
        for lora in block.loras.values():
            lora.b.data = rng.normal(scale=0.1, size=lora.b.shape).astype(np.float32)
        params[layer] = block

    def transformed(layer):
        tensors = TinyLM.from_checkpoint(checkpoint).block_tensors(layer)
        block = params[layer]
        return lambda name, x: tf.quantized_layer_forward(tensors[name], x, block.scale_for(name),
                                                          block.loras[name], None, None)

    tokens = rng.integers(0, config.vocab_size, size=(100, 6))
    expected = TinyLM(config, weights, transformed).logits(tokens)

    absorbed = dict(weights)
    for layer, block in params.items():
        block.commit()
        for name, value in tf.absorb_block(checkpoint.block_weights(layer), block).items():
            absorbed[block_key(layer, name)] = value
    actual = forward(Checkpoint(config, absorbed), tokens)[0]
    rel_close(actual, expected, 1e-4)


def test_quantized_model_partition(tiny_checkpoint):
    with pytest.raises(ContractError):
        QuantizedModel(config=tiny_checkpoint.config, w_spec=None, a_bits=16, quantized={},
                       fp={"embed": tiny_checkpoint.weights["embed"]})


def test_pretrain_reduces_loss(corpus_ids):
    config = ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=8, seed=0)
    result = pretrain(config, corpus_ids, steps=30, lr=1e-2, batch_size=4, log_every=10)
    assert len(result.losses) == 30
    assert result.losses[-1] < result.losses[0]
    assert result.checkpoint.config == config


def test_pretrain_needs_enough_tokens():
    config = ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=8)
    with pytest.raises(ContractError):
        pretrain(config, np.arange(10) % 11, steps=1, lr=1e-2, batch_size=4)


def test_pretrain_is_deterministic(corpus_ids):
    config = ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=8, seed=2)
    first = pretrain(config, corpus_ids, steps=3, lr=1e-2, batch_size=2)
    second = pretrain(dc.replace(config), corpus_ids, steps=3, lr=1e-2, batch_size=2)
    for name in weight_names(config):
        np.testing.assert_array_equal(first.checkpoint.weights[name], second.checkpoint.weights[name])
