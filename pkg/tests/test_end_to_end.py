"""
Desk-scale runs on the bundled corpus. They take minutes, so they carry the ``slow`` marker
and are deselected by default; run them with ``pytest -m slow``. Set SLIDER_QUANT_CHECKPOINT
to a checkpoint written by ``slider_quant pretrain`` (token files next to it) to skip the
pretraining step of the comparison.
"""
import os
from pathlib import Path
import dataclasses as dc
import typing as t

import numpy as np
import pytest

import slider_quant.core.datafiles.packio as packio
from slider_quant.calib import baselines
from slider_quant.calib.config import CalibConfig
from slider_quant.calib.engine import run_pipeline
from slider_quant.evalprobe.metrics import perplexity
from slider_quant.model.corpus import build_stream, load_text, make_calibset, unigram_perplexity
from slider_quant.model.tinymodel import Checkpoint, ModelConfig, pretrain

pytestmark = pytest.mark.slow

CHECKPOINT = os.environ.get("SLIDER_QUANT_CHECKPOINT")
COMPARISON_MODEL = ModelConfig(d_model=64, n_heads=4, n_layers=8, d_ff=172, max_seq_len=64, seed=0)
TWO_LAYER_MODEL = ModelConfig(d_model=64, n_heads=4, n_layers=2, d_ff=172, max_seq_len=64, seed=0)


@dc.dataclass(frozen=True)
class Pretrained:
    checkpoint: Checkpoint
    train: np.ndarray
    test: np.ndarray


def _pretrain_on_corpus(model: ModelConfig, steps: int) -> Pretrained:
    stream, tokenizer = build_stream(load_text())
    model = dc.replace(model, vocab_size=tokenizer.vocab_size)
    result = pretrain(model, stream.split("train"), steps=steps, lr=3e-3, batch_size=16)
    return Pretrained(result.checkpoint, stream.split("train"), stream.split("test"))


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory) -> Pretrained:
    if CHECKPOINT:
        folder = Path(CHECKPOINT).parent
        return Pretrained(packio.load_checkpoint(CHECKPOINT), packio.load_tokens(folder / "tokens_train.npy"),
                          packio.load_tokens(folder / "tokens_test.npy"))
    run = _pretrain_on_corpus(COMPARISON_MODEL, steps=2000)
    # Through the checkpoint file, as the CLI would hand it over.
    path = packio.save_checkpoint(run.checkpoint, tmp_path_factory.mktemp("pretrained") / "model.slqm")
    return dc.replace(run, checkpoint=packio.load_checkpoint(path))


@pytest.fixture(scope="session")
def two_layer() -> Pretrained:
    return _pretrain_on_corpus(TWO_LAYER_MODEL, steps=2000)


def test_two_layer_model_beats_unigram_perplexity(two_layer: Pretrained):
    run = two_layer
    vocab_size = run.checkpoint.config.vocab_size
    assert perplexity(run.checkpoint, run.test) < unigram_perplexity(run.train, run.test, vocab_size)


def test_sliding_schedule_beats_baselines(pretrained: Pretrained):
    checkpoint = pretrained.checkpoint
    calib_tokens = min(CalibConfig.calib_tokens, checkpoint.config.max_seq_len)
    cfg = CalibConfig(wbits=4, abits=4, seed=0, calib_tokens=calib_tokens)
    calibset = make_calibset(pretrained.train, cfg.calib_samples, cfg.calib_tokens, cfg.seed)
    num_layers = checkpoint.config.n_layers

    ours = run_pipeline(checkpoint, baselines.sliderquant_schedule(num_layers, cfg), calibset, cfg).model
    fixed = baselines.run_baseline("fixed", checkpoint, calibset, cfg).model
    rtn = baselines.run_baseline("rtn", checkpoint, calibset, cfg).model

    scores: t.Dict[str, float] = {name: perplexity(model, pretrained.test)
                                  for name, model in (("ours", ours), ("fixed", fixed), ("rtn", rtn))}
    assert scores["ours"] < scores["fixed"], scores
    assert scores["ours"] < 0.9 * scores["rtn"], scores
