import csv
import dataclasses as dc
import json

import numpy as np
import pytest

import slider_quant.core.numkit as nk
import slider_quant.quant.quantizer as qz
import slider_quant.quant.schedule as sch
from slider_quant.calib.config import CalibConfig, load_calib_config, save_calib_config
from slider_quant.calib.engine import (LOSS_LOG_COLUMNS, LossRecord, build_artifact, init_state, quantize_window,
                                       rising_stages, run_pipeline, window_loss, write_loss_log)
from slider_quant.core.errors import ConfigError, ContractError
from slider_quant.model.quantized import quantized_linear
from slider_quant.model.tinymodel import forward
from slider_quant.quant.transforms import LINEAR_NAMES

ALL_SAMPLES = np.arange(8)


def _schedule(cfg, num_layers):
    return sch.generate_schedule(cfg.schedule_config(num_layers))


def _state(checkpoint, calibset, cfg):
    schedule = _schedule(cfg, checkpoint.config.n_layers)
    return init_state(checkpoint, schedule, calibset, cfg), schedule


def test_16_bit_window_loss_is_negligible(tiny_checkpoint, calibset, fast_cfg):
    cfg = dc.replace(fast_cfg, wbits=16, abits=16)
    state, schedule = _state(tiny_checkpoint, calibset, cfg)
    assert window_loss(schedule.windows[0], 1.0, state, ALL_SAMPLES).item() < 1e-8


def test_zero_fraction_quantizes_nothing(tiny_checkpoint, calibset, fast_cfg):
    state, schedule = _state(tiny_checkpoint, calibset, fast_cfg)
    assert window_loss(schedule.windows[0], 0.0, state, ALL_SAMPLES).item() < 1e-12


def test_identity_transforms_match_round_to_nearest(tiny_checkpoint, calibset, fast_cfg):
    """At initialization the window loss equals the loss of plain W4A4 round-to-nearest."""
    cfg = dc.replace(fast_cfg, abits=4)
    state, schedule = _state(tiny_checkpoint, calibset, cfg)
    loss = window_loss(schedule.windows[0], 1.0, state, ALL_SAMPLES).item()

    spec = cfg.weight_spec()
    rtn = {}
    for name, w in tiny_checkpoint.block_weights(0).items():
        if name in LINEAR_NAMES:
            rtn[name] = nk.Tensor(qz.dequantize(qz.quantize(w, qz.calc_params(w, spec))))
    with nk.no_grad():
        x = nk.Tensor(state.quant_cache)
        expected = state.model.block(0, x, linear=quantized_linear(rtn, qz.QuantSpec.per_token(4)))
        target = state.model.block(0, x)
        oracle = nk.mse(expected, target.data).item()
    assert loss == pytest.approx(oracle, rel=1e-5)
    assert loss > 0


def test_window_needs_committed_prefix(tiny_checkpoint, calibset, fast_cfg):
    state, schedule = _state(tiny_checkpoint, calibset, fast_cfg)
    window = schedule.windows[2]
    assert window.layers == (1, 2)
    with pytest.raises(ContractError):
        window_loss(window, 1.0, state, ALL_SAMPLES)
    with pytest.raises(ContractError):
        quantize_window(window, sch.stage_plan(window, 0.5), state, fast_cfg)


def test_transforms_persist_until_last_window(tiny_checkpoint, calibset, fast_cfg):
    state, schedule = _state(tiny_checkpoint, calibset, fast_cfg)
    first, second = schedule.windows[0], schedule.windows[1]
    before = state.params[0].scales["attn_in"].log_alpha.data.copy()

    quantize_window(first, sch.stage_plan(first, fast_cfg.gamma), state, fast_cfg)
    assert not state.params[0].committed
    assert state.prefix == 0
    assert not np.array_equal(state.params[0].scales["attn_in"].log_alpha.data, before)
    assert [r.window_id for r in state.loss_log] == [0] * 4

    quantize_window(second, sch.stage_plan(second, fast_cfg.gamma), state, fast_cfg)
    assert state.params[0].committed
    assert set(state.committed) == {0}
    assert state.prefix == 1


def test_commit_order_on_deep_schedule(deep_checkpoint, calibset, fast_cfg):
    cfg = dc.replace(fast_cfg, ls=4, ld=4, epochs=1)
    state, schedule = _state(deep_checkpoint, calibset, cfg)
    last = schedule.last_window_of()
    for window in schedule.windows[:9]:
        quantize_window(window, sch.stage_plan(window, cfg.gamma), state, cfg, optimize=False)
        assert set(state.committed) == {layer for layer, position in last.items() if position <= window.position}
    assert 7 in state.committed
    assert 8 not in state.committed
    assert state.prefix == 8


def test_16_bit_pipeline_preserves_model(tiny_checkpoint, calibset, fast_cfg, eval_tokens, rel_close):
    cfg = dc.replace(fast_cfg, wbits=16, abits=16)
    result = run_pipeline(tiny_checkpoint, _schedule(cfg, 4), calibset, cfg)
    assert result.loss_log == ()
    assert result.model.is_complete
    tokens = eval_tokens[:16]
    rel_close(result.model.to_model().logits(tokens), forward(tiny_checkpoint, tokens)[0], 1e-4)


def test_pipeline_is_deterministic(tiny_checkpoint, calibset, fast_cfg):
    first = run_pipeline(tiny_checkpoint, _schedule(fast_cfg, 4), calibset, fast_cfg).model
    second = run_pipeline(tiny_checkpoint, _schedule(fast_cfg, 4), calibset, fast_cfg).model
    assert sorted(first.quantized) == sorted(second.quantized)
    for name, q in first.quantized.items():
        np.testing.assert_array_equal(q.codes, second.quantized[name].codes)
        np.testing.assert_array_equal(q.params.step, second.quantized[name].params.step)
    for name, value in first.fp.items():
        np.testing.assert_array_equal(value, second.fp[name])


def test_partial_schedule_keeps_other_blocks(tiny_checkpoint, calibset, fast_cfg):
    schedule = sch.single_layer_schedule(4, [1])
    model = run_pipeline(tiny_checkpoint, schedule, calibset, fast_cfg, optimize=False).model
    assert model.quantized_layers() == [1]
    assert not model.is_complete
    np.testing.assert_array_equal(model.fp["blocks.0.q"], tiny_checkpoint.weights["blocks.0.q"])


def test_build_artifact_of_fresh_state(tiny_checkpoint, calibset, fast_cfg):
    state, _ = _state(tiny_checkpoint, calibset, fast_cfg)
    assert build_artifact(state).quantized_layers() == []


def test_schedule_layer_count_must_match(tiny_checkpoint, calibset, fast_cfg):
    with pytest.raises(ContractError):
        init_state(tiny_checkpoint, _schedule(fast_cfg, 5), calibset, fast_cfg)


def test_group_size_must_divide_widths(tiny_checkpoint, calibset, fast_cfg):
    cfg = dc.replace(fast_cfg, group="32")
    with pytest.raises(ConfigError):
        init_state(tiny_checkpoint, _schedule(cfg, 4), calibset, cfg)


def test_loss_log(tiny_checkpoint, calibset, fast_cfg, tmp_path):
    result = run_pipeline(tiny_checkpoint, _schedule(fast_cfg, 4), calibset, fast_cfg)
    # Five windows, two stages, two epochs.
    assert len(result.loss_log) == 20
    assert all(np.isfinite(r.loss) for r in result.loss_log)
    csv_path = write_loss_log(result.loss_log, tmp_path / "logs" / "loss.csv")
    with csv_path.open(newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOSS_LOG_COLUMNS
    assert rows[1][:4] == ["0", "PESW", "1", "1"]
    assert len(rows) == 21


def test_loss_warning_compares_epochs_within_a_stage():
    records = [
        LossRecord(0, "expand", 1, 1, 0.9), LossRecord(0, "expand", 1, 2, 0.5),
        LossRecord(0, "expand", 2, 1, 1.2), LossRecord(0, "expand", 2, 2, 1.0),
        LossRecord(0, "expand", 3, 1, 0.2), LossRecord(0, "expand", 3, 2, 0.3),
    ]
    # Stage 2 ends above stage 1's first epoch but still falls within its own stage.
    assert rising_stages(records) == [(3, 0.2, 0.3)]
    assert rising_stages(records[:4]) == []


def test_repeats_optimize_each_window_again(tiny_checkpoint, calibset, fast_cfg):
    cfg = dc.replace(fast_cfg, epochs=1, repeats=2)
    result = run_pipeline(tiny_checkpoint, _schedule(cfg, 4), calibset, cfg)
    assert len(result.loss_log) == 5 * 2 * 2
    assert result.model.is_complete


def test_linear_objective_runs(tiny_checkpoint, calibset, fast_cfg):
    cfg = dc.replace(fast_cfg, epochs=1, objective="linear")
    result = run_pipeline(tiny_checkpoint, sch.single_layer_schedule(4), calibset, cfg)
    assert result.model.is_complete
    assert len(result.loss_log) == 4


@pytest.mark.parametrize("kwargs", [
    dict(wbits=5),
    dict(abits=2),
    dict(group="48"),
    dict(epochs=0),
    dict(lr_scale=0.0),
    dict(target_stream="float"),
])
def test_invalid_calib_config(kwargs):
    with pytest.raises(ConfigError):
        CalibConfig(**kwargs)


def test_epochs_default_by_bit_width():
    assert CalibConfig(wbits=2).resolved_epochs == 60
    assert CalibConfig(wbits=4).resolved_epochs == 20
    assert CalibConfig(epochs=3).resolved_epochs == 3


def test_calib_config_files(tmp_path):
    path = tmp_path / "quantize.cfg"
    path.write_text(json.dumps({"wbits": 3, "group": "128", "lr_scale": 1}))
    cfg = load_calib_config(path)
    assert cfg.wbits == 3 and cfg.group_size == 128
    assert isinstance(cfg.lr_scale, float)
    assert load_calib_config(save_calib_config(cfg, tmp_path / "again.cfg")) == cfg

    path.write_text(json.dumps({"wbits": 3, "window": 2}))
    with pytest.raises(ConfigError):
        load_calib_config(path)
    with pytest.raises(FileNotFoundError):
        load_calib_config(tmp_path / "missing.cfg")
