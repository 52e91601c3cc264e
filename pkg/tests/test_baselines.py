import csv
import dataclasses as dc

import pytest

import slider_quant.calib.baselines as bl
from slider_quant.calib.config import CalibConfig
from slider_quant.core.errors import ConfigError
from slider_quant.model.tinymodel import forward


def test_baseline_schedules(fast_cfg):
    assert [w.layers for w in bl.baseline_schedule("rtn", 4, fast_cfg)] == [(0,), (1,), (2,), (3,)]
    assert [w.layers for w in bl.baseline_schedule("blockwise", 4, fast_cfg)] == [(0,), (1,), (2,), (3,)]
    assert [w.layers for w in bl.baseline_schedule("fixed", 4, fast_cfg)] == [(0, 1), (1, 2), (2, 3)]
    with pytest.raises(ConfigError):
        bl.baseline_schedule("gptq", 4, fast_cfg)


def test_16_bit_rtn_is_identity(tiny_checkpoint, calibset, fast_cfg, eval_tokens, rel_close):
    cfg = dc.replace(fast_cfg, wbits=16, abits=16)
    result = bl.run_baseline("rtn", tiny_checkpoint, calibset, cfg)
    tokens = eval_tokens[:16]
    rel_close(result.model.to_model().logits(tokens), forward(tiny_checkpoint, tokens)[0], 1e-4)


def test_rtn_learns_nothing(tiny_checkpoint, calibset, fast_cfg):
    result = bl.run_baseline("rtn", tiny_checkpoint, calibset, fast_cfg)
    assert result.loss_log == ()
    assert result.model.is_complete


def test_component_cells(fast_cfg):
    cells = bl.ablation_cells("components", fast_cfg, 4)
    assert [c.label for c in cells] == ["RTN", "baseline", "+PESW", "+PCSW", "+both", "+both+Intra"]
    assert cells[-1].gamma == fast_cfg.gamma
    assert cells[-2].gamma == 1.0
    assert len(cells[1].build_schedule(4)) == 3


def test_size_grids_skip_oversized_windows(fast_cfg):
    window = bl.ablation_cells("window", fast_cfg, 2)
    assert [c.label for c in window] == ["RTN", "fixed s=1", "sliderquant s=1", "fixed s=2", "sliderquant s=2"]
    repeats = bl.ablation_cells("repeats", fast_cfg, 3, max_repeats=2)
    assert [c.label for c in repeats] == ["RTN", "fixed s=2 x1", "fixed s=2 x2", "sliderquant"]
    assert repeats[2].cfg.repeats == 2
    with pytest.raises(ConfigError):
        bl.ablation_cells("depth", fast_cfg, 4)


def _table(flagged=False):
    cells = bl.ablation_cells("components", CalibConfig(), 4)
    values = [9.0, 6.0, 5.5, 5.25, 5.0, 4.5]
    rows = tuple(bl.AblationRow(cell=cell, windows=3, perplexity=v, loss_log=()) for cell, v in zip(cells, values))
    return bl.AblationTable(grid="components", rows=rows, flagged=flagged)


def test_markdown_marks_best_row():
    table = _table()
    assert table.best().cell.label == "+both+Intra"
    lines = bl.format_markdown(table).splitlines()
    assert lines[0] == "| configuration | windows | perplexity |"
    assert lines[-1] == "| +both+Intra | 3 | **4.5000** |"
    assert lines[2] == "| RTN | 3 | 9.0000 |"
    assert "flagged" in bl.format_markdown(_table(flagged=True)).splitlines()[-1]


def test_ablation_csv(tmp_path):
    csv_path = bl.write_ablation_csv(_table(), tmp_path / "ablation.csv")
    with csv_path.open(newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    assert tuple(reader.fieldnames) == bl.ABLATION_COLUMNS
    assert len(rows) == 6
    assert rows[0]["schedule"] == "rtn"


def test_components_ablation_runs(tiny_checkpoint, calibset, fast_cfg, eval_tokens):
    cfg = dc.replace(fast_cfg, epochs=1)
    table = bl.run_ablation("components", tiny_checkpoint, calibset, eval_tokens, cfg)
    assert len(table.rows) == 6
    assert table.rows[0].cell.label == "RTN"
    assert all(row.perplexity >= 1.0 for row in table.rows)
    assert isinstance(table.flagged, bool)
