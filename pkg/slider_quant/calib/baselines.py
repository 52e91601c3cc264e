"""
Baseline quantization strategies and the ablation grids comparing them with the full
sliding schedule.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
import csv
import dataclasses as dc
import typing as t

import numpy as np
from tqdm import tqdm

import slider_quant.core.logging as logging
from slider_quant.calib.config import BASELINE_KINDS, CalibConfig
from slider_quant.calib.engine import LossRecord, PipelineResult, run_pipeline
from slider_quant.core.errors import ConfigError
from slider_quant.evalprobe.metrics import perplexity
from slider_quant.model.corpus import CalibSet
from slider_quant.model.tinymodel import Checkpoint
from slider_quant.quant.schedule import (WindowSchedule, fixed_sliding_schedule, generate_schedule,
                                         single_layer_schedule)

logger = logging.get_logger(__name__)

REPEAT_GRID_SIZES = (2, 4)
WINDOW_GRID_SIZES = (1, 2, 3, 4)
ABLATION_COLUMNS = ("grid", "label", "schedule", "s", "repeats", "gamma", "windows", "perplexity")


def baseline_schedule(kind: str, num_layers: int, cfg: CalibConfig) -> WindowSchedule:
    if kind in ("rtn", "layerwise", "blockwise"):
        return single_layer_schedule(num_layers)
    if kind == "fixed":
        return fixed_sliding_schedule(num_layers, cfg.s, cfg.i)
    raise ConfigError(f"kind in {BASELINE_KINDS} violated: {kind}")


def run_baseline(kind: str, checkpoint: Checkpoint, calibset: CalibSet, cfg: CalibConfig,
                 progress: bool = False) -> PipelineResult:
    """
    :param kind: rtn (direct quantization, nothing learned), layerwise (per-linear objective,
        one block per window), blockwise (block output objective, one block per window) or
        fixed (fixed-size sliding over all layers, each window optimized ``cfg.repeats`` times)
    """
    schedule = baseline_schedule(kind, checkpoint.config.n_layers, cfg)
    logger.info(f"Baseline {kind}: {len(schedule)} windows")
    if kind == "rtn":
        return run_pipeline(checkpoint, schedule, calibset, cfg, optimize=False, progress=progress)
    if kind == "layerwise":
        cfg = dc.replace(cfg, objective="linear")
    elif kind == "blockwise":
        cfg = dc.replace(cfg, objective="block")
    return run_pipeline(checkpoint, schedule, calibset, cfg, progress=progress)


def sliderquant_schedule(num_layers: int, cfg: CalibConfig, pesw: bool = True, pcsw: bool = True,
                         gamma: t.Optional[float] = None) -> WindowSchedule:
    return generate_schedule(cfg.schedule_config(num_layers, pesw=pesw, pcsw=pcsw, gamma=gamma))


@dc.dataclass(frozen=True)
class AblationCell:
    """One configuration of an ablation grid. ``schedule`` is rtn, fixed or sliderquant."""
    grid: str
    label: str
    schedule: str
    cfg: CalibConfig
    pesw: bool = True
    pcsw: bool = True
    gamma: float = 1.0

    def build_schedule(self, num_layers: int) -> WindowSchedule:
        if self.schedule == "sliderquant":
            return sliderquant_schedule(num_layers, self.cfg, self.pesw, self.pcsw, self.gamma)
        return baseline_schedule("fixed" if self.schedule == "fixed" else "rtn", num_layers, self.cfg)


@dc.dataclass(frozen=True)
class AblationRow:
    cell: AblationCell
    windows: int
    perplexity: float
    loss_log: t.Tuple[LossRecord, ...]

    def to_record(self) -> t.Dict[str, t.Any]:
        return {"grid": self.cell.grid, "label": self.cell.label, "schedule": self.cell.schedule,
                "s": self.cell.cfg.s, "repeats": self.cell.cfg.repeats, "gamma": self.cell.gamma,
                "windows": self.windows, "perplexity": self.perplexity}


@dc.dataclass(frozen=True)
class AblationTable:
    grid: str
    rows: t.Tuple[AblationRow, ...]
    flagged: bool = False

    def best(self) -> AblationRow:
        return min(self.rows, key=lambda row: row.perplexity)


def ablation_cells(grid: str, cfg: CalibConfig, num_layers: int, max_repeats: int = 4) -> t.List[AblationCell]:
    """
    components: fixed sliding, +PESW, +PCSW, +both, +both+Intra.
    repeats: fixed sliding s in {2, 4} with 1..max_repeats optimizations per window, then the default schedule.
    window: fixed sliding against the sliding schedule for s in 1..4.
    Every grid starts with an RTN reference row. Sizes larger than the model are skipped.
    """
    cells = [AblationCell(grid, "RTN", "rtn", cfg)]
    if grid == "components":
        cells += [
            AblationCell(grid, "baseline", "sliderquant", cfg, pesw=False, pcsw=False),
            AblationCell(grid, "+PESW", "sliderquant", cfg, pesw=True, pcsw=False),
            AblationCell(grid, "+PCSW", "sliderquant", cfg, pesw=False, pcsw=True),
            AblationCell(grid, "+both", "sliderquant", cfg),
            AblationCell(grid, "+both+Intra", "sliderquant", cfg, gamma=cfg.gamma),
        ]
    elif grid == "repeats":
        for size in REPEAT_GRID_SIZES:
            if size > num_layers:
                continue
            for repeats in range(1, max_repeats + 1):
                cells.append(AblationCell(grid, f"fixed s={size} x{repeats}", "fixed",
                                          dc.replace(cfg, s=size, i=1, repeats=repeats)))
        cells.append(AblationCell(grid, "sliderquant", "sliderquant", cfg, gamma=cfg.gamma))
    elif grid == "window":
        for size in WINDOW_GRID_SIZES:
            if size > num_layers:
                continue
            sized = dc.replace(cfg, s=size, i=1)
            cells.append(AblationCell(grid, f"fixed s={size}", "fixed", sized))
            cells.append(AblationCell(grid, f"sliderquant s={size}", "sliderquant", sized, gamma=cfg.gamma))
    else:
        raise ConfigError(f"Unknown ablation grid: {grid}")
    return cells


def run_cell(cell: AblationCell, checkpoint: Checkpoint, calibset: CalibSet, eval_tokens: np.ndarray) -> AblationRow:
    """Calibrate and evaluate one cell; module-level so worker processes can run it."""
    schedule = cell.build_schedule(checkpoint.config.n_layers)
    result = run_pipeline(checkpoint, schedule, calibset, cell.cfg, optimize=cell.schedule != "rtn")
    value = perplexity(result.model, eval_tokens)
    logger.info(f"[{cell.grid}] {cell.label}: perplexity {value:.4f} over {len(schedule)} windows")
    return AblationRow(cell=cell, windows=len(schedule), perplexity=value, loss_log=result.loss_log)


def run_ablation(grid: str, checkpoint: Checkpoint, calibset: CalibSet, eval_tokens: np.ndarray,
                 cfg: CalibConfig, max_repeats: int = 4, jobs: int = 1) -> AblationTable:
    """
    Run every cell of ``grid``. Cells are independent; ``jobs`` > 1 runs them in worker processes.
    The components grid is flagged when +both+Intra is not its lowest perplexity.
    """
    cells = ablation_cells(grid, cfg, checkpoint.config.n_layers, max_repeats)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cell, checkpoint, calibset, eval_tokens) for cell in cells]
            rows = [future.result() for future in tqdm(futures, desc=f"Ablation {grid}")]
    else:
        rows = [run_cell(cell, checkpoint, calibset, eval_tokens) for cell in tqdm(cells, desc=f"Ablation {grid}")]

    flagged = False
    if grid == "components":
        calibrated = [row for row in rows if row.cell.schedule != "rtn"]
        best = min(calibrated, key=lambda row: row.perplexity)
        if best.cell.label != "+both+Intra":
            flagged = True
            logger.warning(f"Ablation flagged: lowest perplexity is {best.cell.label} ({best.perplexity:.4f}), "
                           f"not +both+Intra")
    return AblationTable(grid=grid, rows=tuple(rows), flagged=flagged)


def format_markdown(table: AblationTable) -> str:
    lines = ["| configuration | windows | perplexity |", "|---|---:|---:|"]
    best = min(row.perplexity for row in table.rows if row.cell.schedule != "rtn") if len(table.rows) > 1 else None
    for row in table.rows:
        value = f"{row.perplexity:.4f}"
        if best is not None and row.perplexity == best and row.cell.schedule != "rtn":
            value = f"**{value}**"
        lines.append(f"| {row.cell.label} | {row.windows} | {value} |")
    if table.flagged:
        lines.append("")
        lines.append("flagged: +both+Intra is not the lowest perplexity; see the loss logs")
    return "\n".join(lines)


def write_ablation_csv(table: AblationTable, csv_path: t.Union[str, Path]) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in table.rows:
            writer.writerow(row.to_record())
    logger.info(f"Wrote ablation table: {csv_path}")
    return csv_path
