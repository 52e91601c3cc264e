"""
Layer-sensitivity probe: perplexity when quantizing a single block, or the first l blocks,
with everything else left in full precision.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
import csv
import dataclasses as dc
import typing as t

import numpy as np
from tqdm import tqdm

import slider_quant.core.logging as logging
from slider_quant.calib.baselines import sliderquant_schedule
from slider_quant.calib.config import PROBE_METHODS, PROBE_MODES, CalibConfig
from slider_quant.calib.engine import run_pipeline
from slider_quant.core.errors import ConfigError, ContractError
from slider_quant.evalprobe.metrics import perplexity
from slider_quant.model.corpus import CalibSet
from slider_quant.model.quantized import QuantizedModel
from slider_quant.model.tinymodel import Checkpoint
from slider_quant.quant.schedule import single_layer_schedule

logger = logging.get_logger(__name__)

CSV_COLUMNS = ("mode", "layer", "method", "wbits", "abits", "seed", "perplexity", "fp_reference")
CSV_NAMES = {"single": "sensitivity_single.csv", "prefix": "sensitivity_prefix.csv"}


@dc.dataclass(frozen=True)
class ProbeInputs:
    checkpoint: Checkpoint
    calibset: CalibSet
    eval_tokens: np.ndarray
    cfg: CalibConfig


def _check_method(method: str) -> None:
    if method not in PROBE_METHODS:
        raise ConfigError(f"method in {PROBE_METHODS} violated: {method}")


def _quantize_layers(inputs: ProbeInputs, layers: t.Iterable[int], optimize: bool) -> QuantizedModel:
    schedule = single_layer_schedule(inputs.checkpoint.config.n_layers, layers)
    return run_pipeline(inputs.checkpoint, schedule, inputs.calibset, inputs.cfg, optimize=optimize).model


def full_pipeline_model(inputs: ProbeInputs) -> QuantizedModel:
    schedule = sliderquant_schedule(inputs.checkpoint.config.n_layers, inputs.cfg)
    return run_pipeline(inputs.checkpoint, schedule, inputs.calibset, inputs.cfg).model


def probe_single_layer(inputs: ProbeInputs, layer: int, method: str) -> float:
    """
    Perplexity with only block ``layer`` quantized.

    :raises ContractError: Unless 0 <= layer < L
    """
    _check_method(method)
    num_layers = inputs.checkpoint.config.n_layers
    if not 0 <= layer < num_layers:
        raise ContractError(f"probe_single_layer needs 0 <= l < {num_layers}, got {layer}")
    model = _quantize_layers(inputs, [layer], optimize=method == "calibrated")
    return perplexity(model, inputs.eval_tokens)


def probe_prefix(inputs: ProbeInputs, depth: int, method: str,
                 full_model: t.Optional[QuantizedModel] = None) -> float:
    """
    Perplexity with blocks 0..depth−1 quantized. The calibrated variant keeps the first
    ``depth`` blocks of the full sliding-window pipeline artifact, so ``depth`` = L is that
    pipeline's perplexity.

    :param full_model: Reused full pipeline artifact (calibrated only)
    :raises ContractError: Unless 1 <= depth <= L
    """
    _check_method(method)
    num_layers = inputs.checkpoint.config.n_layers
    if not 1 <= depth <= num_layers:
        raise ContractError(f"probe_prefix needs 1 <= l <= {num_layers}, got {depth}")
    if method == "rtn":
        model = _quantize_layers(inputs, range(depth), optimize=False)
    else:
        full_model = full_model or full_pipeline_model(inputs)
        model = full_model if depth == num_layers else full_model.with_fp_blocks(inputs.checkpoint, range(depth))
    return perplexity(model, inputs.eval_tokens)


@dc.dataclass(frozen=True)
class SensitivityReport:
    method: str
    wbits: int
    abits: int
    seed: int
    fp_reference: float
    single: t.Dict[int, float] = dc.field(default_factory=dict)
    prefix: t.Dict[int, float] = dc.field(default_factory=dict)

    def __post_init__(self):
        values = [self.fp_reference, *self.single.values(), *self.prefix.values()]
        if any(not np.isfinite(v) or v < 1.0 for v in values):
            raise ContractError(f"Perplexities must be finite and >= 1: {values}")

    def rows(self, mode: str) -> t.List[t.Dict[str, t.Any]]:
        curve = self.single if mode == "single" else self.prefix
        return [{"mode": mode, "layer": layer, "method": self.method, "wbits": self.wbits, "abits": self.abits,
                 "seed": self.seed, "perplexity": value, "fp_reference": self.fp_reference}
                for layer, value in sorted(curve.items())]


def _probe_task(inputs: ProbeInputs, mode: str, method: str, layer: int,
                full_model: t.Optional[QuantizedModel]) -> t.Tuple[int, float]:
    if mode == "single":
        return layer, probe_single_layer(inputs, layer, method)
    return layer, probe_prefix(inputs, layer, method, full_model)


def sensitivity_sweep(inputs: ProbeInputs, mode: str, method: str, layers: t.Optional[t.Iterable[int]] = None,
                      jobs: int = 1, fp_reference: t.Optional[float] = None) -> SensitivityReport:
    """
    Probe every layer (single: 0..L−1, prefix: 1..L) and collect the curve.

    :param jobs: Worker processes; each probe is independent
    """
    if mode not in PROBE_MODES:
        raise ConfigError(f"mode in {PROBE_MODES} violated: {mode}")
    _check_method(method)
    num_layers = inputs.checkpoint.config.n_layers
    if layers is None:
        layers = range(num_layers) if mode == "single" else range(1, num_layers + 1)
    layers = list(layers)
    if fp_reference is None:
        fp_reference = perplexity(inputs.checkpoint, inputs.eval_tokens)
    logger.info(f"FP reference perplexity: {fp_reference:.4f}")

    full_model = full_pipeline_model(inputs) if mode == "prefix" and method == "calibrated" else None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_probe_task, inputs, mode, method, layer, full_model) for layer in layers]
            results = [future.result() for future in tqdm(futures, desc=f"Probe {mode}")]
    else:
        results = [_probe_task(inputs, mode, method, layer, full_model)
                   for layer in tqdm(layers, desc=f"Probe {mode}")]
    for layer, value in results:
        logger.info(f"{mode} {method} layer {layer}: perplexity {value:.4f}")

    cfg = inputs.cfg
    curve = dict(results)
    return SensitivityReport(method=method, wbits=cfg.wbits, abits=cfg.abits, seed=cfg.seed,
                             fp_reference=fp_reference,
                             single=curve if mode == "single" else {},
                             prefix=curve if mode == "prefix" else {})


def write_sensitivity_csv(report: SensitivityReport, mode: str, out_dir: t.Union[str, Path]) -> Path:
    csv_path = Path(out_dir) / CSV_NAMES[mode]
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.rows(mode):
            writer.writerow({**row, "perplexity": f"{row['perplexity']:.9g}",
                             "fp_reference": f"{row['fp_reference']:.9g}"})
    logger.info(f"Wrote sensitivity curve: {csv_path}")
    return csv_path


def validate_sensitivity_csv(csv_path: t.Union[str, Path], num_layers: t.Optional[int] = None) -> int:
    """
    Check header, field types and provenance columns of a sensitivity CSV.

    :returns: Number of data rows
    :raises ContractError: On any schema violation
    """
    csv_path = Path(csv_path)
    with csv_path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractError(f"{csv_path.name}: header {reader.fieldnames} != {list(CSV_COLUMNS)}")
        rows = list(reader)
    for number, row in enumerate(rows, start=2):
        try:
            layer = int(row["layer"])
            int(row["wbits"]), int(row["abits"]), int(row["seed"])
            values = float(row["perplexity"]), float(row["fp_reference"])
        except ValueError as e:
            raise ContractError(f"{csv_path.name}:{number}: {e}") from e
        if row["mode"] not in PROBE_MODES or row["method"] not in PROBE_METHODS:
            raise ContractError(f"{csv_path.name}:{number}: bad mode/method {row['mode']}/{row['method']}")
        if any(not np.isfinite(v) or v < 1.0 for v in values):
            raise ContractError(f"{csv_path.name}:{number}: perplexity must be finite and >= 1")
        if layer < 0:
            raise ContractError(f"{csv_path.name}:{number}: negative layer {layer}")
    if num_layers is not None and len(rows) != num_layers:
        raise ContractError(f"{csv_path.name}: {len(rows)} rows, expected {num_layers}")
    return len(rows)


GNUPLOT_TEMPLATE = """set datafile separator ","
set key autotitle columnhead
set xlabel "{xlabel}"
set ylabel "perplexity"
set title "{title}"
set terminal pngcairo size 900,500
set output "{output}"
plot "{csv}" using 2:7 with linespoints title "quantized", \\
     "{csv}" using 2:8 with lines dashtype 2 title "FP reference"
"""


def write_gnuplot(csv_path: t.Union[str, Path], mode: str, report: SensitivityReport) -> Path:
    csv_path = Path(csv_path)
    script_path = csv_path.with_suffix(".gp")
    xlabel = "quantized layer" if mode == "single" else "number of quantized leading layers"
    script_path.write_text(GNUPLOT_TEMPLATE.format(
        xlabel=xlabel, csv=csv_path.name, output=csv_path.with_suffix(".png").name,
        title=f"{mode} {report.method} W{report.wbits}A{report.abits} seed {report.seed}"), encoding="utf-8")
    logger.info(f"Wrote plot script: {script_path}")
    return script_path
