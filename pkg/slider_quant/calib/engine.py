"""
Sequential window-by-window calibration.

Windows are processed in schedule order. Each window minimizes the mean squared error
between the FP output of its blocks and the output of the same blocks with transformed,
fake-quantized weights (and activations), both fed the window input from the
quantized-pipeline stream. A block's transforms persist across every window that
contains it; after its last window the block is committed: transforms are absorbed,
weight quantizer params frozen, and the quantized activation cache moves past it.
"""
from pathlib import Path
import csv
import dataclasses as dc
import math
import typing as t

import numpy as np
from tqdm import tqdm

import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
import slider_quant.quant.quantizer as qz
import slider_quant.quant.transforms as tf
from slider_quant.calib.config import CalibConfig
from slider_quant.core.errors import ContractError, DivergenceError
from slider_quant.core.optim import AdamW
from slider_quant.model.corpus import CalibSet
from slider_quant.model.quantized import QuantizedModel, quantized_linear
from slider_quant.model.tinymodel import Checkpoint, LinearFn, TinyLM, block_forward, block_key
from slider_quant.quant.schedule import StagePlan, Window, WindowSchedule, stage_plan

logger = logging.get_logger(__name__)

LOSS_LOG_COLUMNS = ("window_id", "region", "stage", "epoch", "loss")


@dc.dataclass(frozen=True)
class LossRecord:
    window_id: int
    region: str
    stage: int
    epoch: int
    loss: float


@dc.dataclass
class CommittedBlock:
    """Absorbed weights of a finished block and their frozen quantized form."""
    layer: int
    weights: t.Dict[str, np.ndarray]
    quantized: t.Dict[str, qz.QuantizedTensor]
    dequantized: t.Dict[str, np.ndarray]

    def linear(self, a_spec: t.Optional[qz.QuantSpec]) -> LinearFn:
        return quantized_linear({name: nk.Tensor(w) for name, w in self.dequantized.items()}, a_spec)

    def forward(self, x: nk.Tensor, model: TinyLM, a_spec: t.Optional[qz.QuantSpec]) -> nk.Tensor:
        norms = (nk.Tensor(self.weights["attn_norm"]), nk.Tensor(self.weights["mlp_norm"]))
        return block_forward(x, norms, self.linear(a_spec), model.config)


@dc.dataclass
class PipelineState:
    """
    Calibration state. ``quant_cache`` holds, per calibration sample, the input of block
    ``prefix`` computed through committed (quantized) blocks; ``fp_cache`` the same point
    in the FP model.
    """
    model: TinyLM
    checkpoint: Checkpoint
    schedule: WindowSchedule
    cfg: CalibConfig
    params: t.Dict[int, tf.BlockParams]
    committed: t.Dict[int, CommittedBlock]
    prefix: int
    quant_cache: np.ndarray
    fp_cache: np.ndarray
    last_window: t.Dict[int, int]
    targets: t.Dict[int, np.ndarray] = dc.field(default_factory=dict)
    loss_log: t.List[LossRecord] = dc.field(default_factory=list)

    @property
    def w_spec(self) -> qz.QuantSpec:
        return self.cfg.weight_spec()

    @property
    def a_spec(self) -> t.Optional[qz.QuantSpec]:
        return self.cfg.activation_spec()

    @property
    def num_samples(self) -> int:
        return int(self.quant_cache.shape[0])


@dc.dataclass(frozen=True)
class PipelineResult:
    model: QuantizedModel
    loss_log: t.Tuple[LossRecord, ...]


def init_state(checkpoint: Checkpoint, schedule: WindowSchedule, calibset: CalibSet,
               cfg: CalibConfig) -> PipelineState:
    """Identity transforms for every scheduled block; both caches start at the embedding output."""
    config = checkpoint.config
    if schedule.num_layers != config.n_layers:
        raise ContractError(f"Schedule covers {schedule.num_layers} layers, model has {config.n_layers}")
    cfg.check_model(config.d_model, config.d_ff)
    model = TinyLM.from_checkpoint(checkpoint)
    params = {
        layer: tf.init_block_params(config.linear_shapes(), cfg.rank, np.random.default_rng([cfg.seed, layer]))
        for layer in sorted(schedule.covered_layers())
    }
    with nk.no_grad():
        embedded = model.embed(calibset.tokens).data
    return PipelineState(model=model, checkpoint=checkpoint, schedule=schedule, cfg=cfg, params=params,
                         committed={}, prefix=0, quant_cache=embedded, fp_cache=embedded.copy(),
                         last_window=schedule.last_window_of())


def _advance(state: PipelineState, upto: int) -> None:
    """Push both caches forward through blocks below ``upto``; each must be committed or unscheduled."""
    while state.prefix < upto:
        layer = state.prefix
        with nk.no_grad():
            fp_out = state.model.block(layer, nk.Tensor(state.fp_cache)).data
            if layer in state.committed:
                quant_out = state.committed[layer].forward(nk.Tensor(state.quant_cache), state.model,
                                                           state.a_spec).data
            elif layer not in state.params:
                quant_out = state.model.block(layer, nk.Tensor(state.quant_cache)).data
            else:
                raise ContractError(f"Block {layer} is below window start {upto} but is not committed")
        state.fp_cache, state.quant_cache = fp_out, quant_out
        state.prefix += 1
        logger.debug(f"Caches advanced past block {layer}")


def _advance_committed(state: PipelineState) -> None:
    """Advance while the next block is committed or unscheduled."""
    upto = state.prefix
    while upto < state.model.config.n_layers and (upto in state.committed or upto not in state.params):
        upto += 1
    _advance(state, upto)


def _window_targets(state: PipelineState, window: Window) -> np.ndarray:
    """FP output of the window's blocks for every calibration sample, computed once per window."""
    if window.position not in state.targets:
        source = state.fp_cache if state.cfg.target_stream == "fp" else state.quant_cache
        with nk.no_grad():
            x = nk.Tensor(source)
            for layer in window.layers:
                x = state.model.block(layer, x)
        state.targets = {window.position: x.data}
    return state.targets[window.position]


def _calibration_linear(state: PipelineState, layer: int, tensors: t.Dict[str, nk.Tensor], fraction: float,
                        collector: t.Optional[t.List[nk.Tensor]]) -> LinearFn:
    params = state.params[layer]
    w_spec, a_spec = state.w_spec, state.a_spec

    def linear(name: str, x: nk.Tensor) -> nk.Tensor:
        w = tensors[name]
        if collector is None:
            return tf.quantized_layer_forward(w, x, params.scale_for(name), params.loras[name],
                                              w_spec, a_spec, fraction)
        # Per-linear objective: each linear reconstructs its own (detached) input.
        x = x.detach()
        out = tf.quantized_layer_forward(w, x, params.scale_for(name), params.loras[name], w_spec, a_spec, fraction)
        collector.append(nk.mse(out, x.data @ w.data))
        return out

    return linear


def window_loss(window: Window, stage_fraction: float, state: PipelineState, batch: np.ndarray) -> nk.Tensor:
    """
    Mean squared error between FP window outputs and transformed, fake-quantized window
    outputs for the calibration samples in ``batch``.

    :param stage_fraction: Share of each layer's output channels quantized (0 quantizes nothing)
    :raises ContractError: If any block below the window start is not committed
    """
    if state.prefix != window.start:
        raise ContractError(f"Window {window.position} starts at block {window.start} but the committed "
                            f"prefix ends at {state.prefix}")
    target = _window_targets(state, window)[batch]
    collector: t.Optional[t.List[nk.Tensor]] = [] if state.cfg.objective == "linear" else None

    x = nk.Tensor(state.quant_cache[batch])
    for layer in window.layers:
        state.params[layer].ensure_trainable()
        tensors = state.model.block_tensors(layer)
        linear = _calibration_linear(state, layer, tensors, stage_fraction, collector)
        x = block_forward(x, (tensors["attn_norm"], tensors["mlp_norm"]), linear, state.model.config)

    if collector is not None:
        loss = collector[0]
        for term in collector[1:]:
            loss = loss + term
        return nk.mul(loss, 1.0 / len(collector))
    return nk.mse(x, target)


def commit_block(state: PipelineState, layer: int) -> CommittedBlock:
    """Absorb a block's transforms and freeze its weight quantizer params from the absorbed weights."""
    params = state.params[layer]
    params.commit()
    absorbed = tf.absorb_block(state.checkpoint.block_weights(layer), params)
    w_spec = state.w_spec
    quantized = {name: qz.quantize(absorbed[name], qz.calc_params(absorbed[name], w_spec))
                 for name in tf.LINEAR_NAMES}
    block = CommittedBlock(layer=layer, weights=absorbed, quantized=quantized,
                           dequantized={name: qz.dequantize(q) for name, q in quantized.items()})
    state.committed[layer] = block
    logger.info(f"Committed block {layer}")
    return block


def _optimizer(state: PipelineState, window: Window, total_steps: int) -> AdamW:
    scales = [p for layer in window.layers for p in state.params[layer].scale_parameters()]
    loras = [p for layer in window.layers for p in state.params[layer].lora_parameters()]
    return AdamW({"scale": (scales, state.cfg.lr_scale), "lora": (loras, state.cfg.lr_lora)},
                 total_steps=total_steps, weight_decay=state.cfg.weight_decay)


def rising_stages(records: t.Sequence[LossRecord]) -> t.List[t.Tuple[int, float, float]]:
    """(stage, first-epoch loss, last-epoch loss) for every stage whose loss went up."""
    by_stage: t.Dict[int, t.List[LossRecord]] = {}
    for record in records:
        by_stage.setdefault(record.stage, []).append(record)
    rising = []
    for stage, stage_records in sorted(by_stage.items()):
        stage_records.sort(key=lambda r: r.epoch)
        first, last = stage_records[0].loss, stage_records[-1].loss
        if last > first:
            rising.append((stage, first, last))
    return rising


def quantize_window(window: Window, plan: StagePlan, state: PipelineState, cfg: CalibConfig,
                    optimize: bool = True, commit: bool = True) -> PipelineState:
    """
    Run every stage of ``plan`` over ``window`` and commit blocks whose last window this is.

    AdamW moments carry across stages within the window; the learning rate decays linearly
    to zero over all steps of the window.

    :param optimize: False commits without optimizing (round-to-nearest)
    :param commit: False leaves blocks open (repeated optimization of the same window)
    :raises DivergenceError: On a non-finite loss, naming window and stage
    """
    _advance(state, window.start)
    epochs = cfg.resolved_epochs
    samples = state.num_samples

    if optimize and cfg.needs_calibration:
        batches = math.ceil(samples / cfg.batch_size)
        optimizer = _optimizer(state, window, plan.stages * epochs * batches)
        rng = np.random.default_rng([cfg.seed, window.position])
        logger.info(f"Window {window.position} {window.region.value} layers {window.start}..{window.end}: "
                    f"{plan.stages} stage(s) x {epochs} epochs x {batches} batches")

        for stage, fraction in enumerate(plan.fractions, start=1):
            for epoch in range(1, epochs + 1):
                order = rng.permutation(samples)
                losses = []
                for start in range(0, samples, cfg.batch_size):
                    loss = window_loss(window, fraction, state, order[start:start + cfg.batch_size])
                    if not np.isfinite(loss.item()):
                        raise DivergenceError(f"Non-finite loss in window {window.position} stage {stage}")
                    optimizer.zero_grad()
                    nk.backward(loss, wrt=optimizer.parameters)
                    optimizer.step()
                    losses.append(loss.item())
                record = LossRecord(window.position, window.region.value, stage, epoch, float(np.mean(losses)))
                state.loss_log.append(record)
                logger.debug(f"window {record.window_id} stage {stage} epoch {epoch}: loss {record.loss:.6g}")

        window_records = [r for r in state.loss_log if r.window_id == window.position]
        logger.info(f"Window {window.position} loss {window_records[0].loss:.6g} -> {window_records[-1].loss:.6g}")
        for stage, first, last in rising_stages(window_records):
            logger.warning(f"Window {window.position} stage {stage}: final loss {last:.6g} "
                           f"exceeds first-epoch loss {first:.6g}")

    if commit:
        for layer in window.layers:
            if state.last_window.get(layer) == window.position:
                commit_block(state, layer)
        _advance_committed(state)
    return state


def build_artifact(state: PipelineState) -> QuantizedModel:
    """Quantized model from committed blocks; unscheduled blocks keep their FP weights."""
    checkpoint = state.checkpoint
    quantized = {}
    fp = {}
    for name, value in checkpoint.weights.items():
        fp[name] = value
    for layer, block in state.committed.items():
        for name in tf.LINEAR_NAMES:
            key = block_key(layer, name)
            quantized[key] = block.quantized[name]
            del fp[key]
        for name in ("attn_norm", "mlp_norm"):
            fp[block_key(layer, name)] = block.weights[name]
    return QuantizedModel(config=checkpoint.config, w_spec=state.w_spec, a_bits=state.cfg.abits,
                          quantized=quantized, fp=fp)


def run_pipeline(checkpoint: Checkpoint, schedule: WindowSchedule, calibset: CalibSet, cfg: CalibConfig,
                 optimize: bool = True, progress: bool = False) -> PipelineResult:
    """
    Calibrate every window of ``schedule`` in order and return the committed artifact.

    :param optimize: False gives round-to-nearest over the scheduled blocks
    :param progress: Show a progress bar over windows
    """
    state = init_state(checkpoint, schedule, calibset, cfg)
    if not cfg.needs_calibration:
        logger.info("16-bit weights and activations: committing without optimization")
    for window in tqdm(schedule.windows, desc="Calibrating windows", disable=not progress):
        plan = stage_plan(window, schedule.gamma)
        for repeat in range(cfg.repeats):
            quantize_window(window, plan, state, cfg, optimize=optimize, commit=repeat == cfg.repeats - 1)

    open_blocks = sorted(set(state.params) - set(state.committed))
    if open_blocks:
        raise ContractError(f"Blocks never committed: {open_blocks}")
    return PipelineResult(model=build_artifact(state), loss_log=tuple(state.loss_log))


def write_loss_log(records: t.Iterable[LossRecord], csv_path: t.Union[str, Path]) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_COLUMNS)
        for record in records:
            writer.writerow([record.window_id, record.region, record.stage, record.epoch, f"{record.loss:.9g}"])
    logger.info(f"Wrote loss log: {csv_path}")
    return csv_path
