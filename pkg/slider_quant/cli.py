"""
Command-line workflow: pretrain, quantize, baseline, eval, probe, dump-schedule, ablate, storage.

JSON config files are the primary interface; flags override individual values. Every run
that writes files also writes run.json next to its primary output.
"""
from pathlib import Path
import argparse
import dataclasses as dc
import json
import sys
import typing as t

import slider_quant.core.datafiles.manifest as manifest
import slider_quant.core.datafiles.packio as packio
import slider_quant.core.datafiles.serialization as ser
import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
from slider_quant.calib import baselines
from slider_quant.calib.config import (ABLATION_GRIDS, ACTIVATION_BITS, BASELINE_KINDS, GROUP_CHOICES,
                                       PROBE_METHODS, PROBE_MODES, TARGET_STREAMS, WEIGHT_BITS,
                                       AblateConfig, CalibConfig, ProbeConfig, load_config)
from slider_quant.calib.engine import run_pipeline, write_loss_log
from slider_quant.core.errors import ConfigError, SliderQuantError
from slider_quant.evalprobe import probe as probes
from slider_quant.evalprobe.metrics import perplexity
from slider_quant.model.corpus import DEFAULT_CORPUS, build_stream, load_text, make_calibset
from slider_quant.model.quantized import QuantizedModel
from slider_quant.model.tinymodel import Checkpoint, PretrainConfig, pretrain
from slider_quant.quant.schedule import ScheduleConfig, format_schedule, generate_schedule, validate

logger = logging.get_logger(__name__)

TRAIN_TOKENS = "tokens_train.npy"
TEST_TOKENS = "tokens_test.npy"
STORAGE_REPORT = "storage.json"
TOKENIZER_FILE = "tokenizer.json"

USAGE_EXIT = 2
RUNTIME_EXIT = 1

# Flag name -> CalibConfig field.
CALIB_FLAGS = {
    "wbits": "wbits", "abits": "abits", "group": "group", "ls": "ls", "ld": "ld", "s": "s", "i": "i",
    "gamma": "gamma", "rank": "rank", "epochs": "epochs", "batch_size": "batch_size", "lr_scale": "lr_scale",
    "lr_lora": "lr_lora", "calib_samples": "calib_samples", "calib_tokens": "calib_tokens",
    "target_stream": "target_stream", "repeats": "repeats", "seed": "seed",
}


def _default(field: str) -> t.Any:
    return {f.name: f.default for f in dc.fields(CalibConfig)}[field]


def _add_calib_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("calibration")
    group.add_argument("--wbits", type=int, choices=WEIGHT_BITS, help=f"Weight bits (default: {_default('wbits')})")
    group.add_argument("--abits", type=int, choices=ACTIVATION_BITS,
                       help=f"Activation bits, 16 = weight-only (default: {_default('abits')})")
    group.add_argument("--group", choices=GROUP_CHOICES, help=f"Weight granularity (default: {_default('group')})")
    group.add_argument("--ls", type=int, help=f"Shallow (PESW) layers (default: {_default('ls')})")
    group.add_argument("--ld", type=int, help=f"Deep (PCSW) layers (default: {_default('ld')})")
    group.add_argument("--s", type=int, help=f"FSSW window size (default: {_default('s')})")
    group.add_argument("--i", type=int, help=f"FSSW stride (default: {_default('i')})")
    group.add_argument("--gamma", type=float, help=f"Intra-layer stage fraction (default: {_default('gamma')})")
    group.add_argument("--rank", type=int, help=f"LoRA rank (default: {_default('rank')})")
    group.add_argument("--epochs", type=int, help="Epochs per stage (default: 20, or 60 at 2 weight bits)")
    group.add_argument("--batch-size", type=int, help=f"Calibration batch size (default: {_default('batch_size')})")
    group.add_argument("--lr-scale", type=float, help=f"Channel scale learning rate (default: {_default('lr_scale')})")
    group.add_argument("--lr-lora", type=float, help=f"LoRA learning rate (default: {_default('lr_lora')})")
    group.add_argument("--calib-samples", type=int,
                       help=f"Calibration sequences (default: {_default('calib_samples')})")
    group.add_argument("--calib-tokens", type=int, help=f"Tokens per sequence (default: {_default('calib_tokens')})")
    group.add_argument("--target-stream", choices=TARGET_STREAMS,
                       help=f"Input stream of the FP target branch (default: {_default('target_stream')})")
    group.add_argument("--repeats", type=int,
                       help=f"Optimizations per window (default: {_default('repeats')})")
    group.add_argument("--seed", type=int, help=f"Calibration seed (default: {_default('seed')})")


def _apply_flags(config: CalibConfig, args: argparse.Namespace) -> CalibConfig:
    overrides = {field: getattr(args, flag) for flag, field in CALIB_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    return dc.replace(config, **overrides) if overrides else config


def _sibling(path: t.Union[str, Path], name: str) -> Path:
    return Path(path).parent / name


def _write_manifest(command: str, config: t.Any, seed: int, inputs: t.Sequence[Path],
                    outputs: t.Sequence[Path], primary: Path) -> Path:
    run = manifest.create_manifest(command, config, seed, inputs=inputs, outputs=outputs)
    return manifest.save_manifest(run, manifest.get_manifest_path(primary))


def _calibration_inputs(args: argparse.Namespace, cfg: CalibConfig) -> t.Tuple[Checkpoint, t.Any, Path]:
    checkpoint = packio.load_checkpoint(args.ckpt)
    tokens_path = Path(args.calib_from) if args.calib_from else _sibling(args.ckpt, TRAIN_TOKENS)
    train = packio.load_tokens(tokens_path)
    if cfg.calib_tokens > checkpoint.config.max_seq_len:
        raise ConfigError(f"calib_tokens <= max_seq_len violated: {cfg.calib_tokens} > "
                          f"{checkpoint.config.max_seq_len}")
    calibset = make_calibset(train, cfg.calib_samples, cfg.calib_tokens, cfg.seed)
    return checkpoint, calibset, tokens_path


def _eval_tokens_path(args: argparse.Namespace) -> Path:
    return Path(args.tokens) if args.tokens else _sibling(args.ckpt, TEST_TOKENS)


def _load_calib(args: argparse.Namespace) -> CalibConfig:
    base = load_config(CalibConfig, args.config) if args.config else CalibConfig()
    return _apply_flags(base, args)


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_config(PretrainConfig, args.config) if args.config else PretrainConfig()
    if args.steps is not None:
        config = dc.replace(config, steps=args.steps)
    if args.seed is not None:
        config = dc.replace(config, model=dc.replace(config.model, seed=args.seed))

    corpus_path = Path(args.corpus)
    text = load_text(corpus_path)
    stream, tokenizer = build_stream(text, train_fraction=config.train_fraction)
    model_config = dc.replace(config.model, vocab_size=tokenizer.vocab_size)
    config = dc.replace(config, model=model_config)
    logger.debug(f"Resolved pretrain config: {config}")

    result = pretrain(model_config, stream.split("train"), steps=config.steps, lr=config.lr,
                      batch_size=config.batch_size, seq_len=config.seq_len, weight_decay=config.weight_decay,
                      log_every=config.log_every)
    out = packio.save_checkpoint(result.checkpoint, args.out)
    train_path = packio.save_tokens(stream.split("train"), _sibling(out, TRAIN_TOKENS))
    test_path = packio.save_tokens(stream.split("test"), _sibling(out, TEST_TOKENS))
    tokenizer_path = _sibling(out, TOKENIZER_FILE)
    ser.save_json({"alphabet": tokenizer.alphabet}, tokenizer_path)

    reference = perplexity(result.checkpoint, stream.split("test"))
    logger.info(f"Final training loss {result.final_loss:.4f}, held-out perplexity {reference:.4f}")
    _write_manifest("pretrain", config, model_config.seed, [corpus_path],
                    [out, train_path, test_path, tokenizer_path], out)
    return 0


def _save_quantized(command: str, result: t.Any, cfg: CalibConfig, args: argparse.Namespace,
                    inputs: t.List[Path], extra: t.Optional[dict] = None) -> int:
    out = packio.save_artifact(result.model, args.out)
    outputs = [out]
    if args.loss_log:
        outputs.append(write_loss_log(result.loss_log, args.loss_log))
    config = {"calib": ser.serialize_dataclass(cfg), **(extra or {})}
    _write_manifest(command, config, cfg.seed, inputs, outputs, out)
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    cfg = _load_calib(args)
    logger.debug(f"Resolved calibration config: {cfg}")
    checkpoint, calibset, tokens_path = _calibration_inputs(args, cfg)
    schedule = baselines.sliderquant_schedule(checkpoint.config.n_layers, cfg, pesw=not args.no_pesw,
                                              pcsw=not args.no_pcsw)
    logger.info(f"Schedule of {len(schedule)} windows over {checkpoint.config.n_layers} blocks")
    result = run_pipeline(checkpoint, schedule, calibset, cfg, progress=True)
    return _save_quantized("quantize", result, cfg, args, [Path(args.ckpt), tokens_path],
                           {"pesw": not args.no_pesw, "pcsw": not args.no_pcsw})


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _load_calib(args)
    checkpoint, calibset, tokens_path = _calibration_inputs(args, cfg)
    result = baselines.run_baseline(args.kind, checkpoint, calibset, cfg, progress=True)
    return _save_quantized("baseline", result, cfg, args, [Path(args.ckpt), tokens_path], {"kind": args.kind})


def load_any_model(model_path: t.Union[str, Path]) -> t.Union[Checkpoint, QuantizedModel]:
    """SLQ1 artifact or SLQM checkpoint, told apart by magic."""
    model_path = Path(model_path)
    if not model_path.exists():
        raise FileNotFoundError(f"Model file not found: {model_path}")
    data = model_path.read_bytes()
    if data[:len(packio.CHECKPOINT_MAGIC)] == packio.CHECKPOINT_MAGIC:
        return packio.unpack_checkpoint(data)
    return packio.unpack(data)


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_any_model(args.artifact)
    tokens = packio.load_tokens(args.tokens)
    value = perplexity(model, tokens, args.context)
    print(f"{value:.6f}")

    out = Path(args.csv) if args.csv else _sibling(args.artifact, "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as f:
        f.write("artifact,tokens,perplexity\n")
        f.write(f"{Path(args.artifact).name},{Path(args.tokens).name},{value:.9g}\n")
    logger.info(f"Perplexity {value:.4f}; wrote {out}")
    _write_manifest("eval", {"context": args.context}, 0, [Path(args.artifact), Path(args.tokens)], [out], out)
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    config = load_config(ProbeConfig, args.config) if args.config else ProbeConfig()
    config = dc.replace(config, calib=_apply_flags(config.calib, args),
                        mode=args.mode or config.mode, method=args.method or config.method,
                        jobs=args.jobs or config.jobs)
    checkpoint, calibset, tokens_path = _calibration_inputs(args, config.calib)
    eval_path = _eval_tokens_path(args)
    inputs = probes.ProbeInputs(checkpoint, calibset, packio.load_tokens(eval_path), config.calib)
    report = probes.sensitivity_sweep(inputs, config.mode, config.method, config.layers, jobs=config.jobs)

    out_dir = Path(args.out_dir)
    csv_path = probes.write_sensitivity_csv(report, config.mode, out_dir)
    expected = len(config.layers) if config.layers else checkpoint.config.n_layers
    probes.validate_sensitivity_csv(csv_path, expected)
    outputs = [csv_path]
    if args.emit_gnuplot:
        outputs.append(probes.write_gnuplot(csv_path, config.mode, report))
    _write_manifest("probe", config, config.calib.seed, [Path(args.ckpt), tokens_path, eval_path], outputs, csv_path)
    return 0


def cmd_dump_schedule(args: argparse.Namespace) -> int:
    cfg = ScheduleConfig(L=args.L, L_s=args.ls, L_d=args.ld, s=args.s, i=args.i, gamma=args.gamma,
                         pesw=not args.no_pesw, pcsw=not args.no_pcsw)
    schedule = generate_schedule(cfg)
    report = validate(schedule, cfg)
    for check in report.checks:
        (logger.debug if check.passed else logger.warning)(f"{check.name}: {check.passed} {check.detail}")
    text = format_schedule(schedule, as_json=args.json)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        _write_manifest("dump-schedule", cfg, 0, [], [out], out)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(AblateConfig, args.config) if args.config else AblateConfig()
    config = dc.replace(config, calib=_apply_flags(config.calib, args), grid=args.grid or config.grid,
                        max_repeats=args.max_repeats or config.max_repeats, jobs=args.jobs or config.jobs)
    checkpoint, calibset, tokens_path = _calibration_inputs(args, config.calib)
    eval_path = _eval_tokens_path(args)
    table = baselines.run_ablation(config.grid, checkpoint, calibset, packio.load_tokens(eval_path),
                                   config.calib, max_repeats=config.max_repeats, jobs=config.jobs)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    markdown = baselines.format_markdown(table)
    print(markdown)
    md_path = out_dir / f"ablation_{config.grid}.md"
    md_path.write_text(markdown + "\n", encoding="utf-8")
    outputs = [md_path, baselines.write_ablation_csv(table, out_dir / f"ablation_{config.grid}.csv")]
    for index, row in enumerate(table.rows):
        if row.loss_log:
            outputs.append(write_loss_log(row.loss_log, out_dir / f"loss_{config.grid}_{index:02d}.csv"))
    _write_manifest("ablate", config, config.calib.seed, [Path(args.ckpt), tokens_path, eval_path], outputs, md_path)
    return 0


def cmd_storage(args: argparse.Namespace) -> int:
    report = packio.storage_report(packio.load_artifact(args.artifact))
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.format_table())
    out = _sibling(args.artifact, STORAGE_REPORT)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_manifest("storage", {"json": args.json}, 0, [Path(args.artifact)], [out], out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slider_quant", description="Sliding-window post-training quantization")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging and per-op finite checks")
    parser.add_argument("--log-file", type=str, default=None, help="Also write the log to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: t.Callable[[argparse.Namespace], int], help_text: str,
                config: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        if config:
            sub.add_argument("--config", type=str, default=None, help="JSON config file")
        sub.set_defaults(handler=handler)
        return sub

    sub = command("pretrain", cmd_pretrain, "Train the tiny language model from scratch")
    sub.add_argument("--corpus", type=str, default=str(DEFAULT_CORPUS), help="Training text (default: %(default)s)")
    sub.add_argument("--out", type=str, required=True, help="Checkpoint path (.slqm)")
    sub.add_argument("--steps", type=int, default=None, help="Training steps (config: steps)")
    sub.add_argument("--seed", type=int, default=None, help="Model seed (config: model.seed)")

    def calibration_command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = command(name, handler, help_text)
        sub.add_argument("--ckpt", type=str, required=True, help="FP checkpoint")
        sub.add_argument("--calib-from", type=str, default=None,
                         help=f"Token file calibration samples are drawn from (default: {TRAIN_TOKENS} next to --ckpt)")
        _add_calib_flags(sub)
        return sub

    for name, handler, help_text in (("quantize", cmd_quantize, "Sliding-window calibration"),
                                     ("baseline", cmd_baseline, "Baseline quantization")):
        sub = calibration_command(name, handler, help_text)
        sub.add_argument("--out", type=str, required=True, help="Quantized artifact path (.slq)")
        sub.add_argument("--loss-log", type=str, default=None, help="Per-window loss log CSV")
        if name == "quantize":
            sub.add_argument("--no-pesw", action="store_true", help="Cover shallow layers with fixed windows")
            sub.add_argument("--no-pcsw", action="store_true", help="Cover deep layers with fixed windows")
        else:
            sub.add_argument("--kind", choices=BASELINE_KINDS, required=True, help="Baseline strategy")

    sub = command("eval", cmd_eval, "Perplexity of an artifact or checkpoint", config=False)
    sub.add_argument("--artifact", type=str, required=True, help="SLQ1 artifact or SLQM checkpoint")
    sub.add_argument("--tokens", type=str, required=True, help="Evaluation token file (.npy)")
    sub.add_argument("--context", type=int, default=None, help="Context length (default: model max_seq_len)")
    sub.add_argument("--csv", type=str, default=None, help="Result CSV (default: eval.csv next to the artifact)")

    sub = calibration_command("probe", cmd_probe, "Layer sensitivity probe")
    sub.add_argument("--mode", choices=PROBE_MODES, default=None, help="single or prefix (default: single)")
    sub.add_argument("--method", choices=PROBE_METHODS, default=None, help="rtn or calibrated (default: rtn)")
    sub.add_argument("--tokens", type=str, default=None, help=f"Evaluation tokens (default: {TEST_TOKENS})")
    sub.add_argument("--jobs", type=int, default=None, help="Worker processes (default: 1)")
    sub.add_argument("--out-dir", type=str, default="probe",
                     help="Directory for the sensitivity CSVs (default: %(default)s)")
    sub.add_argument("--emit-gnuplot", action="store_true", help="Write a gnuplot script next to the CSV")

    sub = command("dump-schedule", cmd_dump_schedule, "Print the window schedule", config=False)
    sub.add_argument("--L", type=int, default=12, help="Number of layers (default: %(default)s)")
    sub.add_argument("--ls", type=int, default=4, help="Shallow (PESW) layers (default: %(default)s)")
    sub.add_argument("--ld", type=int, default=4, help="Deep (PCSW) layers (default: %(default)s)")
    sub.add_argument("--s", type=int, default=2, help="FSSW window size (default: %(default)s)")
    sub.add_argument("--i", type=int, default=1, help="FSSW stride (default: %(default)s)")
    sub.add_argument("--gamma", type=float, default=0.5, help="Intra-layer stage fraction (default: %(default)s)")
    sub.add_argument("--no-pesw", action="store_true", help="Disable the expanding shallow region")
    sub.add_argument("--no-pcsw", action="store_true", help="Disable the contracting deep region")
    sub.add_argument("--json", action="store_true", help="Print JSON instead of text")
    sub.add_argument("--out", type=str, default=None, help="Also write the schedule to this file")

    sub = calibration_command("ablate", cmd_ablate, "Run an ablation grid")
    sub.add_argument("--grid", choices=ABLATION_GRIDS, default=None, help="Grid (default: components)")
    sub.add_argument("--max-repeats", type=int, default=None, help="Largest repeat count of the repeats grid")
    sub.add_argument("--tokens", type=str, default=None, help=f"Evaluation tokens (default: {TEST_TOKENS})")
    sub.add_argument("--jobs", type=int, default=None, help="Worker processes (default: 1)")
    sub.add_argument("--out-dir", type=str, default="ablation",
                     help="Directory for tables and loss logs (default: %(default)s)")

    sub = command("storage", cmd_storage, "Packed storage report of an artifact, also written to storage.json beside it",
                  config=False)
    sub.add_argument("--artifact", type=str, required=True, help="SLQ1 artifact")
    sub.add_argument("--json", action="store_true", help="Print JSON instead of a table")
    return parser


def _report_error(category: str, code: int, message: str) -> None:
    print(json.dumps({"error": category, "code": code, "message": message}), file=sys.stderr)


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    log_level: logging.LogLevel = "DEBUG" if args.debug else "INFO"
    logging.setup_logging(level=log_level, log_file=args.log_file)
    nk.set_debug(args.debug)

    try:
        return args.handler(args)
    except SliderQuantError as e:
        logger.debug("Run failed", exc_info=True)
        print(json.dumps(e.to_record()), file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        _report_error("usage", USAGE_EXIT, str(e))
        return USAGE_EXIT
    except Exception as e:  # noqa: BLE001
        logger.debug("Unexpected failure", exc_info=True)
        _report_error("runtime", RUNTIME_EXIT, f"{type(e).__name__}: {e}")
        return RUNTIME_EXIT
