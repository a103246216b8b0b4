"""Device Tuning CLI - gradient checks, training, split simulation, message inspection

    python -m src.main gradcheck [--config run.yaml] [--seed N] [--out checks.csv]
    python -m src.main train     [--config run.yaml] [--set training.steps=50]
    python -m src.main simulate  [--config run.yaml] [--out simulate.csv]
    python -m src.main inspect   message.bin
    python -m src.main bench     [--config run.yaml] [--repeats 5]

Exit codes: 0 success, 1 check failure / divergence / malformed message,
2 configuration or usage error.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
from decouple import config as env

from .channel import device_attention_lengths, simulate_split_inference
from .checkpoint import save_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigurationError, TrainingDivergedError, WireFormatError
from .gradcheck import run_gradcheck
from .pooling import IDENTITY_POOLING, ffn_flops, total_attention_flops
from .split_model import SplitModel, cloud_decode, device_encode, parameter_count
from .tensor import no_grad
from .trainer import train
from .wire_protocol import decode_message, encode_message, message_size, parse_header, payload_checksum

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _configure_logging(level: Optional[str]) -> None:
    name = (level or env("DEVICE_TUNING_LOG_LEVEL", default="WARNING")).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigurationError(f"unknown log level '{name}'", "--log-level")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(numeric)


def _check_output(path: Optional[str], field: str) -> None:
    """Fail before any work when ``path`` cannot be created"""
    if path and not Path(path).parent.is_dir():
        raise ConfigurationError(f"output directory for {path} does not exist", field)


def _write_table(frame: pd.DataFrame, out: Optional[str]) -> None:
    print(frame.to_string(index=False))
    if out:
        frame.to_csv(out, index=False, float_format="%.9g", lineterminator="\n")
        logger.info(f"wrote {len(frame)} rows to {out}")


# === Commands ===


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    results = run_gradcheck(config)
    frame = pd.DataFrame([r.as_dict() for r in results])
    _write_table(frame, args.out)
    failed = [r.block for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAILURE
    print(f"all {len(results)} gradient checks passed at relative error {config.gradcheck.tolerance:g}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    report_path = args.out or config.training.report_path
    _check_output(report_path, "--out" if args.out else "training.report_path")
    _check_output(config.training.checkpoint_path, "training.checkpoint_path")
    model = config.build_model()
    device_params, cloud_params = parameter_count(model)
    logger.info(f"model parameters: device {device_params}, cloud {cloud_params}")
    tasks = config.task_specs()
    try:
        report = train(
            model,
            tasks,
            config.training.steps,
            config.build_optimizer(model),
            gradnorm=config.gradnorm_state(),
            batch_size=config.training.batch_size,
            seed=config.training_seed(),
            balance_at=config.gradnorm.balance_at,
            log_every=config.training.log_every,
        )
    except TrainingDivergedError as e:
        logger.error(str(e))
        print(f"training diverged: {e}")
        return EXIT_FAILURE

    if report_path:
        report.write_csv(report_path)
        logger.info(f"wrote training report to {report_path}")
    if config.training.checkpoint_path:
        save_checkpoint(model, config.training.checkpoint_path)

    initial, final = report.initial_losses, report.final_losses
    for task_id, weight in zip(report.task_ids, report.final_weights):
        print(f"{task_id}: loss {initial[task_id]:.4f} -> {final[task_id]:.4f}, weight {weight:.4f}")
    return EXIT_OK


def _simulate_rows(config: RunConfig) -> List[Dict[str, float]]:
    encoder, decoder, channel = config.encoder_config(), config.decoder_config(), config.channel_model()
    rows = []
    for k in range(encoder.pooling_stages + 1):
        report = simulate_split_inference(encoder, decoder, channel, config.simulate.seq_len, active_stages=k)
        rows.append(
            {
                "k": k,
                "compressed_length": report.compressed_length,
                "uplink_bytes": report.uplink_bytes,
                "uplink_latency_s": report.uplink_latency,
                "device_flops": report.device_flops,
                "cloud_flops": report.cloud_flops,
                "byte_ratio": report.byte_ratio,
            }
        )
    return rows


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    _write_table(pd.DataFrame(_simulate_rows(config)), args.out)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, config: RunConfig) -> int:
    path = Path(args.message)
    if not path.is_file():
        raise ConfigurationError(f"message file not found: {path}", "message")
    message = path.read_bytes()
    try:
        header = parse_header(message)
        tensor = decode_message(message)
    except WireFormatError as e:
        print(f"malformed message {path}: {e}")
        return EXIT_FAILURE
    print(f"magic: {header.magic.decode('ascii')}")
    print(f"version: {header.version}")
    print(f"dtype: {header.dtype_code} (float32 little-endian)")
    print(f"T': {header.rows}")
    print(f"D: {header.cols}")
    print(f"payload_len: {header.payload_len}")
    print(f"sha256: {payload_checksum(message)}")
    if encode_message(tensor) != message:
        logger.warning("re-encoding the decoded tensor does not reproduce the file")
    return EXIT_OK


def _timed(fn: Callable[[], object], repeats: int) -> float:
    """Best wall-clock seconds over ``repeats`` calls"""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _set_active_stages(model: SplitModel, active: int) -> None:
    """Blocks past ``active`` keep their layers but stop pooling"""
    pooling = model.encoder_config.pooling
    for i, block in enumerate(model.encoder.pooled_blocks):
        block.pooling = pooling if i < active else IDENTITY_POOLING


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    if args.repeats < 1:
        raise ConfigurationError(f"--repeats must be >= 1, got {args.repeats}", "--repeats")
    model = config.build_model()
    encoder, decoder = model.encoder_config, model.decoder_config
    length = config.simulate.seq_len
    tokens = [t % encoder.vocab_size for t in range(length)]
    task_id = decoder.task_ids[0]

    rows = []
    with no_grad():
        for k in range(encoder.pooling_stages + 1):
            _set_active_stages(model, k)
            lengths, compressed = device_attention_lengths(encoder, length, k)
            cloud_lengths = [compressed] * decoder.num_layers
            h = device_encode(tokens, model)
            rows.append(
                {
                    "k": k,
                    "compressed_length": compressed,
                    "attention_flops": total_attention_flops(lengths + cloud_lengths, encoder.width),
                    "ffn_flops": sum(ffn_flops(t, encoder.width, encoder.ffn_ratio) for t in lengths + cloud_lengths),
                    "uplink_bytes": message_size(compressed, encoder.width),
                    "device_ms": 1e3 * _timed(lambda: device_encode(tokens, model), args.repeats),
                    "cloud_ms": 1e3 * _timed(lambda: cloud_decode(h, task_id, model), args.repeats),
                }
            )
        _set_active_stages(model, encoder.pooling_stages)
    _write_table(pd.DataFrame(rows), args.out)
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "inspect": cmd_inspect,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults built in)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config's seed")
    common.add_argument("--out", help="write the command's table or training report here")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted config path, e.g. training.steps=50 (repeatable)",
    )
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (env DEVICE_TUNING_LOG_LEVEL)")

    parser = argparse.ArgumentParser(prog="device-tuning", description="Split transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("train", parents=[common], help="multi-task training run")
    sub.add_parser("simulate", parents=[common], help="uplink and FLOP cost for k = 0..k_max")
    inspect = sub.add_parser("inspect", parents=[common], help="print a wire message header")
    inspect.add_argument("message", help="path to a serialised message")
    bench = sub.add_parser("bench", parents=[common], help="analytic cost plus measured forward time")
    bench.add_argument("--repeats", type=int, default=5)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK

    try:
        _configure_logging(args.log_level)
        config = load_config(args.config, args.set, args.seed)
        logger.info(f"running {args.command} with seed {config.seed}")
        _check_output(args.out, "--out")
        status = COMMANDS[args.command](args, config)
    except ConfigurationError as e:
        where = f" [{e.field}]" if e.field and e.field not in str(e) else ""
        print(f"configuration error: {e}{where}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        target = e.filename or args.out
        print(f"cannot access {target}: {e.strerror or e}", file=sys.stderr)
        return EXIT_CONFIG
    logger.info(f"{args.command} finished with exit status {status}")
    return status


if __name__ == "__main__":
    sys.exit(main())
