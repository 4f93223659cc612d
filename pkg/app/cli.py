"""
Command-line entry point.

    python -m app.cli run --config experiments/mnist_clean.json [--seed S] [--out DIR]
    python -m app.cli dlg --config experiments/dlg_images.json [--out DIR]
    python -m app.cli verify --ledger runs/mnist_clean/mnist_clean.beas
    python -m app.cli inspect --ledger runs/mnist_clean/mnist_clean.beas --block 3
    python -m app.cli serve [--ledger-dir DIR] [--port P]

Exit codes: 0 success, 1 invalid invocation or config, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.core.config import settings
from app.core.errors import BeasError, ConfigurationError, LedgerFormatError
from app.services.attack_service import run_leakage_comparison
from app.services.config_service import load_config
from app.services.ledger_service import block_summary
from app.services.ledger_store import load_channel
from app.services.protocol_service import run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; bad invocations here are exit 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="beas", description="Blockchain-backed federated learning simulator")
    parser.add_argument("--log-level", default=None, help="Overrides BEAS_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a federated-learning experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    run.add_argument("--out", type=Path, default=None, help="Output directory")
    run.add_argument("--workers", type=int, default=None, help="Client-training threads")

    dlg = commands.add_parser("dlg", help="Gradient-leakage reconstruction with and without countermeasures")
    dlg.add_argument("--config", required=True, type=Path)
    dlg.add_argument("--out", type=Path, default=None)

    verify = commands.add_parser("verify", help="Audit every hash link and signature of a ledger file")
    verify.add_argument("--ledger", required=True, type=Path)

    inspect = commands.add_parser("inspect", help="Print one block of a ledger file as JSON")
    inspect.add_argument("--ledger", required=True, type=Path)
    inspect.add_argument("--block", required=True, type=int)

    serve = commands.add_parser("serve", help="Serve ledger files over HTTP")
    serve.add_argument("--ledger-dir", default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _output_dir(requested: Optional[Path], configured: Optional[str], name: str) -> Path:
    if requested is not None:
        return requested
    if configured:
        return Path(configured)
    return Path(settings.output_dir) / name


def _run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    print(config.model_dump_json(indent=2))
    out = _output_dir(args.out, config.output_dir, config.name)
    result = run_experiment(config, out, max_workers=args.workers)
    summary = result.summary()
    print(
        f"{config.name}: {summary.global_blocks} global blocks in {summary.rounds} rounds, "
        f"final accuracy {summary.final_accuracy:.4f}, ledger {result.ledger_path}"
    )
    return EXIT_OK


def _dlg(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = _output_dir(args.out, config.output_dir, f"{config.name}-dlg")
    results = run_leakage_comparison(config, out)
    for label, result in results.items():
        status = " (diverged)" if result.diverged else ""
        print(f"{label}: match_loss={result.final_match_loss} mse={result.final_mse}{status}")
    return EXIT_OK


def _verify(args: argparse.Namespace) -> int:
    try:
        network, channel = load_channel(args.ledger)
    except LedgerFormatError as e:
        if e.block_index is not None:
            print(f"TAMPERED: first bad block {e.block_index}: {e}")
        else:
            print(f"UNREADABLE: {e}")
        return EXIT_FAILURE
    audit = network.verify_chain(channel)
    if audit.ok:
        print(f"OK: channel '{audit.channel_id}', {audit.length} blocks, head {channel.head_hash.hex()}")
        return EXIT_OK
    print(f"TAMPERED: first bad block {audit.first_bad_index}: {audit.reason}")
    return EXIT_FAILURE


def _inspect(args: argparse.Namespace) -> int:
    _, channel = load_channel(args.ledger)
    print(block_summary(channel, args.block).model_dump_json(indent=2))
    return EXIT_OK


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    if args.ledger_dir is not None:
        settings.ledger_dir = args.ledger_dir
    from app.main import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": _run,
    "dlg": _dlg,
    "verify": _verify,
    "inspect": _inspect,
    "serve": _serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, (args.log_level or settings.log_level).upper()),
        format=settings.log_format,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (BeasError, OSError) as e:
        logger.error(f"Error running '{args.command}': {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
