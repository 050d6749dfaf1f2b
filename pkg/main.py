#!/usr/bin/env python3
"""
Relational self-supervised pretraining - Main Entry Point

Commands:
  ingest             Download, verify and pack a dataset
  pretrain           Train a student/teacher pair with the relational objective
  linear-eval        Linear classifier on frozen backbone features
  knn                Weighted kNN top-1 of a checkpoint
  export-embeddings  Write embeddings of a split for external visualization
  sweep              One-axis grid sweep (tau_t, queue_capacity, teacher_augmentation)
  plot               Learning rate, loss, entropy and sweep plots
"""
import argparse
import json
import logging
import sys
from typing import NoReturn, Optional

from cli.commands import EXIT_USAGE, load_command_config, run_command
from cli.plots import PLOT_KINDS
from pipeline.error_handling import ConfigurationError
from shared.config import setup_logging
from shared.models import TEACHER_AUGMENTATIONS


class JsonErrorParser(argparse.ArgumentParser):
    """Usage errors as one JSON line on stderr, exit code 2"""

    def error(self, message: str) -> NoReturn:
        command = self.prog.split()[-1] if " " in self.prog else None
        print(json.dumps({"error": "UsageError", "message": message, "command": command}), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    """Parse command line arguments"""
    common = JsonErrorParser(add_help=False)
    common.add_argument('--config', '-c', default='config.toml', help='Path to the TOML configuration file')
    common.add_argument('--env-file', default=None, help='Optional .env file with machine-local overrides')
    common.add_argument('--seed', type=int, default=None, help='Run seed (pretraining and linear evaluation)')
    common.add_argument('--out', '-o', default=None, help='Output directory (or file for export-embeddings)')
    common.add_argument('--resume', action='store_true', help='Resume from the latest checkpoint in --out')
    common.add_argument('--dataset', choices=['cifar10', 'cifar100', 'stl10', 'tiny_imagenet'], default=None)

    experiment = JsonErrorParser(add_help=False)
    experiment.add_argument('--epochs', type=int, default=None)
    experiment.add_argument('--batch-size', type=int, default=None)
    experiment.add_argument('--tau-t', type=float, default=None, help='Teacher temperature (must be <= tau_s)')
    experiment.add_argument('--tau-s', type=float, default=None, help='Student temperature')
    experiment.add_argument('--queue-capacity', type=int, default=None)
    experiment.add_argument('--momentum', type=float, default=None, help='EMA momentum of the teacher')
    experiment.add_argument('--objective', choices=['ressl', 'info_nce', 'byol_style'], default=None)
    experiment.add_argument('--bn-groups', type=int, default=None)
    experiment.add_argument('--multicrop-sides', type=_int_list, default=None,
                            help='Comma-separated student crop sides, canonical side first (e.g. "32,24")')
    experiment.add_argument('--lr', type=float, default=None, help='Peak learning rate (default 0.06 * batch/256)')
    experiment.add_argument('--teacher-augmentation', choices=TEACHER_AUGMENTATIONS, default=None)

    checkpoint = JsonErrorParser(add_help=False)
    checkpoint.add_argument('--checkpoint', default=None, help='Checkpoint file or run directory')

    knn = JsonErrorParser(add_help=False)
    knn.add_argument('--k', type=int, default=None, help='Neighbours in the kNN vote')
    knn.add_argument('--temperature', type=float, default=None, help='kNN vote temperature')

    parser = JsonErrorParser(
        description='Relational self-supervised pretraining and evaluation',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py ingest --dataset cifar10
  python main.py pretrain --dataset cifar10 --epochs 200 --out runs/c10
  python main.py linear-eval --checkpoint runs/c10/checkpoints/final.pt
  python main.py sweep --axis tau_t --values 0.04,0.05,0.07,0.1 --budget-epochs 50
  python main.py plot --kind loss_curve --inputs runs/c10/metrics.jsonl
        """
    )
    commands = parser.add_subparsers(dest='command', required=True, parser_class=JsonErrorParser)

    ingest = commands.add_parser('ingest', parents=[common], help='Download, verify and pack a dataset')
    ingest.add_argument('--split', choices=['train', 'train_unlabeled_plus_labeled', 'test'], default=None,
                        help='Single split (default: every split of the dataset)')
    ingest.add_argument('--no-download', action='store_true', help='Use archives already on disk only')

    commands.add_parser('pretrain', parents=[common, experiment, knn], help='Pretrain a student/teacher pair')
    commands.add_parser('linear-eval', parents=[common, checkpoint], help='Linear evaluation of a checkpoint')

    knn_cmd = commands.add_parser('knn', parents=[common, checkpoint, knn], help='kNN evaluation of a checkpoint')
    knn_cmd.add_argument('--teacher', action='store_true', help='Use the teacher backbone instead of the student')

    export = commands.add_parser('export-embeddings', parents=[common, checkpoint], help='Export embeddings')
    export.add_argument('--split', choices=['train', 'train_unlabeled_plus_labeled', 'test'], default='test')
    export.add_argument('--features', choices=['embedding', 'backbone'], default='embedding')

    sweep = commands.add_parser('sweep', parents=[common, experiment, knn], help='One-axis grid sweep')
    sweep.add_argument('--axis', choices=['tau_t', 'queue_capacity', 'teacher_augmentation'], required=True)
    sweep.add_argument('--values', required=True, help='Comma-separated axis values')
    sweep.add_argument('--budget-epochs', type=int, default=None, help='Reduced epoch budget for every row')
    sweep.add_argument('--eval', choices=['linear', 'knn'], default=None)
    sweep.add_argument('--parallel', type=int, default=None, help='Rows run at once in separate processes')

    plot = commands.add_parser('plot', parents=[common, experiment], help='Emit a plot and its CSV')
    plot.add_argument('--kind', choices=PLOT_KINDS, required=True)
    plot.add_argument('--inputs', nargs='*', default=[], help='metrics.jsonl files or sweep.csv tables')

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)

    try:
        config = load_command_config(args)
    except ConfigurationError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return EXIT_USAGE

    setup_logging(config.app)
    logger = logging.getLogger(__name__)
    logger.info(f"Starting {args.command} (config {args.config})")

    return run_command(args, config)


if __name__ == "__main__":
    sys.exit(main())
