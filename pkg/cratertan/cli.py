"""
Command-line interface for CraterTAN
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from cratertan import __version__
from cratertan.config import load_config
from cratertan.core.metrics import MetricsReport
from cratertan.cratertan import CraterTAN


console = Console()


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser for CLI"""
    parser = argparse.ArgumentParser(
        prog="tan",
        description="CraterTAN - two-stage crater detection across planetary domains by pcybox",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Render the synthetic source and target domains
  tan gen-data --config configs/toy.yaml

  # Train the stage-one detector, then pseudo-label and fine-tune
  tan train --config configs/toy.yaml --seed 0
  tan spf --config configs/toy.yaml

  # Evaluate the fine-tuned model on the target hold-out
  tan eval --config configs/toy.yaml --dataset target

  # Reproduce the component ablation
  tan ablation --config configs/toy.yaml --out runs/ablation

Environment variables:
  TAN_CONFIG      Default config file
  TAN_OUTPUT_DIR  Default output directory
  TAN_SEED        Default seed
  TAN_DEVICE      Default torch device (cpu, cuda, cuda:1, ...)
        """
    )

    # Options shared by every subcommand
    common = argparse.ArgumentParser(add_help=False)
    run_group = common.add_argument_group('Run Configuration')
    run_group.add_argument('--config', default=os.getenv('TAN_CONFIG'),
                           help='YAML experiment config (default: built-in defaults)')
    run_group.add_argument('--seed', type=int, default=os.getenv('TAN_SEED'),
                           help='Seed overriding the config')
    run_group.add_argument('--out', default=os.getenv('TAN_OUTPUT_DIR'),
                           help='Output directory overriding the config (default: runs/tan)')
    run_group.add_argument('--device', default=os.getenv('TAN_DEVICE'),
                           help='Torch device overriding the config')

    # Subcommands
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    subparsers.add_parser('gen-data', parents=[common], help='Write the synthetic domains to disk')
    subparsers.add_parser('train', parents=[common], help='Train the stage-one detector on the source domain')

    spf_parser = subparsers.add_parser('spf', parents=[common],
                                       help='Pseudo-label the target domain and fine-tune')
    spf_parser.add_argument('--checkpoint', help='Stage-one checkpoint (default: <out>/stage_one/best.ckpt)')

    eval_parser = subparsers.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    eval_parser.add_argument('--checkpoint', help='Checkpoint (default: <out>/spf/m2.ckpt, else stage one)')
    eval_parser.add_argument('--dataset', default='target',
                             help='source-val, target, or a labelled dataset directory (default: target)')

    subparsers.add_parser('ablation', parents=[common], help='Run the ASAF / SHEM / BOT ablation grid')

    info_parser = subparsers.add_parser('info', parents=[common], help='Show the resolved config and model size')
    info_parser.add_argument('--checkpoint', help='Also summarize this checkpoint')

    # General options
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='Verbose output')
    parser.add_argument('--version', action='version',
                        version=f'CraterTAN {__version__} by pcybox')

    return parser


def display_metrics(report: MetricsReport, title: str = "Metrics"):
    """Display a metrics report"""
    table = Table(show_header=True, header_style="bold magenta", title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_row("Precision", f"{report.precision:.4f}")
    table.add_row("Recall", f"{report.recall:.4f}")
    table.add_row("mAP@.5", f"{report.map50:.4f}")
    table.add_row("mAP@.5:.95", f"{report.map5095:.4f}")
    table.add_row("Confidence cutoff", f"{report.conf_cutoff:.3f} ({report.operating_point})")
    table.add_row("Images / GT / detections",
                  f"{report.num_images} / {report.num_gt} / {report.num_detections}")
    console.print(table)


def handle_gen_data_command(tan: CraterTAN, args) -> int:
    """Handle gen-data command"""
    try:
        console.print("\n[bold cyan]Generating synthetic domains...[/bold cyan]\n")
        written = tan.generate_data()
        if not written:
            console.print("[yellow]Both domains are directories; nothing generated[/yellow]")
        for name, path in written.items():
            console.print(f"[bold green]✓[/bold green] {name}: {path}")
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


def handle_train_command(tan: CraterTAN, args) -> int:
    """Handle train command"""
    try:
        console.print("\n[bold cyan]Training stage one...[/bold cyan]\n")
        result = tan.train_stage_one()

        console.print("[bold green]✓ Training finished[/bold green]")
        if result.best_checkpoint:
            console.print(f"Best epoch: {result.best_epoch + 1}")
            console.print(f"Val mAP@.5: {result.best_metrics['map50']:.4f}  "
                          f"mAP@.5:.95: {result.best_metrics['map5095']:.4f}")
            console.print(f"Best checkpoint: {result.best_checkpoint}")
        console.print(f"Last checkpoint: {result.last_checkpoint}")
        console.print(f"Training log: {result.log_csv}")
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


def handle_spf_command(tan: CraterTAN, args) -> int:
    """Handle spf command"""
    try:
        console.print("\n[bold cyan]Pseudo-labelling and fine-tuning...[/bold cyan]\n")
        result = tan.run_spf(args.checkpoint)

        console.print("[bold green]✓ SPF finished[/bold green]")
        console.print(f"Selected proportion h: {result['h']:.4f}")
        console.print(f"Selected images: {result['num_selected']} of {result['num_target']}")
        console.print(f"Pseudo-boxes: {result['num_pseudo_boxes']}")
        console.print(f"Manifest: {result['manifest']}")
        console.print(f"M2 checkpoint: {result['checkpoint']}")
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


def handle_eval_command(tan: CraterTAN, args) -> int:
    """Handle eval command"""
    try:
        console.print(f"\n[bold cyan]Evaluating on {args.dataset}...[/bold cyan]\n")
        report = tan.evaluate(args.checkpoint, dataset=args.dataset)
        display_metrics(report, title=f"Evaluation ({args.dataset})")
        console.print(f"\nArtifacts: {tan.output_dir / 'eval'}")
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


def handle_ablation_command(tan: CraterTAN, args) -> int:
    """Handle ablation command"""
    try:
        seeds = tan.config.ablation.seeds
        console.print(f"\n[bold cyan]Running the ablation grid over seeds {seeds}...[/bold cyan]\n")
        rows = tan.run_ablation()

        table = Table(show_header=True, header_style="bold magenta", title="Ablation (target domain)")
        for column in ("Row", "ASAF", "SHEM", "BOT", "Recall", "mAP@.5:.95"):
            table.add_column(column)
        for row in rows:
            table.add_row(
                str(row["row"]),
                *("✓" if row[key] else "✗" for key in ("asaf", "shem", "bot")),
                f"{row['recall_mean']:.4f} ± {row['recall_std']:.4f}",
                f"{row['map5095_mean']:.4f} ± {row['map5095_std']:.4f}",
            )
        console.print(table)
        console.print(f"\nTables: {tan.output_dir / 'ablation'}")
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


def handle_info_command(tan: CraterTAN, args) -> int:
    """Handle info command"""
    try:
        cfg = tan.config
        policy = cfg.aug_policy()
        console.print(Panel(
            f"Direction: {cfg.direction.value}\n"
            f"ASAF: {cfg.asaf_enabled}  SHEM: {cfg.shem_enabled}  BOT: {cfg.bot_enabled}\n"
            f"Objectness: {cfg.objectness_mode.value}\n"
            f"Augmentation: {policy.kind.value if policy else 'none'}\n"
            f"Seed: {cfg.seed}  Device: {cfg.train.device}  Output: {cfg.output_dir}",
            title="Experiment",
        ))

        summary = tan.model_summary(args.checkpoint)
        table = Table(show_header=True, header_style="bold magenta", title="Models")
        for column in ("Model", "Parameters", "Trainable", "NAM blocks", "Strides"):
            table.add_column(column)
        for name, info in summary.items():
            table.add_row(
                name,
                f"{info['parameters']:,}",
                f"{info['trainable_parameters']:,}",
                str(info['nam_modules']),
                ", ".join(str(s) for s in info['strides']),
            )
        console.print(table)
        return 0

    except Exception as e:
        console.print(f"[bold red]Error:[/bold red] {str(e)}")
        return 1


HANDLERS = {
    'gen-data': handle_gen_data_command,
    'train': handle_train_command,
    'spf': handle_spf_command,
    'eval': handle_eval_command,
    'ablation': handle_ablation_command,
    'info': handle_info_command,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    # Load environment variables from .env file
    load_dotenv()

    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    # Set log level
    log_level = logging.DEBUG if args.verbose else logging.INFO

    try:
        config = load_config(args.config).with_overrides(
            seed=args.seed, output_dir=args.out, device=args.device
        )
        tan = CraterTAN(config, log_level=log_level)

        # Route to command handler
        return HANDLERS[args.command](tan, args)

    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted by user[/yellow]")
        return 130
    except Exception as e:
        console.print(f"\n[bold red]Fatal error:[/bold red] {str(e)}")
        if args.verbose:
            import traceback
            console.print(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
