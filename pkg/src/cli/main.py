#!/usr/bin/env python3
"""Command-line interface for PET joint diffusion experiments.

Usage:
    # Generate a phantom dataset
    pjd phantom --config experiment.json --out data/phantoms --n-cases 6

    # Train the joint model
    pjd train --config experiment.json --data data/phantoms --out runs/full

    # Denoise / segment the held-out cases with a checkpoint
    pjd denoise --checkpoint runs/full/checkpoint_final.pckpt --data data/phantoms --out runs/full/denoised
    pjd segment --checkpoint runs/full/checkpoint_final.pckpt --data data/phantoms --out runs/full/pred

    # Quantify, evaluate, compare
    pjd quantify --input runs/full/pred/case_005/p_hc.pvol --labels runs/full/pred/case_005/seg.pvol --out q
    pjd evaluate --pred runs/full/pred --data data/phantoms --compare runs/baseline/pred --out runs/full/eval

    # Ablation study (full, w/o regularizer, w/o revision)
    pjd ablate --config experiment.json --data data/phantoms --out runs/ablation

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import torch
from pydantic import ValidationError
from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from ..config import ExperimentConfig, get_settings, load_experiment_config
from ..services.diffusion import cosine_schedule
from ..services.errors import EXIT_CONFIG, EXIT_OK, ConfigError, PetJointError
from ..services.evaluation import evaluate_dirs, render_ablation, run_ablation, write_evaluation
from ..services.models import ClassRoster, EvaluationReport
from ..services.patching import plan_grid
from ..services.phantom import build_dataset, load_manifest
from ..services.pipeline import (
    PRED_P_HC,
    PRED_REPORT,
    denoise_volume,
    generic_roster,
    load_model,
    predict_dataset,
    quantify,
    segment_volume,
    write_prediction,
)
from ..services.rng import derive_seed
from ..services.training import load_training_cases, train
from ..services.volume import read_labels, read_suv, write_json, write_volume

console = Console()
logger = logging.getLogger(__name__)

DEFAULT_N_CASES = 6


def setup_logging(verbose: bool = False, log_file: Optional[Path] = None):
    """Configure logging for the CLI."""
    level = logging.DEBUG if verbose else getattr(logging, get_settings().log_level.upper(), logging.INFO)

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]

    log_file = log_file or get_settings().log_file
    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


# =============================================================================
# CONFIG
# =============================================================================


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Fold --seed, --count-fraction and --fast-seg into the config and revalidate."""
    data: dict[str, Any] = config.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "count_fraction", None) is not None:
        data["inference"]["count_fraction"] = args.count_fraction
    if getattr(args, "fast_seg", False):
        data["inference"]["fast_seg"] = True
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}", field="args") from e


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return _apply_overrides(load_experiment_config(args.config), args)


def _model_and_config(args: argparse.Namespace):
    """Checkpoint model with either the given config (checked) or the one it was trained with."""
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required", field="checkpoint")
    config = load_experiment_config(args.config) if args.config else None
    model, config = load_model(args.checkpoint, config)
    return model, _apply_overrides(config, args)


def _set_threads(args: argparse.Namespace) -> None:
    threads = args.threads if getattr(args, "threads", None) is not None else get_settings().threads
    if threads > 0:
        torch.set_num_threads(threads)


def _dataset_inputs(data_dir: Path, config: ExperimentConfig, split: str):
    """(case_id, seed, low-count volume) for every case of a split."""
    manifest = load_manifest(data_dir)
    for record in manifest.cases:
        if record.split != split:
            continue
        level = config.inference.count_fraction or min(record.fractions)
        seed = derive_seed(config.seed, "case", record.case_id)
        yield record.case_id, seed, read_suv(data_dir / manifest.lc_file(record, level))


def _require_input(args: argparse.Namespace) -> None:
    if (args.input is None) == (args.data is None):
        raise ConfigError("give exactly one of --input FILE or --data DIR", field="input")


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_phantom(args: argparse.Namespace) -> int:
    config = _config(args)
    out_dir = args.out or get_settings().data_dir
    manifest = build_dataset(config.phantom, config.seed, args.n_cases, out_dir)
    n_test = sum(1 for c in manifest.cases if c.split == "test")
    console.print(
        f"[green]Generated {len(manifest.cases)} phantoms ({n_test} test) in {out_dir}[/green]"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    data_dir = args.data or get_settings().data_dir
    out_dir = args.out or get_settings().runs_dir / "train"
    cases = load_training_cases(data_dir, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json(), encoding="utf-8")

    total = config.training.e_max * config.training.steps_per_epoch
    with Progress(console=console) as progress:
        task = progress.add_task("[cyan]Training...", total=total)

        def on_step(state, report) -> None:
            progress.update(
                task,
                completed=state.step,
                description=f"[cyan]Epoch {state.epoch + 1}: total {report.total:.4f}",
            )

        result = train(cases, config, out_dir, resume_from=args.resume, on_step=on_step)

    console.print(f"[green]Checkpoint {result.checkpoint}[/green]")
    console.print(f"[green]Loss log {result.loss_log} ({len(result.history)} steps)[/green]")
    return EXIT_OK


def cmd_denoise(args: argparse.Namespace) -> int:
    _require_input(args)
    model, config = _model_and_config(args)
    sched = cosine_schedule(config.diffusion.T, config.diffusion.s_offset)
    patch, stride = config.patching.patch_size, config.patching.stride
    one_step = config.inference.fast_seg

    if args.input is not None:
        i_lc = read_suv(args.input)
        grid = plan_grid(i_lc.dims, patch, stride)
        p_hc = denoise_volume(i_lc, model, sched, grid, config.seed, config, one_step=one_step)
        write_volume(p_hc, args.out / PRED_P_HC)
        console.print(f"[green]Denoised {args.input} -> {args.out / PRED_P_HC}[/green]")
        return EXIT_OK

    for case_id, seed, i_lc in _dataset_inputs(args.data, config, args.split):
        grid = plan_grid(i_lc.dims, patch, stride)
        p_hc = denoise_volume(i_lc, model, sched, grid, seed, config, one_step=one_step)
        write_volume(p_hc, args.out / case_id / PRED_P_HC)
        console.print(f"[green]✓ {case_id}[/green]")
    return EXIT_OK


def cmd_segment(args: argparse.Namespace) -> int:
    _require_input(args)
    model, config = _model_and_config(args)

    if args.input is not None:
        i_lc = read_suv(args.input)
        sched = cosine_schedule(config.diffusion.T, config.diffusion.s_offset)
        grid = plan_grid(i_lc.dims, config.patching.patch_size, config.patching.stride)
        seg = segment_volume(i_lc, model, sched, grid, config.seed, config)
        report = write_prediction(seg, args.out, config.roster)
        console.print(f"[green]Segmented {args.input}: MTV {report.mtv_ml:.2f} mL, TLG {report.tlg:.2f}[/green]")
        return EXIT_OK

    done = predict_dataset(model, config, args.data, args.out, seed=config.seed, split=args.split)
    console.print(f"[green]Segmented {len(done)} cases into {args.out}[/green]")
    return EXIT_OK


def cmd_quantify(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.ground_truth:
        if args.data is None:
            raise ConfigError("--ground-truth needs --data DIR", field="data")
        manifest = load_manifest(args.data)
        roster = ClassRoster(names=tuple(manifest.roster))
        for record in manifest.cases:
            hc = read_suv(args.data / record.files["hc"])
            labels = read_labels(args.data / record.files["labels"])
            report = quantify(hc, labels, roster)
            write_json(report.model_dump(mode="json"), args.out / record.case_id / PRED_REPORT)
        console.print(f"[green]Quantified {len(manifest.cases)} reference cases into {args.out}[/green]")
        return EXIT_OK

    if args.input is None or args.labels is None:
        raise ConfigError("quantify needs --input P_HC and --labels SEG (or --ground-truth)", field="input")
    p_hc = read_suv(args.input)
    labels = read_labels(args.labels)
    roster = config.roster if config.roster.num_classes == labels.num_classes else generic_roster(labels.num_classes)
    report = quantify(p_hc, labels, roster)
    write_json(report.model_dump(mode="json"), args.out / PRED_REPORT)
    console.print(f"MTV {report.mtv_ml:.3f} mL, TLG {report.tlg:.3f}")
    return EXIT_OK


def print_evaluation(report: EvaluationReport) -> None:
    """Mean per-class NRMSE/Dice and bias summaries."""
    table = Table(title="Per-class mean")
    table.add_column("class")
    table.add_column("NRMSE", justify="right")
    table.add_column("Dice", justify="right")
    for name, value in report.mean_nrmse.items():
        dice = report.mean_dice.get(name)
        table.add_row(
            name,
            "-" if value is None else f"{value:.4f}",
            "-" if dice is None else f"{dice:.4f}",
        )
    console.print(table)

    table = Table(title="Quantification")
    table.add_column("metric")
    table.add_column("bias", justify="right")
    table.add_column("R²", justify="right")
    for name, bias in report.bias.items():
        fit = report.regression.get(name)
        table.add_row(name, "-" if bias is None else bias.text, "-" if fit is None else f"{fit.r_squared:.4f}")
    console.print(table)
    if report.unpaired:
        console.print(f"[yellow]Excluded unpaired cases: {', '.join(report.unpaired)}[/yellow]")


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.pred is None:
        raise ConfigError("--pred is required", field="pred")
    data_dir = args.data or get_settings().data_dir
    report = evaluate_dirs(args.pred, data_dir, compare_dir=args.compare, split=args.split)
    out_dir = args.out or args.pred
    json_path, _ = write_evaluation(report, out_dir)
    print_evaluation(report)
    console.print(f"[green]Report {json_path}[/green]")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    data_dir = args.data or get_settings().data_dir
    out_dir = args.out or get_settings().runs_dir / "ablation"
    report = run_ablation(
        config, data_dir, out_dir, on_variant=lambda name: console.print(f"[bold]Variant: {name}[/bold]")
    )
    console.print(render_ablation(report), markup=False)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "segment": cmd_segment,
    "quantify": cmd_quantify,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# =============================================================================
# PARSER
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment config JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="Cap torch intra-op threads")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    common.add_argument("--log-file", type=Path, help="Also log to this file")

    parser = argparse.ArgumentParser(
        prog="pjd",
        description="Joint diffusion denoising and lesion/organ segmentation of low-count PET phantoms",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Generate a phantom dataset")
    p.add_argument("--n-cases", type=int, default=DEFAULT_N_CASES, help="Number of phantoms")

    p = sub.add_parser("train", parents=[common], help="Train the joint model")
    p.add_argument("--data", type=Path, help="Dataset directory")
    p.add_argument("--resume", type=Path, help="Continue from a training checkpoint")

    for name, text in (("denoise", "Denoise low-count volumes"), ("segment", "Denoise, revise and segment")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", type=Path, help="Trained checkpoint (.pckpt)")
        p.add_argument("--input", type=Path, help="Single low-count volume (.pvol)")
        p.add_argument("--data", type=Path, help="Dataset directory (all cases of --split)")
        p.add_argument("--split", default="test", help="Dataset split for --data")
        p.add_argument("--count-fraction", type=float, help="Count level read from the dataset")
        p.add_argument("--fast-seg", action="store_true", help="One-step P_HC estimate instead of the full chain")

    p = sub.add_parser("quantify", parents=[common], help="MTV, TLG and organ SUVmean")
    p.add_argument("--input", type=Path, help="SUV volume (.pvol)")
    p.add_argument("--labels", type=Path, help="Label volume (.pvol)")
    p.add_argument("--data", type=Path, help="Dataset directory for --ground-truth")
    p.add_argument("--ground-truth", action="store_true", help="Quantify every dataset case on hc + labels")

    p = sub.add_parser("evaluate", parents=[common], help="Score predictions against a dataset")
    p.add_argument("--pred", type=Path, help="Prediction directory")
    p.add_argument("--data", type=Path, help="Reference dataset directory")
    p.add_argument("--compare", type=Path, help="Second prediction directory for Wilcoxon tests")
    p.add_argument("--split", default="test", help="Dataset split expected in --pred")

    p = sub.add_parser("ablate", parents=[common], help="Train and compare the ablation variants")
    p.add_argument("--data", type=Path, help="Dataset directory")
    p.add_argument("--count-fraction", type=float, help="Count level used for evaluation")
    p.add_argument("--fast-seg", action="store_true", help="One-step P_HC estimate at evaluation")

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose, log_file=args.log_file)
    try:
        _set_threads(args)
        if getattr(args, "out", None) is None and args.command in ("denoise", "segment", "quantify"):
            raise ConfigError(f"{args.command} needs --out DIR", field="out")
        return COMMANDS[args.command](args)
    except PetJointError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if getattr(e, "report", None):
            logger.error(f"Loss report: {e.report}")
        console.print(f"[red]✗ {e}[/red]")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        console.print(f"[red]✗ {e}[/red]")
        return EXIT_CONFIG


def cli_main():
    """Entry point for CLI."""
    sys.exit(main())


if __name__ == "__main__":
    cli_main()
