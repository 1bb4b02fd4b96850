#!/usr/bin/env python3
"""CLI entrypoint for muscore.

Commands:
- validate <dataset>: Check a dataset manifest and its tensors
- run <dataset>: Score every sample and write maps, scores and a summary
- eval <run_dir> [...]: Compute metrics; several runs give mean±std
- plot <run_dir>: Write PNG heatmaps of a run's maps
- synth <output_dir>: Generate a synthetic dataset with planted anomalies
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import get_config, validate_config
from .errors import MuscoreError, ValidationFailed
from .evaluate import SUMMARY_FIELDS, evaluate_run, format_rows, summarize_runs, write_metrics
from .paths import METRICS_FILE, get_run_paths
from .pipeline import run_pipeline
from .plot import MODES, plot_run
from .synth_bench import generate_synthetic_dataset
from .tensor_io import load_manifest, validate_dataset
from .types import SynthConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _effective_config(args):
    overrides = list(args.set or [])
    if getattr(args, "workers", None):
        overrides.append(f"run.workers={args.workers}")
    if getattr(args, "output", None):
        overrides.append(f"paths.output={args.output}")
    if getattr(args, "modality", None):
        overrides.append(f"run.modality={args.modality}")
    if getattr(args, "png", False):
        overrides.append("run.write_png=true")
    if getattr(args, "no_cache", False):
        overrides.append("run.cache=false")
    if getattr(args, "quiet", False):
        overrides.append("run.progress=false")
    return get_config(args.config, overrides)


def _print_report(report):
    print(f"❌ Dataset has {len(report.entries)} issue(s):")
    for entry in report.entries:
        print(f"   [{entry.kind}] {entry.sample_id or '-'}: {entry.message}")


def _validate(args) -> int:
    """Check a dataset manifest and its tensors."""
    dataset = load_manifest(args.dataset)
    report = validate_dataset(dataset.samples, dataset.root)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    elif report.ok:
        print(f"✅ {dataset.name}: {len(dataset.samples)} samples, no issues")
    else:
        _print_report(report)
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _run(args) -> int:
    """Score every sample of a dataset."""
    config = _effective_config(args)
    if not validate_config(config):
        return EXIT_RUNTIME
    dataset = load_manifest(args.dataset)
    output = config["paths"]["output"]

    result = run_pipeline(dataset, config, output_dir=output)

    print(f"\n✅ Scored {len(result.samples)} samples ({result.modality}) in {len(result.subsets)} subset(s)")
    for stage, seconds in result.timings.to_dict().items():
        print(f"   {stage:<12} {seconds:8.2f}s")
    print(f"📁 Output: {output}")
    return EXIT_OK


def _eval(args) -> int:
    """Compute metrics for one or more runs."""
    if len(args.run_dirs) == 1:
        rows = evaluate_run(args.run_dirs[0], args.dataset)
        target = args.output or get_run_paths(args.run_dirs[0])["metrics"]
        write_metrics(rows, target)
    else:
        rows = summarize_runs(args.run_dirs, args.dataset)
        target = args.output or Path.cwd() / METRICS_FILE
        write_metrics(rows, target, fields=SUMMARY_FIELDS)

    print(format_rows(rows))
    print(f"📊 Metrics saved to: {target}")
    return EXIT_OK


def _plot(args) -> int:
    """Write heatmaps of a run."""
    written = plot_run(args.run_dir, mode=args.mode, overlay=args.overlay, dataset_dir=args.dataset)
    print(f"🖼️  Wrote {len(written)} heatmaps")
    return EXIT_OK


def _synth(args) -> int:
    """Generate a synthetic dataset."""
    config = SynthConfig(
        num_samples=args.samples,
        grid_side=args.grid_side,
        patch_pixels=args.patch_pixels,
        feature_dim=args.feature_dim,
        num_stages=args.stages,
        anomaly_rate=args.anomaly_rate,
        seed=args.seed,
    )
    dataset, truth = generate_synthetic_dataset(config, args.output_dir)
    anomalous = sum(gt.label for gt in truth)
    print(f"✅ Wrote {len(dataset.samples)} samples ({anomalous} anomalous) to {args.output_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="muscore: zero-shot multimodal anomaly scoring")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="Override a config value (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="cmd", help="Available commands")

    p_validate = subparsers.add_parser("validate", help="Check a dataset")
    p_validate.add_argument("dataset", help="Dataset directory or dataset.json")
    p_validate.add_argument("--json", action="store_true", help="Print the report as JSON")
    p_validate.set_defaults(func=_validate)

    p_run = subparsers.add_parser("run", help="Score a dataset")
    p_run.add_argument("dataset", help="Dataset directory or dataset.json")
    p_run.add_argument("--output", help="Run output directory")
    p_run.add_argument("--modality", choices=["2d", "3d", "multimodal"], help="Modalities to use")
    p_run.add_argument("--workers", type=int, help="Worker threads (default: MUSCORE_WORKERS or 1)")
    p_run.add_argument("--png", action="store_true", help="Also write PNG heatmaps")
    p_run.add_argument("--no-cache", action="store_true", help="Do not read or write the artifact cache")
    p_run.add_argument("--quiet", action="store_true", help="No progress bars")
    p_run.set_defaults(func=_run)

    p_eval = subparsers.add_parser("eval", help="Compute metrics for runs")
    p_eval.add_argument("run_dirs", nargs="+", help="Run directories; several give mean±std")
    p_eval.add_argument("--dataset", help="Dataset directory (default: recorded in the run summary)")
    p_eval.add_argument("--output", help="Metrics CSV path")
    p_eval.set_defaults(func=_eval)

    p_plot = subparsers.add_parser("plot", help="Write heatmap PNGs")
    p_plot.add_argument("run_dir", help="Run directory")
    p_plot.add_argument("--mode", choices=list(MODES), default="turbo", help="Colormap")
    p_plot.add_argument("--overlay", action="store_true", help="Draw ground-truth contours")
    p_plot.add_argument("--dataset", help="Dataset directory for contours")
    p_plot.set_defaults(func=_plot)

    p_synth = subparsers.add_parser("synth", help="Generate a synthetic dataset")
    p_synth.add_argument("output_dir", help="Dataset directory to create")
    p_synth.add_argument("--samples", type=int, default=40, help="Number of samples")
    p_synth.add_argument("--grid-side", type=int, default=28, help="Patches per grid side")
    p_synth.add_argument("--patch-pixels", type=int, default=4, help="Pixels per patch side")
    p_synth.add_argument("--feature-dim", type=int, default=16, help="Feature width per stage")
    p_synth.add_argument("--stages", type=int, default=3, help="Feature stages")
    p_synth.add_argument("--anomaly-rate", type=float, default=0.05, help="Fraction of anomalous samples")
    p_synth.add_argument("--seed", type=int, default=0, help="Generator seed")
    p_synth.set_defaults(func=_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')

    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE

    logger.info("muscore command: %s", args.cmd)
    try:
        return args.func(args)
    except ValidationFailed as e:
        logger.error(str(e))
        _print_report(e.report)
        return EXIT_VALIDATION
    except (MuscoreError, OSError, KeyError, ValueError) as e:
        logger.error(f"Command failed: {e}")
        print("Error:", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
