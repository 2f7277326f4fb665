"""
hcvt Command Line

Usage: python -m src.cli <synth|train|ablate|eval|compare|cam> [options]

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from src.utils.config import VARIANTS, load_config
from src.utils.exceptions import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    OutputExistsError,
    TrainingAborted,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
USAGE_ERRORS = (ConfigError, ContractViolation, DataFormatError, OutputExistsError, UndefinedMetricError)
METHODS = ("cnn", "vit", "rollout", "both")


def banner(title):
    print("=" * 60)
    print(f"hcvt - {title}")
    print("=" * 60)


def _run_config(args, extra=()):
    path = args.config
    if path is None:
        path = CONFIG_DIR / ("tiny.json" if getattr(args, "tiny", False) else "default.json")
    overrides = list(args.set or []) + list(extra)
    return load_config(path, overrides)


def _percent(value):
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def cmd_synth(args):
    from src.utils.synthetic import generate_synthetic

    banner("Synthetic Dataset")
    manifest = generate_synthetic(
        args.n, args.out, prevalence=args.prevalence, seed=args.seed, tiny=args.tiny, force=args.force
    )
    depth_lo, depth_hi = manifest.depth_range
    print(f"Patients: {len(manifest.patient_ids)}")
    print(f"Positives: {manifest.class_counts['1']}  Negatives: {manifest.class_counts['0']}")
    print(f"Slices: {manifest.native_size}x{manifest.native_size}, depth {depth_lo}..{depth_hi}")
    print(f"Manifest: {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _train_overrides(args):
    extra = []
    if args.variant is not None:
        extra.append(f"model.variant={args.variant}")
    if args.folds is not None:
        extra.append(f"folds={args.folds}")
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    if args.jobs is not None:
        extra.append(f"jobs={args.jobs}")
    return extra


def cmd_train(args):
    from src.training.cross_validation import run_cv

    banner("Cross-Validated Training")
    config = _run_config(args, _train_overrides(args))
    out = Path(args.out) if args.out else Path("runs") / config.model.variant
    print(f"Variant: {config.model.variant}  Folds: {config.folds}  Output: {out}")
    report = run_cv(args.data, config, out, quiet=args.quiet)
    print(report["summary"]["line"])
    return EXIT_OK


def cmd_ablate(args):
    from src.training.cross_validation import run_ablation

    banner("Ablation Matrix")
    config = _run_config(args, _train_overrides(args))
    out = Path(args.out) if args.out else Path("runs") / "ablation"
    result = run_ablation(args.data, config, args.matrix, out, only=args.rows, quiet=args.quiet)
    for name, row in result["rows"].items():
        p = row["p_value_vs_full"]
        suffix = "" if p is None else f" | p vs full {p:.3g}"
        print(f"{name:<28} {row['summary']['line']}{suffix}")
    return EXIT_OK


def _split_ids(split_file, split):
    with open(split_file, "r", encoding="utf-8") as f:
        splits = json.load(f)
    if split not in splits:
        raise DataFormatError(f"{split_file} has no {split!r} split")
    return list(splits[split])


def _evaluate_checkpoint(ckpt, data, patient_ids):
    from src.models.predictor import Predictor
    from src.training.trainer import evaluate

    predictor = Predictor.from_checkpoint(ckpt)
    return evaluate(predictor.model, predictor.dataset(data, patient_ids))


def cmd_eval(args):
    from src.utils.metrics import aggregate

    banner("Evaluation")
    if args.run:
        results = []
        for fold_dir in sorted(Path(args.run).glob("fold*")):
            ids = _split_ids(fold_dir / "split.json", args.split)
            result = _evaluate_checkpoint(fold_dir / "ckpt.pt", args.data, ids)
            print(f"{fold_dir.name}: AUC {_percent(result['auc'])} | "
                  f"Precision {_percent(result['precision'])} | Recall {_percent(result['recall'])}")
            results.append(result)
        if not results:
            raise DataFormatError(f"no fold directories in {args.run}")
        print(aggregate(results).format_line())
        return EXIT_OK

    if not args.ckpt:
        raise ContractViolation("eval needs --ckpt (with --split-file) or --run")
    split_file = args.split_file or Path(args.ckpt).parent / "split.json"
    ids = _split_ids(split_file, args.split)
    result = _evaluate_checkpoint(args.ckpt, args.data, ids)
    print(f"AUC {_percent(result['auc'])} | Precision {_percent(result['precision'])} | "
          f"Recall {_percent(result['recall'])}")
    return EXIT_OK


def cmd_compare(args):
    from src.training.cross_validation import compare_runs, record_comparison

    banner("Paired Run Comparison")
    run_a, run_b = args.run
    comparison = compare_runs(run_a, run_b)
    record_comparison(run_a, run_b, comparison["p_value"])
    print(f"A {run_a}: {comparison['a']['line']}")
    print(f"B {run_b}: {comparison['b']['line']}")
    print(f"{comparison['test']} p = {comparison['p_value']:.4g}")
    return EXIT_OK


def cmd_cam(args):
    from src.explain.cam import as_batch, cnn_cam, vit_attention_map
    from src.explain.overlay import overlay, write_sidecar
    from src.models.predictor import Predictor

    banner("Interpretability Maps")
    predictor = Predictor.from_checkpoint(args.ckpt)
    sample = predictor.dataset(args.data, [args.patient])[0]
    batch = as_batch(sample)
    model = predictor.model

    maps = []
    if args.method in ("cnn", "both"):
        maps.append(cnn_cam(model, batch, args.sequence, args.slice))
    if args.method in ("vit", "both"):
        maps.append(vit_attention_map(model, batch, args.sequence, args.slice))
    if args.method == "rollout":
        maps.append(vit_attention_map(model, batch, args.sequence, args.slice, rollout=True))

    slice_2d = sample[args.sequence][0, args.slice].numpy()
    out = Path(args.out)
    for heatmap in maps:
        path = out / f"{args.patient}_{args.sequence}_s{args.slice}_{heatmap.source}_{heatmap.method}.png"
        overlay(slice_2d, heatmap.values, path)
        write_sidecar(path, heatmap, predictor.checkpoint_hash)
        print(f"{heatmap.source} ({heatmap.method}): {path}")
    return EXIT_OK


def _add_config_args(p):
    p.add_argument("--config", help="JSON or YAML run config (default: configs/default.json)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. model.vit.depth=2")
    p.add_argument("--tiny", action="store_true", help="start from configs/tiny.json")


def _add_train_args(p):
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    _add_config_args(p)
    p.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
    p.add_argument("--folds", type=int, help="number of cross-validation folds")
    p.add_argument("--seed", type=int, help="fold plan and training seed")
    p.add_argument("--jobs", type=int, help="folds trained in parallel (capped by HCVT_THREADS)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--quiet", action="store_true", help="hide progress bars")


def build_parser():
    parser = argparse.ArgumentParser(prog="hcvt", description="Gated CNN-ViT recurrence classifier")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=280, help="number of patients")
    p.add_argument("--prevalence", type=float, default=0.62, help="fraction of positive labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tiny", action="store_true", help="64x64 slices, depth 8..24")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold cross-validated training of one variant")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train every row of the ablation matrix on one fold plan")
    _add_train_args(p)
    p.add_argument("--matrix", default=str(CONFIG_DIR / "ablation.yaml"), help="ablation rows file")
    p.add_argument("--rows", nargs="+", help="subset of row names")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a saved split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint archive")
    p.add_argument("--split-file", help="split.json (default: next to the checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--run", help="run directory; evaluates every fold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired t-test between two runs")
    p.add_argument("--run", nargs=2, required=True, metavar=("A", "B"))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cam", help="write interpretability overlays for one slice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--sequence", required=True, choices=("adc", "t2", "dwi"))
    p.add_argument("--slice", type=int, required=True, help="slice of the preprocessed volume")
    p.add_argument("--method", default="both", choices=METHODS)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv=None):
    """Parse, dispatch and map errors to exit codes"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("Unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
