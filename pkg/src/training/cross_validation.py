"""
Cross-Validation and Ablation Runs

Patient-level stratified k-fold orchestration with per-fold validation
carve-outs, the run report, the ablation matrix and paired run comparison.
"""

import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch
import yaml

from src.models.hcnn_vit import build_variant
from src.training.trainer import FoldResult, seed_everything, train_fold
from src.utils.config import (
    apply_overrides,
    config_hash,
    resolve_threads,
    run_config_from_dict,
    save_config,
    to_dict,
)
from src.utils.data_loader import (
    FoldPlan,
    RecurrenceDataset,
    assert_disjoint,
    carve_validation,
    dump_json,
    kfold_split,
    load_manifest,
    load_volumes,
)
from src.utils.exceptions import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    HCVTError,
    TrainingAborted,
)
from src.utils.metrics import PAIRED_TEST, aggregate, paired_pvalue
from src.utils.preprocess import compute_norm_stats

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
ABLATION_NAME = "ablation.json"

# re-raised from any fold instead of being recorded as a failed fold
INPUT_ERRORS = (ConfigError, DataFormatError)


def fold_splits(plan, fold, labels, val_fraction, seed):
    """
    Train / validation / test ids of one fold

    The validation carve-out is seeded per fold so every variant sharing the
    plan and seed trains on identical patients.
    """
    train_ids, test_ids = plan.split(fold)
    train_ids, val_ids = carve_validation(train_ids, labels, val_fraction, seed=seed + fold)
    assert_disjoint(train=train_ids, val=val_ids, test=test_ids)
    return {"train": train_ids, "val": val_ids, "test": test_ids}


def build_datasets(splits, volumes, records, config, fold):
    """RecurrenceDatasets for one fold plus the training-split NormStats"""
    stats = compute_norm_stats([records[pid] for pid in splits["train"]])
    seed = config.train.seed + fold
    train = RecurrenceDataset(
        splits["train"],
        volumes,
        records,
        stats,
        augment=config.train.augment,
        max_degrees=config.preprocess.rotation_degrees,
        seed=seed,
    )
    val = RecurrenceDataset(splits["val"], volumes, records, stats)
    test = RecurrenceDataset(splits["test"], volumes, records, stats)
    return train, val, test, stats


def run_fold(data_root, config, plan, fold, out_dir, volumes=None, quiet=False):
    """
    Train a fresh model on one fold

    Args:
        data_root: Dataset directory
        config: RunConfig
        plan: FoldPlan shared by the whole run
        fold: Fold index
        out_dir: Run directory; the fold writes into fold{i}/
        volumes: Preprocessed volumes; loaded on demand when None

    Returns:
        result: FoldResult
    """
    manifest, records = load_manifest(data_root)
    splits = fold_splits(plan, fold, manifest.labels, config.train.val_fraction, config.train.seed)
    if volumes is None:
        volumes = load_volumes(
            manifest,
            manifest.patient_ids,
            config.model.input.depth,
            config.model.input.size,
            config.preprocess.spline_order,
        )
    train, val, test, stats = build_datasets(splits, volumes, records, config, fold)

    fold_dir = Path(out_dir) / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    dump_json(splits, fold_dir / "split.json")

    seed_everything(config.train.seed + fold)
    model = build_variant(config.model)
    extras = {
        "norm_stats": stats.to_dict(),
        "preprocess": to_dict(config.preprocess),
        "split": splits,
        "config_hash": config_hash(config),
    }
    return train_fold(model, train, val, test, config.train, fold_dir, fold=fold, extras=extras, quiet=quiet)


def _fold_worker(payload):
    """Process-pool entry point; arguments travel as plain dicts"""
    torch.set_num_threads(payload["threads"])
    logging.basicConfig(level=payload["log_level"])
    config = run_config_from_dict(payload["config"]).validate()
    plan = FoldPlan.from_dict(payload["plan"])
    try:
        result = run_fold(payload["data_root"], config, plan, payload["fold"], payload["out_dir"], quiet=True)
    except (HCVTError, RuntimeError) as exc:
        if isinstance(exc, INPUT_ERRORS):
            raise
        logger.error("Fold %d failed: %s", payload["fold"], exc)
        return FoldResult.failed(payload["fold"], exc).to_dict()
    return result.to_dict()


def _run_sequential(data_root, config, plan, out_dir, quiet):
    manifest, _ = load_manifest(data_root)
    volumes = load_volumes(
        manifest,
        manifest.patient_ids,
        config.model.input.depth,
        config.model.input.size,
        config.preprocess.spline_order,
    )
    results = []
    for fold in range(plan.k):
        logger.info("Fold %d/%d", fold + 1, plan.k)
        try:
            result = run_fold(data_root, config, plan, fold, out_dir, volumes=volumes, quiet=quiet)
        except (HCVTError, RuntimeError) as exc:
            if isinstance(exc, INPUT_ERRORS):
                raise
            logger.error("Fold %d failed: %s", fold, exc)
            result = FoldResult.failed(fold, exc)
        results.append(result.to_dict())
    return results


def _run_parallel(data_root, config, plan, out_dir, workers):
    threads = max(1, resolve_threads() // workers)
    payloads = [
        {
            "data_root": str(data_root),
            "config": to_dict(config),
            "plan": plan.to_dict(),
            "fold": fold,
            "out_dir": str(out_dir),
            "threads": threads,
            "log_level": logging.getLogger().level,
        }
        for fold in range(plan.k)
    ]
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
        return list(pool.map(_fold_worker, payloads))


def run_cv(data_root, config, out_dir, plan=None, quiet=False):
    """
    k-fold cross-validation of one variant

    Args:
        data_root: Dataset directory
        config: Validated RunConfig
        out_dir: Run directory (fold{i}/, report.json, config.json)
        plan: Existing FoldPlan to reuse; built from config.folds and the seed when None
        quiet: Disable progress bars

    Returns:
        report: RunReport dict as written to report.json

    Raises:
        TrainingAborted: After the report is written, when any fold failed
    """
    manifest, _ = load_manifest(data_root)
    if plan is None:
        plan = kfold_split(manifest, k=config.folds, seed=config.train.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    dump_json(plan.to_dict(), out / "fold_plan.json")

    workers = min(config.jobs, resolve_threads(), plan.k)
    if workers > 1:
        logger.info("Running %d folds on %d worker processes", plan.k, workers)
        per_fold = _run_parallel(data_root, config, plan, out, workers)
    else:
        per_fold = _run_sequential(data_root, config, plan, out, quiet)

    completed = [r for r in per_fold if r["status"] == "ok"]
    summary = aggregate(completed)
    report = {
        "variant": config.model.variant,
        "per_fold": per_fold,
        "summary": dict(summary.to_dict(), line=summary.format_line()),
        "comparisons": [],
        "config_hash": config_hash(config),
        "fold_plan": plan.to_dict(),
        "validation_carve": {
            "fraction": config.train.val_fraction,
            "stratified": True,
            "seed": "train.seed + fold",
        },
        "test": PAIRED_TEST,
    }
    dump_json(report, out / REPORT_NAME)
    logger.info("%s: %s", config.model.variant, summary.format_line())

    failed = [r["fold"] for r in per_fold if r["status"] != "ok"]
    if failed:
        raise TrainingAborted(f"folds {failed} failed; see {out / REPORT_NAME}", fold=failed[0])
    return report


def load_report(run_dir):
    path = Path(run_dir) / REPORT_NAME
    if not path.exists():
        raise DataFormatError(f"no {REPORT_NAME} in {run_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _fold_aucs(report, name):
    aucs = [r["auc"] for r in report["per_fold"]]
    if any(r["status"] != "ok" or r["auc"] is None for r in report["per_fold"]):
        raise ContractViolation(f"run {name} has failed or undefined folds; cannot pair")
    return aucs


def compare_reports(report_a, report_b, name_a="A", name_b="B"):
    """
    Paired t-test of two runs over the same FoldPlan

    Returns:
        comparison: {"p_value", "test", "a", "b"} with both summaries
    """
    if FoldPlan.from_dict(report_a["fold_plan"]) != FoldPlan.from_dict(report_b["fold_plan"]):
        raise ContractViolation(f"runs {name_a} and {name_b} use different fold plans; they cannot be paired")
    p = paired_pvalue(_fold_aucs(report_a, name_a), _fold_aucs(report_b, name_b))
    return {"p_value": p, "test": PAIRED_TEST, "a": report_a["summary"], "b": report_b["summary"]}


def compare_runs(run_a, run_b):
    return compare_reports(load_report(run_a), load_report(run_b), str(run_a), str(run_b))


def record_comparison(run_dir, baseline_run, p_value):
    """
    Add a paired comparison against `baseline_run` to the run's report.json

    An earlier entry for the same baseline is replaced.

    Returns:
        report: Updated report
    """
    report = load_report(run_dir)
    baseline = str(baseline_run)
    entries = [c for c in report.get("comparisons", []) if c["baseline_run"] != baseline]
    entries.append({"baseline_run": baseline, "p_value": p_value, "test": PAIRED_TEST})
    report["comparisons"] = entries
    dump_json(report, Path(run_dir) / REPORT_NAME)
    return report


def load_ablation_rows(path):
    """
    Read the ablation matrix

    Returns:
        rows: Mapping row name -> {"variant": str, "overrides": [dotted key=value]}
    """
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    rows = data.get("rows")
    if not isinstance(rows, dict) or not rows:
        raise ConfigError(f"{path}: expected a non-empty 'rows' mapping")
    out = {}
    for name, row in rows.items():
        row = row or {}
        unknown = sorted(set(row) - {"variant", "overrides"})
        if unknown:
            raise ConfigError(f"{path}: row {name!r} has unknown keys {unknown}")
        out[name] = {"variant": row.get("variant", name), "overrides": list(row.get("overrides") or [])}
    return out


def row_config(base, row):
    """Base RunConfig with the row's variant and overrides applied"""
    data = to_dict(base)
    data["model"]["variant"] = row["variant"]
    apply_overrides(data, row["overrides"])
    return run_config_from_dict(data).validate()


def run_ablation(data_root, base_config, ablation_path, out_dir, only=None, quiet=False):
    """
    Train every ablation row on one shared FoldPlan

    Args:
        data_root: Dataset directory
        base_config: RunConfig the rows start from
        ablation_path: YAML file with the row matrix
        out_dir: Receives <row>/ run directories and ablation.json
        only: Optional subset of row names

    Returns:
        summary: Content of ablation.json
    """
    rows = load_ablation_rows(ablation_path)
    if only:
        missing = sorted(set(only) - set(rows))
        if missing:
            raise ConfigError(f"unknown ablation rows {missing}; available: {sorted(rows)}")
        rows = {k: v for k, v in rows.items() if k in only}
    configs = {name: row_config(base_config, row) for name, row in rows.items()}

    manifest, _ = load_manifest(data_root)
    plan = kfold_split(manifest, k=base_config.folds, seed=base_config.train.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports, failures = {}, []
    for name, config in configs.items():
        logger.info("Ablation row %s (variant %s)", name, config.model.variant)
        try:
            reports[name] = run_cv(data_root, config, out / name, plan=plan, quiet=quiet)
        except TrainingAborted as exc:
            logger.error("Row %s: %s", name, exc)
            failures.append(name)
            reports[name] = load_report(out / name)

    table = {}
    reference = reports.get("full")
    for name, report in reports.items():
        entry = {"variant": report["variant"], "summary": report["summary"], "p_value_vs_full": None}
        if reference is not None and name != "full" and name not in failures and "full" not in failures:
            comparison = compare_reports(reference, report, "full", name)
            entry["p_value_vs_full"] = comparison["p_value"]
            reports[name] = record_comparison(out / name, out / "full", comparison["p_value"])
        table[name] = entry
    result = {"rows": table, "fold_plan": plan.to_dict(), "test": PAIRED_TEST, "failed": failures}
    dump_json(result, out / ABLATION_NAME)
    if failures:
        raise TrainingAborted(f"ablation rows {failures} had failed folds; see {out / ABLATION_NAME}")
    return result
