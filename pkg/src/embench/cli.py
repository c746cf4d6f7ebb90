"""Command-line surface.

Subcommands: probe, mil, qc, augment, copydetect, compare, report. Global
flags: --config, --seed, --jobs, --out-dir, --print-config; the EMBENCH_OUT
environment variable is the out-dir fallback. Exit codes: 0 success, 2
success with skipped folds, 1 fatal error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import abmil as abmil_mod
from . import report as report_mod
from .augment import AugmentParams, make_copy_detection_set
from .config import emit_toml, load_config
from .dataspec import load_embeddings, load_manifest
from .errors import ConfigError, EmbenchError
from .runner import (
    ModelData,
    RunResult,
    TaskSpec,
    compare_models,
    read_predictions_csv,
    run_copy_detection,
    run_slide_task,
    run_tile_task,
    write_copydetect_csv,
    write_predictions_csv,
    write_skips_csv,
)
from .stats import write_bootstrap_csv, write_cld_csv, write_pvalues_json
from .tileqc import QcThresholds, qc_filter, read_ppm, write_qc_report


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--jobs", type=int, help="worker parallelism cap")
    parser.add_argument("--out-dir", help="output directory (fallback: $EMBENCH_OUT)")
    parser.add_argument("--print-config", action="store_true",
                        help="print the fully resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embench",
        description="Benchmark frozen embeddings: CV probing, MIL, paired "
                    "bootstrap, and post-hoc statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="tile-level probing (lr/knn/ridge)")
    _common_flags(p)
    p.add_argument("--seeds", type=int, help="number of CV repetitions")
    p.add_argument("--folds", type=int, help="outer fold count")

    p = sub.add_parser("mil", help="slide-level ABMIL with nested CV")
    _common_flags(p)
    p.add_argument("--seeds", type=int, help="number of CV repetitions")
    p.add_argument("--folds", type=int, help="outer fold count")

    p = sub.add_parser("qc", help="tile quality-control report")
    _common_flags(p)
    p.add_argument("--input", required=True, help="directory of .ppm tiles")

    p = sub.add_parser("augment", help="generate copy-detection augmentations")
    _common_flags(p)
    p.add_argument("--input", required=True, help="directory of .ppm tiles")
    p.add_argument("--families", help="comma-separated subset of geo,color,noise,deform")

    p = sub.add_parser("copydetect", help="top-k cosine retrieval per family")
    _common_flags(p)

    p = sub.add_parser("compare", help="cross-model significance report from ledgers")
    _common_flags(p)
    p.add_argument("--ledger", action="append", required=True,
                   help="predictions.csv path (repeatable)")
    p.add_argument("--metric", choices=["mcc", "pcc", "r2"],
                   help="metric override (default: task config)")

    p = sub.add_parser("report", help="violin/heatmap data and figures")
    _common_flags(p)
    p.add_argument("--in-dir", help="directory holding bootstrap.csv, pvalues.json, cld.csv")
    return parser


def _resolve(args) -> tuple[dict, str]:
    overrides: dict = {}
    run: dict = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.jobs is not None:
        run["jobs"] = args.jobs
    if args.out_dir is not None:
        run["out_dir"] = args.out_dir
    if run:
        overrides["run"] = run
    cv: dict = {}
    if getattr(args, "seeds", None) is not None:
        cv["n_seeds"] = args.seeds
        cv["seeds"] = []
    if getattr(args, "folds", None) is not None:
        cv["outer_folds"] = args.folds
    if cv:
        overrides["cv"] = cv
    config = load_config(args.config, overrides)
    out_dir = config["run"]["out_dir"] or os.environ.get("EMBENCH_OUT") or "."
    return config, out_dir


def _load_models(config: dict, task: str) -> list[ModelData]:
    models = []
    for entry in config["models"]:
        for key in ("id", "embeddings", "manifest"):
            if key not in entry:
                raise ConfigError(f"model entry missing {key!r}")
        table = load_embeddings(entry["embeddings"])
        manifest = load_manifest(entry["manifest"], table, task=task)
        models.append(ModelData(model_id=entry["id"], table=table, manifest=manifest))
    if not models:
        raise ConfigError("no [[models]] entries in configuration")
    return models


def _grid_from_config(config: dict, task: str, n_classes: int | None):
    a = config["abmil"]
    grid = []
    for lr in a["learning_rates"]:
        for m in a["attn_dims"]:
            for l in a["fc_dims"]:
                grid.append(abmil_mod.AbmilConfig(
                    lr=lr, attn_dim=m, fc_dim=l, dropout=a["dropout"],
                    weight_decay=a["weight_decay"], betas=(a["beta1"], a["beta2"]),
                    eps=a["eps"], max_epochs=a["max_epochs"], patience=a["patience"],
                    task=task, n_classes=n_classes))
    return grid


def _taskspec(config: dict, models, grid=None) -> TaskSpec:
    return TaskSpec(
        task_kind=config["task"]["kind"],
        probe=config["task"]["probe"],
        models=models,
        outer_k=config["cv"]["outer_folds"],
        inner_k=config["cv"]["inner_folds"],
        seeds=list(config["cv"]["seeds"]),
        B=config["bootstrap"]["replicates"],
        alpha=config["bootstrap"]["alpha"],
        knn_k=config["probe"]["knn_k"],
        pcc_mode=config["probe"]["pcc_mode"],
        grid=grid,
        jobs=config["run"]["jobs"],
    )


def _emit_run_outputs(out_dir: str, config: dict, result: RunResult) -> int:
    write_predictions_csv(os.path.join(out_dir, "predictions.csv"), result)
    write_skips_csv(os.path.join(out_dir, "skips.csv"), result)
    plans = {model_id: plan.to_dict() for model_id, plan in result.plans.items()}
    with open(os.path.join(out_dir, "plan.json"), "w", encoding="utf-8") as fh:
        json.dump(plans, fh, indent=2, sort_keys=True)
        fh.write("\n")
    model_ids = sorted(result.plans)
    if len(model_ids) >= 2:
        comparison = compare_models(
            result, metric=config["task"]["metric"],
            B=config["bootstrap"]["replicates"], seed=config["run"]["seed"],
            alpha=config["bootstrap"]["alpha"], pcc_mode=config["probe"]["pcc_mode"])
        write_bootstrap_csv(os.path.join(out_dir, "bootstrap.csv"),
                            comparison.distributions)
        write_pvalues_json(os.path.join(out_dir, "pvalues.json"), comparison.report)
        write_cld_csv(os.path.join(out_dir, "cld.csv"), comparison.report)
    for skip in result.skips:
        print(f"skipped {skip.model_id} seed={skip.seed} fold={skip.fold}: "
              f"{skip.reason}", file=sys.stderr)
    return 2 if result.skips else 0


def cmd_probe(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    kind = config["task"]["kind"]
    if kind not in ("tile-class", "tile-reg"):
        raise ConfigError(f"probe command expects a tile task, got {kind!r}")
    task = "classification" if kind == "tile-class" else "regression"
    models = _load_models(config, task)
    os.makedirs(out_dir, exist_ok=True)
    result = run_tile_task(_taskspec(config, models))
    return _emit_run_outputs(out_dir, config, result)


def cmd_mil(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    kind = config["task"]["kind"]
    if kind not in ("slide-class", "slide-reg"):
        raise ConfigError(f"mil command expects a slide task, got {kind!r}")
    classify = kind == "slide-class"
    models = _load_models(config, "classification" if classify else "regression")
    n_classes = models[0].manifest.n_classes if classify else None
    grid = _grid_from_config(config, "classification" if classify else "regression",
                             n_classes)
    print(f"grid size: {len(grid)}")
    os.makedirs(out_dir, exist_ok=True)
    result = run_slide_task(_taskspec(config, models, grid=grid))
    return _emit_run_outputs(out_dir, config, result)


def cmd_qc(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    q = config["qc"]
    thresholds = QcThresholds(
        background_max=q["background_max"], blackish_max=q["blackish_max"],
        penmark_max=q["penmark_max"], dark_cutoff=q["dark_cutoff"],
        ink_floor=q["ink_floor"], ink_margin=q["ink_margin"])
    names = sorted(n for n in os.listdir(args.input) if n.endswith(".ppm"))
    if not names:
        raise ConfigError(f"no .ppm tiles under {args.input}")
    rows = []
    for name in names:
        tile = read_ppm(os.path.join(args.input, name))
        rows.append((name[:-4], qc_filter(tile, thresholds)))
    os.makedirs(out_dir, exist_ok=True)
    write_qc_report(os.path.join(out_dir, "qc_report.csv"), rows)
    kept = sum(1 for _, v in rows if v.keep)
    print(f"{kept}/{len(rows)} tiles kept")
    return 0


def cmd_augment(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    a = config["augment"]
    families = a["families"]
    if args.families:
        families = [f.strip() for f in args.families.split(",") if f.strip()]
    params = AugmentParams(
        shift_frac=a["shift_frac"], scale_frac=a["scale_frac"],
        rotate_deg=a["rotate_deg"], brightness=a["brightness"],
        contrast=a["contrast"], gamma_low=a["gamma_low"], gamma_high=a["gamma_high"],
        noise_var_low=a["noise_var_low"], noise_var_high=a["noise_var_high"],
        elastic_sigma=a["elastic_sigma"], elastic_alpha=a["elastic_alpha"])
    names = sorted(n for n in os.listdir(args.input) if n.endswith(".ppm"))
    if not names:
        raise ConfigError(f"no .ppm tiles under {args.input}")
    tiles = [(name[:-4], read_ppm(os.path.join(args.input, name))) for name in names]
    os.makedirs(out_dir, exist_ok=True)
    records = make_copy_detection_set(tiles, families, config["run"]["seed"],
                                      params=params, out_dir=out_dir)
    print(f"wrote {len(records)} augmented tiles across {len(families)} families")
    return 0


def cmd_copydetect(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    per_model = {}
    for entry in config["models"]:
        if "original" not in entry or "augmented" not in entry:
            raise ConfigError("copydetect model entries need 'original' and 'augmented'")
        original = load_embeddings(entry["original"])
        augmented = {family: load_embeddings(path)
                     for family, path in entry["augmented"].items()}
        per_model[entry["id"]] = run_copy_detection(
            original, augmented, k=config["copydetect"]["top_k"])
    if not per_model:
        raise ConfigError("no [[models]] entries in configuration")
    os.makedirs(out_dir, exist_ok=True)
    write_copydetect_csv(os.path.join(out_dir, "copydetect.csv"), per_model)
    return 0


def cmd_compare(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    metric = args.metric or config["task"]["metric"]
    classification = metric == "mcc"
    merged_rows = []
    class_names: dict = {}
    for path in args.ledger:
        part = read_predictions_csv(path, classification)
        merged_rows.extend(part.rows)
        class_names.update(part.class_names)
    if classification:
        # re-index labels lexicographically over the union of all ledgers
        all_names = sorted({n for names in class_names.values() for n in names})
        remap = {}
        for model_id, names in class_names.items():
            remap[model_id] = {i: all_names.index(n) for i, n in enumerate(names)}
        merged_rows = [
            r.__class__(r.model_id, r.unit_id, r.seed, r.fold,
                        remap[r.model_id][r.pred], remap[r.model_id][r.truth])
            for r in merged_rows
        ]
        class_names = {m: all_names for m in class_names}
    result = RunResult(task_kind="tile-class" if classification else "tile-reg",
                       rows=merged_rows, plans={}, skips=[], class_names=class_names)
    comparison = compare_models(
        result, metric=metric, B=config["bootstrap"]["replicates"],
        seed=config["run"]["seed"], alpha=config["bootstrap"]["alpha"],
        pcc_mode=config["probe"]["pcc_mode"])
    os.makedirs(out_dir, exist_ok=True)
    write_bootstrap_csv(os.path.join(out_dir, "bootstrap.csv"), comparison.distributions)
    write_pvalues_json(os.path.join(out_dir, "pvalues.json"), comparison.report)
    write_cld_csv(os.path.join(out_dir, "cld.csv"), comparison.report)
    return 0


def cmd_report(args) -> int:
    config, out_dir = _resolve(args)
    if args.print_config:
        print(emit_toml(config), end="")
        return 0
    in_dir = args.in_dir or out_dir
    values = report_mod.load_bootstrap_csv(os.path.join(in_dir, "bootstrap.csv"))
    pvalues = report_mod.load_pvalues_json(os.path.join(in_dir, "pvalues.json"))
    cld_rows = report_mod.load_cld_csv(os.path.join(in_dir, "cld.csv"))
    os.makedirs(out_dir, exist_ok=True)
    ranking = [row["model"] for row in cld_rows]
    report_mod.write_violin_csv(os.path.join(out_dir, "violin.csv"), values)
    report_mod.write_pvalue_heatmap_json(os.path.join(out_dir, "pvalue_heatmap.json"),
                                         pvalues, ranking)
    paths = report_mod.render_figures(out_dir, values, pvalues, cld_rows)
    print("wrote " + ", ".join(os.path.basename(p) for p in
                               [os.path.join(out_dir, "violin.csv"),
                                os.path.join(out_dir, "pvalue_heatmap.json")] + paths))
    return 0


_HANDLERS = {
    "probe": cmd_probe,
    "mil": cmd_mil,
    "qc": cmd_qc,
    "augment": cmd_augment,
    "copydetect": cmd_copydetect,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (EmbenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
