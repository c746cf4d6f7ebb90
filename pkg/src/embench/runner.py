"""Task orchestration: folds + probes/ABMIL + metrics + statistics.

Four evaluation pipelines (tile classification, tile regression, slide
classification, slide regression) plus copy detection. Each produces a
per-model prediction ledger; the paired bootstrap and the post-hoc stack run
on pooled cross-seed ledgers.

Parallel units — (model, seed, fold) — share only immutable inputs, and the
ledger is assembled by a deterministic sort, so results are byte-identical
for any worker count.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import abmil as abmil_mod
from .dataspec import BagSet, EmbeddingTable, SampleManifest, assemble_bags
from .errors import (
    AlignmentError,
    ArgumentError,
    DegenerateFoldError,
    DivergenceError,
)
from .folds import FoldPlan, flat_plan, nested_plan, verify_no_leakage
from .metrics import confusion_matrix, mcc, pearson_multi, r2, topk_accuracy
from .probes import (
    KnnIndex,
    fit_logistic,
    fit_ridge,
    knn_predict,
    predict_logistic,
    predict_ridge,
)
from .rng import derive_seed
from .stats import (
    BootstrapDistribution,
    SignificanceReport,
    bootstrap,
    check_cld_laws,
    paired_resample_table,
    significance_report,
)

TILE_TASKS = ("tile-class", "tile-reg")
SLIDE_TASKS = ("slide-class", "slide-reg")
PROBE_FOR_TASK = {
    "tile-class": ("lr", "knn"),
    "tile-reg": ("ridge",),
    "slide-class": ("abmil",),
    "slide-reg": ("abmil",),
}


@dataclass
class ModelData:
    model_id: str
    table: EmbeddingTable
    manifest: SampleManifest


@dataclass
class TaskSpec:
    task_kind: str
    probe: str
    models: list[ModelData]
    outer_k: int = 5
    inner_k: int = 4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    B: int = 1000
    alpha: float = 0.05
    knn_k: int = 20
    pcc_mode: str = "per_target"
    grid: list[abmil_mod.AbmilConfig] | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.task_kind not in PROBE_FOR_TASK:
            raise ArgumentError(f"unknown task kind {self.task_kind!r}")
        if self.probe not in PROBE_FOR_TASK[self.task_kind]:
            raise ArgumentError(
                f"probe {self.probe!r} incompatible with {self.task_kind!r}; "
                f"valid: {PROBE_FOR_TASK[self.task_kind]}")
        if not self.models:
            raise ArgumentError("no models listed")


@dataclass(frozen=True)
class LedgerRow:
    model_id: str
    unit_id: str
    seed: int
    fold: int
    pred: object            # class index, float, or target vector
    truth: object


@dataclass(frozen=True)
class SkipEvent:
    model_id: str
    seed: int
    fold: int
    stage: str
    reason: str


@dataclass
class RunResult:
    task_kind: str
    rows: list[LedgerRow]
    plans: dict[str, FoldPlan]
    skips: list[SkipEvent]
    class_names: dict[str, list[str]]

    def rows_for(self, model_id: str) -> list[LedgerRow]:
        return [r for r in self.rows if r.model_id == model_id]


def _sorted_rows(rows: list[LedgerRow]) -> list[LedgerRow]:
    return sorted(rows, key=lambda r: (r.model_id, r.seed, r.fold, r.unit_id))


def _run_units(units, worker, jobs: int):
    """Run `worker` over `units`, optionally in a thread pool; the caller
    merges results deterministically, so completion order is irrelevant."""
    if jobs <= 1:
        return [worker(u) for u in units]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, units))


# ---------------------------------------------------------------------------
# tile tasks


def _group_units(manifest: SampleManifest, classify: bool):
    rows_of: dict[str, list[int]] = {}
    for entry in manifest.entries:
        rows_of.setdefault(entry.group_id, []).append(entry.row_index)
    rows_of = {g: sorted(rows) for g, rows in rows_of.items()}
    if not classify:
        return sorted(rows_of), rows_of
    labels = manifest.labels_array()
    units = []
    for group in sorted(rows_of):
        counts = np.bincount(labels[rows_of[group]], minlength=manifest.n_classes)
        units.append((group, int(counts.argmax())))  # majority class, low index wins ties
    return units, rows_of


def run_tile_task(spec: TaskSpec) -> RunResult:
    """Repeated (stratified) group K-fold probing of every model's tiles."""
    if spec.task_kind not in TILE_TASKS:
        raise ArgumentError(f"run_tile_task got {spec.task_kind!r}")
    classify = spec.task_kind == "tile-class"
    rows: list[LedgerRow] = []
    plans: dict[str, FoldPlan] = {}
    skips: list[SkipEvent] = []
    class_names: dict[str, list[str]] = {}

    for model in spec.models:
        manifest = model.manifest
        data = model.table.data
        labels = manifest.labels_array()
        sample_of_row = {e.row_index: e.sample_id for e in manifest.entries}
        units, rows_of = _group_units(manifest, classify)
        unit_ids = [u for u, _ in units] if classify else list(units)
        plan = flat_plan(units, spec.outer_k, spec.seeds, stratified=classify)
        verify_no_leakage(plan, unit_ids)
        plans[model.model_id] = plan
        if classify:
            class_names[model.model_id] = manifest.class_names

        def evaluate(assignment, model=model, manifest=manifest, data=data,
                     labels=labels, sample_of_row=sample_of_row, rows_of=rows_of,
                     unit_ids=unit_ids, classify=classify):
            test_groups = set(assignment.test)
            train_groups = [g for g in unit_ids if g not in test_groups]
            if set(train_groups) & test_groups:
                raise AssertionError("group leakage detected at execution time")
            train_rows = [r for g in train_groups for r in rows_of[g]]
            test_rows = [r for g in sorted(test_groups) for r in rows_of[g]]
            X_tr, X_te = data[train_rows], data[test_rows]
            y_tr = labels[train_rows]
            out_rows: list[LedgerRow] = []
            try:
                if classify:
                    if spec.probe == "lr":
                        probe = fit_logistic(X_tr, y_tr, manifest.n_classes)
                        preds = predict_logistic(probe, X_te)[0]
                    else:
                        present = set(np.unique(y_tr).tolist())
                        if present != set(range(manifest.n_classes)):
                            raise DegenerateFoldError(
                                f"classes {sorted(set(range(manifest.n_classes)) - present)} "
                                "absent from training fold")
                        k_eff = min(spec.knn_k, X_tr.shape[0])
                        preds = knn_predict(KnnIndex(X_tr, y_tr, k=k_eff), X_te)
                else:
                    probe = fit_ridge(X_tr, labels[train_rows])
                    preds = predict_ridge(probe, X_te)
            except DegenerateFoldError as exc:
                return [], SkipEvent(model.model_id, assignment.seed,
                                     assignment.outer_fold, "fit", str(exc))
            for i, row_idx in enumerate(test_rows):
                if classify:
                    pred_value: object = int(preds[i])
                    truth_value: object = int(labels[row_idx])
                else:
                    pred_value = np.atleast_1d(preds[i]).astype(np.float64)
                    truth_value = np.atleast_1d(labels[row_idx]).astype(np.float64)
                    if pred_value.size == 1:
                        pred_value = float(pred_value[0])
                        truth_value = float(truth_value[0])
                out_rows.append(LedgerRow(model.model_id, sample_of_row[row_idx],
                                          assignment.seed, assignment.outer_fold,
                                          pred_value, truth_value))
            return out_rows, None

        results = _run_units(plan.assignments, evaluate, spec.jobs)
        for out_rows, skip in results:
            rows.extend(out_rows)
            if skip is not None:
                skips.append(skip)

    return RunResult(task_kind=spec.task_kind, rows=_sorted_rows(rows), plans=plans,
                     skips=sorted(skips, key=lambda s: (s.model_id, s.seed, s.fold)),
                     class_names=class_names)


# ---------------------------------------------------------------------------
# slide tasks


def run_slide_task(spec: TaskSpec) -> RunResult:
    """Nested CV: per (model, seed, outer fold) the inner loop selects the
    grid config, the winner retrains on all outer-train bags with the mean
    best-epoch budget, and the held-out test bags are predicted once."""
    if spec.task_kind not in SLIDE_TASKS:
        raise ArgumentError(f"run_slide_task got {spec.task_kind!r}")
    classify = spec.task_kind == "slide-class"
    rows: list[LedgerRow] = []
    plans: dict[str, FoldPlan] = {}
    skips: list[SkipEvent] = []
    class_names: dict[str, list[str]] = {}

    for model in spec.models:
        manifest = model.manifest
        bagset: BagSet = assemble_bags(manifest)
        bags_by_id = {}
        for bag in bagset.bags:
            matrix = model.table.data[bag.member_rows]
            target = bag.label.class_index if classify else bag.label.value
            bags_by_id[bag.bag_id] = (matrix, target)
        plan = nested_plan(bagset, spec.outer_k, spec.inner_k, spec.seeds)
        verify_no_leakage(plan, sorted(bags_by_id))
        plans[model.model_id] = plan
        if classify:
            class_names[model.model_id] = manifest.class_names
        grid = spec.grid
        if grid is None:
            grid = abmil_mod.default_grid(
                "classification" if classify else "regression",
                manifest.n_classes if classify else None)

        def evaluate(assignment, model=model, bags_by_id=bags_by_id, grid=grid,
                     classify=classify):
            test_ids = sorted(assignment.test)
            train_ids = sorted(set(bags_by_id) - set(test_ids))
            grid_seed = derive_seed(assignment.seed, "slide", assignment.outer_fold)
            try:
                selection = abmil_mod.grid_select(bags_by_id, assignment.inner,
                                                  grid, grid_seed)
                trained = abmil_mod.retrain_full(
                    [bags_by_id[b][0] for b in train_ids],
                    [bags_by_id[b][1] for b in train_ids],
                    selection.config, selection.epoch_budget,
                    derive_seed(assignment.seed, "retrain", assignment.outer_fold))
            except DegenerateFoldError as exc:
                return [], SkipEvent(model.model_id, assignment.seed,
                                     assignment.outer_fold, "select", str(exc))
            except DivergenceError as exc:
                return [], SkipEvent(model.model_id, assignment.seed,
                                     assignment.outer_fold, "retrain", str(exc))
            out_rows = []
            for bag_id in test_ids:
                pred = abmil_mod.predict(trained, bags_by_id[bag_id][0])
                truth = bags_by_id[bag_id][1]
                out_rows.append(LedgerRow(model.model_id, bag_id, assignment.seed,
                                          assignment.outer_fold, pred,
                                          int(truth) if classify else float(truth)))
            return out_rows, None

        results = _run_units(plan.assignments, evaluate, spec.jobs)
        for out_rows, skip in results:
            rows.extend(out_rows)
            if skip is not None:
                skips.append(skip)

    return RunResult(task_kind=spec.task_kind, rows=_sorted_rows(rows), plans=plans,
                     skips=sorted(skips, key=lambda s: (s.model_id, s.seed, s.fold)),
                     class_names=class_names)


# ---------------------------------------------------------------------------
# metric adapters and model comparison


def metric_fn(name: str, n_classes: int | None = None, pcc_mode: str = "per_target"):
    """Adapter from a metric name to a callable(pred_array, truth_array)."""
    if name == "mcc":
        if n_classes is None:
            raise ArgumentError("mcc needs the class count")

        def fn(pred, truth):
            return mcc(confusion_matrix(np.rint(truth).astype(np.int64),
                                         np.rint(pred).astype(np.int64), n_classes))
        return fn
    if name == "pcc":
        def fn(pred, truth):
            p = pred.reshape(pred.shape[0], -1)
            t = truth.reshape(truth.shape[0], -1)
            return pearson_multi(p, t, mode=pcc_mode)
        return fn
    if name == "r2":
        return lambda pred, truth: r2(pred, truth)
    raise ArgumentError(f"unknown metric {name!r}")


def default_metric(task_kind: str) -> str:
    return {"tile-class": "mcc", "slide-class": "mcc",
            "tile-reg": "pcc", "slide-reg": "r2"}[task_kind]


def collect_predictions(rows: list[LedgerRow]):
    """Group ledger rows into per-sample prediction sets, sorted by unit id."""
    by_unit: dict[str, list[LedgerRow]] = {}
    for row in rows:
        by_unit.setdefault(row.unit_id, []).append(row)
    unit_ids = sorted(by_unit)
    pred_sets, truths = [], []
    for unit in unit_ids:
        entries = sorted(by_unit[unit], key=lambda r: r.seed)
        pred_sets.append([e.pred for e in entries])
        truths.append(entries[0].truth)
    return unit_ids, pred_sets, truths


@dataclass
class ComparisonResult:
    report: SignificanceReport
    distributions: list[BootstrapDistribution]
    unit_ids: list[str]


def compare_models(result: RunResult, metric: str | None = None,
                   B: int = 1000, seed: int = 0, alpha: float = 0.05,
                   pcc_mode: str = "per_target") -> ComparisonResult:
    """Paired bootstrap over the pooled cross-seed ledger, then the Friedman
    -> Wilcoxon -> Holm -> CLD stack. All models share one resample table."""
    model_ids = sorted({r.model_id for r in result.rows})
    if len(model_ids) < 2:
        raise ArgumentError("need at least 2 models to compare")
    metric = metric or default_metric(result.task_kind)

    per_model = {}
    common: set[str] | None = None
    for model_id in model_ids:
        unit_ids, pred_sets, truths = collect_predictions(result.rows_for(model_id))
        per_model[model_id] = dict(zip(unit_ids, zip(pred_sets, truths)))
        common = set(unit_ids) if common is None else common & set(unit_ids)
    unit_ids = sorted(common)
    if len(unit_ids) < 2:
        raise ArgumentError("fewer than 2 samples shared by all models")

    n_classes = None
    if metric == "mcc":
        any_names = result.class_names.get(model_ids[0])
        n_classes = len(any_names) if any_names else (
            int(max(max(np.rint(float(r.truth)) for r in result.rows),
                    max(np.rint(float(r.pred)) for r in result.rows))) + 1)
    fn = metric_fn(metric, n_classes=n_classes, pcc_mode=pcc_mode)

    table = paired_resample_table(len(unit_ids), B, seed)
    dists = []
    for model_id in model_ids:
        entry = per_model[model_id]
        pred_sets = [list(entry[u][0]) for u in unit_ids]
        truths = [entry[u][1] for u in unit_ids]
        dists.append(bootstrap(pred_sets, truths, fn, B=B, table=table,
                               model_id=model_id))
    report = significance_report(dists, alpha=alpha)
    letters = [report.cld[m] for m in report.models]
    check_cld_laws(report.adj_p, report.alpha, letters)
    return ComparisonResult(report=report, distributions=dists, unit_ids=unit_ids)


# ---------------------------------------------------------------------------
# copy detection


def cosine_similarity(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    def normalize(matrix):
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        return matrix / np.where(norms > 0, norms, 1.0)
    return normalize(queries) @ normalize(gallery).T


def run_copy_detection(original: EmbeddingTable,
                       augmented: dict[str, EmbeddingTable],
                       k: int = 1) -> dict[str, float]:
    """Top-k cosine retrieval accuracy per augmentation family; augmented row
    i must correspond to original row i."""
    accuracies = {}
    for family in sorted(augmented):
        table = augmented[family]
        if table.n_rows != original.n_rows:
            raise AlignmentError(
                f"family {family}: {table.n_rows} augmented rows vs "
                f"{original.n_rows} originals")
        sim = cosine_similarity(table.data, original.data)
        accuracies[family] = topk_accuracy(sim, np.arange(original.n_rows), k)
    return accuracies


# ---------------------------------------------------------------------------
# ledger and report files


def _format_value(value, names: list[str] | None) -> str:
    if isinstance(value, (int, np.integer)) and names is not None:
        return names[int(value)]
    if isinstance(value, np.ndarray):
        return ";".join(repr(float(v)) for v in value)
    return repr(float(value))


def write_predictions_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "sample_or_bag_id", "seed", "fold",
                         "prediction", "truth"])
        for row in _sorted_rows(result.rows):
            names = result.class_names.get(row.model_id)
            writer.writerow([row.model_id, row.unit_id, row.seed, row.fold,
                             _format_value(row.pred, names),
                             _format_value(row.truth, names)])


def write_skips_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "seed", "fold", "stage", "reason"])
        for s in result.skips:
            writer.writerow([s.model_id, s.seed, s.fold, s.stage, s.reason])


def read_predictions_csv(path, classification: bool) -> RunResult:
    """Load a ledger back; classification label strings are re-indexed
    lexicographically, mirroring manifest loading."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["model_id", "sample_or_bag_id", "seed", "fold", "prediction", "truth"]
        if header != expected:
            raise ArgumentError(f"{path}: ledger header must be {','.join(expected)}")
        raw = [row for row in reader if row]

    rows: list[LedgerRow] = []
    class_names: dict[str, list[str]] = {}
    if classification:
        names = sorted({r[5] for r in raw} | {r[4] for r in raw})
        index = {n: i for i, n in enumerate(names)}
        for model_id, unit, seed, fold, pred, truth in raw:
            rows.append(LedgerRow(model_id, unit, int(seed), int(fold),
                                  index[pred], index[truth]))
        class_names = {m: names for m in {r[0] for r in raw}}
        kind = "tile-class"
    else:
        def parse(cell: str):
            if ";" in cell:
                return np.array([float(v) for v in cell.split(";")])
            return float(cell)
        for model_id, unit, seed, fold, pred, truth in raw:
            rows.append(LedgerRow(model_id, unit, int(seed), int(fold),
                                  parse(pred), parse(truth)))
        kind = "tile-reg"
    return RunResult(task_kind=kind, rows=_sorted_rows(rows), plans={},
                     skips=[], class_names=class_names)


def write_copydetect_csv(path, per_model: dict[str, dict[str, float]]) -> None:
    """Copy-detection table: model,family,top1."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "family", "top1"])
        for model_id in sorted(per_model):
            for family in sorted(per_model[model_id]):
                writer.writerow([model_id, family, repr(per_model[model_id][family])])
