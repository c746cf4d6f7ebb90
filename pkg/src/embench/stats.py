"""Bootstrap uncertainty and the post-hoc comparison stack.

The pipeline: one shared resample-index table per task pairs the bootstrap
replicates across models; the Friedman test gates the family of pairwise
Wilcoxon signed-rank tests; Holm-Bonferroni controls the family-wise error
rate; a compact letter display (CLD) encodes "not significantly different"
as shared letters.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm, rankdata

from .errors import ArgumentError, UndefinedError
from .rng import stream

DEFAULT_B = 1000
DEFAULT_ALPHA = 0.05
# Exact Wilcoxon enumeration above this many nonzero differences would be
# pointless; the normal approximation takes over.
WILCOXON_EXACT_MAX = 25


def paired_resample_table(n: int, B: int, seed: int) -> np.ndarray:
    """B x n table of resample indices, generated once per task.

    Every model evaluated on the task must consume this exact table; that is
    what makes the replicate-wise differences valid paired observations.
    """
    if n < 1:
        raise ArgumentError(f"need at least 1 sample, got {n}")
    if B < 1:
        raise ArgumentError(f"need at least 1 replicate, got {B}")
    rng = stream(seed, "bootstrap")
    return rng.integers(0, n, size=(B, n), dtype=np.int64)


def table_fingerprint(table: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(table, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass
class BootstrapDistribution:
    model_id: str
    values: np.ndarray           # (B,) metric per replicate, NaN where degenerate
    table_id: str                # fingerprint of the shared resample table
    n_degenerate: int = 0

    @property
    def B(self) -> int:
        return int(self.values.size)

    def defined(self) -> np.ndarray:
        return self.values[np.isfinite(self.values)]

    def summary(self) -> dict:
        vals = self.defined()
        if vals.size == 0:
            raise UndefinedError(f"{self.model_id}: every replicate was degenerate")
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        return {
            "min": float(vals.min()),
            "q1": float(q1),
            "median": float(med),
            "mean": float(vals.mean()),
            "q3": float(q3),
            "max": float(vals.max()),
        }


def bootstrap(pred_sets, truths, metric, B: int = DEFAULT_B, seed: int = 0,
              table: np.ndarray | None = None, model_id: str = "model") -> BootstrapDistribution:
    """Bootstrap a metric over per-sample prediction sets.

    ``pred_sets[i]`` holds the 1..S seed-predictions of sample i and
    ``truths[i]`` its truth (scalar or target vector). Replicate b draws
    samples with replacement via the shared index table; a drawn sample
    contributes all of its seed-predictions, repeated once per draw.
    Replicates on which the metric is genuinely undefined are flagged NaN
    and excluded from summaries.
    """
    n = len(pred_sets)
    if n != len(truths):
        raise ArgumentError("pred_sets and truths must have the same length")
    if n < 2:
        raise ArgumentError("bootstrap needs at least 2 samples")
    if table is None:
        table = paired_resample_table(n, B, seed)
    if table.shape[1] != n:
        raise ArgumentError(f"resample table built for n={table.shape[1]}, data has n={n}")

    # Flatten (sample, seed-prediction) into parallel arrays.
    pred_rows, truth_rows, owner = [], [], []
    for i, preds in enumerate(pred_sets):
        if len(preds) == 0:
            raise ArgumentError(f"sample {i} has no predictions")
        for p in preds:
            pred_rows.append(np.asarray(p, dtype=np.float64))
            truth_rows.append(np.asarray(truths[i], dtype=np.float64))
            owner.append(i)
    pred_flat = np.stack(pred_rows)
    truth_flat = np.stack(truth_rows)
    owner = np.asarray(owner, dtype=np.int64)
    flat_ids = np.arange(pred_flat.shape[0])

    values = np.empty(table.shape[0], dtype=np.float64)
    n_degenerate = 0
    for b in range(table.shape[0]):
        mult = np.bincount(table[b], minlength=n)
        take = np.repeat(flat_ids, mult[owner])
        try:
            values[b] = float(metric(pred_flat[take], truth_flat[take]))
        except UndefinedError:
            values[b] = np.nan
            n_degenerate += 1
    return BootstrapDistribution(model_id=model_id, values=values,
                                 table_id=table_fingerprint(table),
                                 n_degenerate=n_degenerate)


def friedman(values: np.ndarray) -> tuple[float, float]:
    """Friedman chi-square over an N x k matrix (rows paired, columns models).

    Within-row ranks average ties; the statistic uses the rank-sum form with
    the standard tie-correction divisor, and the p-value comes from the
    chi-square distribution with k-1 degrees of freedom. Rows identical
    across all columns carry no information; if nothing else remains the
    result is (0.0, 1.0).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ArgumentError(f"expected N x k matrix, got shape {values.shape}")
    n_rows, k = values.shape
    if n_rows < 2 or k < 2:
        raise ArgumentError(f"need N >= 2 and k >= 2, got {values.shape}")

    ranks = rankdata(values, axis=1, method="average")
    rank_sums = ranks.sum(axis=0)
    raw = 12.0 / (n_rows * k * (k + 1)) * float(rank_sums @ rank_sums) - 3.0 * n_rows * (k + 1)

    tie_mass = 0.0
    for row in values:
        _, counts = np.unique(row, return_counts=True)
        tie_mass += float(np.sum(counts.astype(np.float64) ** 3 - counts))
    divisor = 1.0 - tie_mass / (n_rows * k * (k * k - 1))
    if divisor <= 0.0:
        return 0.0, 1.0
    stat = max(raw, 0.0) / divisor
    p = float(chi2.sf(stat, k - 1))
    return float(stat), p


def _signed_rank_parts(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("x and y must be 1-D vectors of equal length")
    if x.size < 1:
        raise ArgumentError("need at least one pair")
    d = x - y
    d = d[d != 0.0]  # zero differences discarded (classic Wilcoxon convention)
    return d


def wilcoxon_signed_rank(x, y) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired vectors.

    Returns (W, p) with W = W+ - W- (the signed rank-sum difference). Zero
    differences are discarded; |d| ranks average ties. The p-value is exact
    (full sign-assignment distribution) for up to 25 nonzero differences and
    uses the tie-corrected normal approximation with a 0.5 continuity
    correction beyond that. All differences zero gives (0.0, 1.0).
    """
    d = _signed_rank_parts(x, y)
    m = d.size
    if m == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w_signed = w_plus - w_minus

    if m <= WILCOXON_EXACT_MAX:
        return w_signed, _exact_sign_p(ranks, w_plus)

    mean = m * (m + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts)) / 48.0
    var = m * (m + 1) * (2 * m + 1) / 24.0 - tie_term
    if var <= 0.0:
        return w_signed, 1.0
    num = w_plus - mean
    if abs(num) > 0.5:
        num -= 0.5 * math.copysign(1.0, num)  # continuity correction toward the mean
    else:
        num = 0.0
    p = 2.0 * float(norm.sf(abs(num) / math.sqrt(var)))
    return w_signed, min(1.0, p)


def _exact_sign_p(ranks: np.ndarray, w_plus: float) -> float:
    """Exact two-sided p over all 2^m sign assignments.

    Average ranks are half-integers, so doubling makes them integers and the
    W+ distribution is tabulated by integer convolution: identical to literal
    enumeration, without the 2^m loop. The distribution is symmetric about
    S/2, so the two-sided p counts assignments at least as far from S/2 as
    the observed W+.
    """
    scaled = np.rint(ranks * 2).astype(np.int64)
    total = int(scaled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    upper = 0
    for r in scaled:
        r = int(r)
        upper += r
        # RHS materializes before assignment; slices overlap otherwise
        counts[r:upper + 1] = counts[r:upper + 1] + counts[0:upper + 1 - r]
    obs = int(round(2 * w_plus))  # scaled W+, exact for half-integer ranks
    margin = abs(2 * obs - total)  # distance from center, doubled to stay integral
    sums = np.arange(total + 1, dtype=np.int64)
    extreme = np.abs(2 * sums - total) >= margin
    return float(counts[extreme].sum() / counts.sum())


def holm_bonferroni(p_values) -> np.ndarray:
    """Step-down Holm adjustment, returned in the original order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise ArgumentError("expected a flat vector of p-values")
    if np.any((p < 0) | (p > 1)):
        raise ArgumentError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m, dtype=np.float64)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, (m - i) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


def _letter_symbols():
    alphabet = "abcdefghijklmnopqrstuvwxyz"
    for ch in alphabet:
        yield ch
    for ch1 in alphabet:
        for ch2 in alphabet:
            yield ch1 + ch2


def compact_letter_display(adj_p: np.ndarray, alpha: float, ranking: list[int]) -> list[str]:
    """Insert-and-absorb letter assignment.

    ``adj_p`` is the symmetric adjusted p-value matrix over k models;
    ``ranking`` lists model indices best-first. Models sharing a letter are
    not significantly different at ``alpha``; every non-significant pair
    shares at least one letter. Returns one letter string per model, indexed
    like ``adj_p``.
    """
    adj_p = np.asarray(adj_p, dtype=np.float64)
    k = adj_p.shape[0]
    if adj_p.shape != (k, k):
        raise ArgumentError(f"adjusted p matrix must be square, got {adj_p.shape}")
    if sorted(ranking) != list(range(k)):
        raise ArgumentError("ranking must be a permutation of the model indices")
    rank_pos = {model: pos for pos, model in enumerate(ranking)}

    significant = []
    for a in range(k):
        for b in range(a + 1, k):
            if adj_p[a, b] < alpha:
                significant.append((a, b))
    significant.sort(key=lambda pair: (rank_pos[pair[0]], rank_pos[pair[1]]))

    columns: list[frozenset] = [frozenset(range(k))]
    for a, b in significant:
        split: list[frozenset] = []
        for col in columns:
            if a in col and b in col:
                split.append(col - {a})
                split.append(col - {b})
            else:
                split.append(col)
        # absorb: drop duplicates and any column contained in another
        split = sorted(set(split), key=len, reverse=True)
        kept: list[frozenset] = []
        for col in split:
            if not any(col < other or col == other for other in kept):
                kept.append(col)
        columns = kept

    columns.sort(key=lambda col: tuple(sorted(rank_pos[m] for m in col)))
    letters = ["" for _ in range(k)]
    for symbol, col in zip(_letter_symbols(), columns):
        for model in col:
            letters[model] += symbol
    return letters


@dataclass
class SignificanceReport:
    """Friedman gate, Holm-adjusted pairwise matrix, and CLD over models."""

    models: list[str]
    friedman_stat: float
    friedman_p: float
    raw_p: np.ndarray
    adj_p: np.ndarray
    alpha: float
    cld: dict[str, str]
    ranking: list[str]                      # model ids sorted by median, descending
    summaries: dict[str, dict] = field(default_factory=dict)
    pairwise_performed: bool = True


def significance_report(dists: list[BootstrapDistribution],
                        alpha: float = DEFAULT_ALPHA) -> SignificanceReport:
    """Run Friedman -> pairwise Wilcoxon -> Holm -> CLD over paired bootstraps."""
    if len(dists) < 2:
        raise ArgumentError("need at least 2 models to compare")
    table_ids = {d.table_id for d in dists}
    if len(table_ids) != 1:
        raise ArgumentError("bootstrap distributions are not paired (table ids differ)")
    k = len(dists)
    matrix = np.stack([d.values for d in dists], axis=1)  # B x k
    defined_rows = np.all(np.isfinite(matrix), axis=1)
    matrix = matrix[defined_rows]
    if matrix.shape[0] < 2:
        raise ArgumentError("fewer than 2 jointly defined replicates")

    models = [d.model_id for d in dists]
    summaries = {d.model_id: d.summary() for d in dists}
    medians = [summaries[m]["median"] for m in models]
    order = sorted(range(k), key=lambda i: (-medians[i], i))
    ranking = [models[i] for i in order]

    stat, p = friedman(matrix)
    raw_p = np.ones((k, k), dtype=np.float64)
    adj_p = np.ones((k, k), dtype=np.float64)
    pairwise = bool(p < alpha)
    if pairwise:
        pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        raw_list = []
        for a, b in pairs:
            _, pw = wilcoxon_signed_rank(matrix[:, a], matrix[:, b])
            raw_list.append(pw)
        adj_list = holm_bonferroni(np.array(raw_list))
        for (a, b), raw_v, adj_v in zip(pairs, raw_list, adj_list):
            raw_p[a, b] = raw_p[b, a] = raw_v
            adj_p[a, b] = adj_p[b, a] = adj_v
    letters = compact_letter_display(adj_p, alpha, order)
    cld = {models[i]: letters[i] for i in range(k)}
    return SignificanceReport(models=models, friedman_stat=stat, friedman_p=p,
                              raw_p=raw_p, adj_p=adj_p, alpha=alpha, cld=cld,
                              ranking=ranking, summaries=summaries,
                              pairwise_performed=pairwise)


def check_cld_laws(adj_p: np.ndarray, alpha: float, letters: list[str]) -> None:
    """Raise if the two CLD coverage laws fail (used as a defense-in-depth
    audit on every emitted report)."""
    k = len(letters)
    for a in range(k):
        for b in range(a + 1, k):
            shared = set(letters[a]) & set(letters[b])
            if adj_p[a, b] < alpha and shared:
                raise AssertionError(f"significant pair ({a},{b}) shares letters {shared}")
            if adj_p[a, b] >= alpha and not shared:
                raise AssertionError(f"non-significant pair ({a},{b}) shares no letter")


# ---------------------------------------------------------------------------
# report files


def write_bootstrap_csv(path, dists: list[BootstrapDistribution]) -> None:
    """`bootstrap.csv`: model,replicate,value (NaN marks degenerate replicates)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "replicate", "value"])
        for dist in dists:
            for b, value in enumerate(dist.values):
                writer.writerow([dist.model_id, b, repr(float(value))])


def write_pvalues_json(path, report: SignificanceReport) -> None:
    payload = {
        "models": report.models,
        "alpha": report.alpha,
        "friedman": {"stat": report.friedman_stat, "p": report.friedman_p},
        "pairwise_performed": report.pairwise_performed,
        "raw_p": report.raw_p.tolist(),
        "adj_p": report.adj_p.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_cld_csv(path, report: SignificanceReport) -> None:
    """`cld.csv`: cld,model,min,q1,median,mean,q3,max sorted by median descending."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cld", "model", "min", "q1", "median", "mean", "q3", "max"])
        for model in report.ranking:
            s = report.summaries[model]
            writer.writerow([report.cld[model], model] +
                            [repr(s[key]) for key in ("min", "q1", "median", "mean", "q3", "max")])
