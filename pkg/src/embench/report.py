"""Report emission: violin/heatmap data files plus rendered figures.

``violin.csv`` and ``pvalue_heatmap.json`` carry the plot-ready data for
external tooling; the same inputs are also rendered to PNG (bootstrap violin
plot with CLD letters, Holm-adjusted p-value heatmap) so a run directory is
self-contained.
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import ArgumentError, FormatError


def load_bootstrap_csv(path) -> dict[str, np.ndarray]:
    """Read model,replicate,value back into per-model value arrays."""
    values: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["model", "replicate", "value"]:
            raise FormatError(f"{path}: expected header model,replicate,value")
        for model, replicate, value in reader:
            values.setdefault(model, []).append((int(replicate), float(value)))
    out = {}
    for model, pairs in values.items():
        pairs.sort()
        out[model] = np.array([v for _, v in pairs], dtype=np.float64)
    return out


def load_pvalues_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("models", "alpha", "adj_p", "raw_p", "friedman"):
        if key not in payload:
            raise FormatError(f"{path}: missing key {key!r}")
    return payload


def load_cld_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"cld", "model", "min", "q1", "median", "mean", "q3", "max"}
        if set(reader.fieldnames or []) != expected:
            raise FormatError(f"{path}: unexpected cld.csv header")
        for row in reader:
            rows.append(row)
    return rows


def write_violin_csv(path, values: dict[str, np.ndarray]) -> None:
    """`violin.csv`: model,replicate,value for external violin plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "replicate", "value"])
        for model in sorted(values):
            for b, v in enumerate(values[model]):
                writer.writerow([model, b, repr(float(v))])


def write_pvalue_heatmap_json(path, pvalues: dict, ranking: list[str]) -> None:
    """Adjusted p-value matrix reordered by ranking, ready for heatmap tools."""
    models = pvalues["models"]
    index = {m: i for i, m in enumerate(models)}
    missing = [m for m in ranking if m not in index]
    if missing:
        raise ArgumentError(f"ranking references unknown models {missing}")
    adj = np.asarray(pvalues["adj_p"], dtype=np.float64)
    reordered = adj[np.ix_([index[m] for m in ranking], [index[m] for m in ranking])]
    payload = {
        "models": ranking,
        "alpha": pvalues["alpha"],
        "adj_p": reordered.tolist(),
        "friedman": pvalues["friedman"],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_figures(out_dir, values: dict[str, np.ndarray], pvalues: dict,
                   cld_rows: list[dict]) -> list[str]:
    """Render violin.png and pvalue_heatmap.png; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ranking = [row["model"] for row in cld_rows]
    letters = {row["model"]: row["cld"] for row in cld_rows}
    data = [values[m][np.isfinite(values[m])] for m in ranking]

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(ranking)), 4.5))
    parts = ax.violinplot(data, showmedians=True)
    for body in parts["bodies"]:
        body.set_alpha(0.6)
    ax.set_xticks(range(1, len(ranking) + 1))
    ax.set_xticklabels(ranking, rotation=30, ha="right")
    ax.set_ylabel("bootstrap metric")
    span = max(float(np.max(d)) for d in data) - min(float(np.min(d)) for d in data)
    pad = 0.05 * (span if span > 0 else 1.0)
    for i, model in enumerate(ranking, start=1):
        top = float(np.max(values[model][np.isfinite(values[model])]))
        ax.text(i, top + pad, letters[model], ha="center", va="bottom", fontsize=11)
    ax.margins(y=0.15)
    fig.tight_layout()
    violin_path = os.path.join(out_dir, "violin.png")
    fig.savefig(violin_path, dpi=150)
    plt.close(fig)

    models = pvalues["models"]
    index = {m: i for i, m in enumerate(models)}
    adj = np.asarray(pvalues["adj_p"], dtype=np.float64)
    order = [index[m] for m in ranking]
    matrix = adj[np.ix_(order, order)]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(ranking)), max(4, 0.8 * len(ranking))))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(ranking)))
    ax.set_yticks(range(len(ranking)))
    ax.set_xticklabels(ranking, rotation=45, ha="right")
    ax.set_yticklabels(ranking)
    for i in range(len(ranking)):
        for j in range(len(ranking)):
            shade = "white" if matrix[i, j] < 0.5 else "black"
            ax.text(j, i, f"{matrix[i, j]:.3f}", ha="center", va="center",
                    color=shade, fontsize=8)
    fig.colorbar(im, ax=ax, label="Holm-adjusted p")
    fig.tight_layout()
    heatmap_path = os.path.join(out_dir, "pvalue_heatmap.png")
    fig.savefig(heatmap_path, dpi=150)
    plt.close(fig)
    return [violin_path, heatmap_path]
