"""On-disk and in-memory data model: embedding tables, sample manifests, bags.

File formats
------------
EMB1 binary embeddings: magic ``EMB1``, u32 LE version (=1), u64 LE n_rows,
u32 LE dim, then n_rows*dim IEEE-754 binary32 LE values, row-major, no padding.

Manifest CSV (UTF-8), header exactly ``sample_id,row_index,group_id,bag_id,label``;
``bag_id`` may be empty for tile tasks. Labels are strings for classification
tasks and decimal reals for regression tasks; the task config declares which.

Spot table CSV: ``spot_id,area,p0,...,p15``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArgumentError,
    DuplicateError,
    EmptyOverlapError,
    FormatError,
    LabelConflictError,
    LabelKindError,
    RangeError,
    TruncationError,
)

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
N_CELL_TYPES = 16


@dataclass(frozen=True)
class EmbeddingTable:
    """Dense row-major matrix of frozen feature vectors, one row per sample."""

    data: np.ndarray  # (n_rows, dim), finite

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"embedding table must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"embedding table must be at least 1x1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("embedding table contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_embeddings(path, data: np.ndarray) -> None:
    """Write a matrix as an EMB1 file (values stored as float32)."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<IQI", EMB1_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def load_embeddings(path) -> EmbeddingTable:
    """Read an EMB1 file, validating magic, version, size, and finiteness."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMB1_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB1_MAGIC!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise TruncationError(f"{path}: incomplete header")
        version, n_rows, dim = struct.unpack("<IQI", header)
        if version != EMB1_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n_rows < 1 or dim < 1:
            raise FormatError(f"{path}: degenerate shape {n_rows}x{dim}")
        payload = fh.read(4 * n_rows * dim + 1)
    if len(payload) < 4 * n_rows * dim:
        raise TruncationError(
            f"{path}: header declares {n_rows}x{dim} but payload holds "
            f"{len(payload) // 4} values"
        )
    if len(payload) > 4 * n_rows * dim:
        raise TruncationError(f"{path}: trailing bytes after declared payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: embeddings contain NaN/Inf")
    return EmbeddingTable(data=data)


@dataclass(frozen=True)
class Label:
    """Either a dense class index (classification) or a real target (regression).

    Regression targets are a single real, or a tuple of reals for
    multi-target tasks (manifest cell holds ';'-joined decimals).
    """

    class_index: int | None = None
    value: float | tuple[float, ...] | None = None

    @property
    def is_class(self) -> bool:
        return self.class_index is not None


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    row_index: int
    group_id: str
    bag_id: str | None
    label: Label


@dataclass(frozen=True)
class SampleManifest:
    """Per-row metadata paired with an EmbeddingTable.

    For classification tasks, label strings are re-indexed to a dense
    [0, C) map in lexicographic order of the distinct strings, so class
    indices depend only on the label-string set, never on file row order.
    """

    entries: list[ManifestEntry]
    task: str  # "classification" | "regression"
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labels_array(self) -> np.ndarray:
        """Labels ordered by row_index: int class indices, float values, or an
        (n, T) matrix for multi-target regression."""
        order = sorted(self.entries, key=lambda e: e.row_index)
        if self.task == "classification":
            return np.array([e.label.class_index for e in order], dtype=np.int64)
        return np.array([e.label.value for e in order], dtype=np.float64)

    @property
    def n_targets(self) -> int:
        if self.task == "classification":
            raise LabelKindError("classification manifests have no regression targets")
        first = self.entries[0].label.value
        return len(first) if isinstance(first, tuple) else 1


MANIFEST_HEADER = ["sample_id", "row_index", "group_id", "bag_id", "label"]


def load_manifest(path, table: EmbeddingTable, task: str = "classification") -> SampleManifest:
    """Read and validate a manifest CSV against its embedding table."""
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task kind {task!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        raw = [row for row in reader if row]
    seen_rows: set[int] = set()
    parsed: list[tuple[str, int, str, str | None, str]] = []
    for lineno, row in enumerate(raw, start=2):
        if len(row) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        sample_id, row_index_s, group_id, bag_id, label_s = row
        row_index = int(row_index_s)
        if row_index in seen_rows:
            raise DuplicateError(f"{path}:{lineno}: duplicate row_index {row_index}")
        seen_rows.add(row_index)
        if not 0 <= row_index < table.n_rows:
            raise RangeError(
                f"{path}:{lineno}: row_index {row_index} outside [0, {table.n_rows})"
            )
        parsed.append((sample_id, row_index, group_id, bag_id or None, label_s))
    if len(seen_rows) != table.n_rows:
        raise RangeError(
            f"{path}: manifest covers {len(seen_rows)} rows, table has {table.n_rows}"
        )

    entries: list[ManifestEntry] = []
    class_names: list[str] = []
    if task == "classification":
        class_names = sorted({label_s for *_, label_s in parsed})
        if len(class_names) < 2:
            raise LabelKindError(f"{path}: classification task needs >= 2 distinct labels")
        index_of = {name: i for i, name in enumerate(class_names)}
        for sample_id, row_index, group_id, bag_id, label_s in parsed:
            entries.append(
                ManifestEntry(sample_id, row_index, group_id, bag_id,
                              Label(class_index=index_of[label_s]))
            )
    else:
        widths = set()
        for sample_id, row_index, group_id, bag_id, label_s in parsed:
            try:
                if ";" in label_s:
                    value: float | tuple = tuple(float(v) for v in label_s.split(";"))
                    widths.add(len(value))
                else:
                    value = float(label_s)
                    widths.add(1)
            except ValueError as exc:
                raise LabelKindError(
                    f"{path}: regression label {label_s!r} is not a decimal real"
                ) from exc
            entries.append(ManifestEntry(sample_id, row_index, group_id, bag_id,
                                         Label(value=value)))
        if len(widths) > 1:
            raise LabelKindError(f"{path}: regression targets differ in width {sorted(widths)}")
    return SampleManifest(entries=entries, task=task, class_names=class_names)


@dataclass(frozen=True)
class Bag:
    bag_id: str
    label: Label
    group_id: str
    member_rows: list[int]  # ascending row_index order


@dataclass(frozen=True)
class BagSet:
    bags: list[Bag]

    def __len__(self) -> int:
        return len(self.bags)


def assemble_bags(manifest: SampleManifest) -> BagSet:
    """Group manifest entries into one bag per distinct bag_id.

    Members are sorted ascending by row_index so bag matrices are always
    assembled in a canonical order.
    """
    by_bag: dict[str, list[ManifestEntry]] = {}
    for entry in manifest.entries:
        if entry.bag_id is None:
            raise ArgumentError(f"sample {entry.sample_id} has no bag_id")
        by_bag.setdefault(entry.bag_id, []).append(entry)
    bags: list[Bag] = []
    for bag_id in sorted(by_bag):
        members = sorted(by_bag[bag_id], key=lambda e: e.row_index)
        labels = {(e.label.class_index, e.label.value) for e in members}
        if len(labels) != 1:
            raise LabelConflictError(f"bag {bag_id} carries conflicting labels")
        groups = {e.group_id for e in members}
        if len(groups) != 1:
            raise LabelConflictError(f"bag {bag_id} spans multiple groups {sorted(groups)}")
        bags.append(Bag(bag_id=bag_id, label=members[0].label,
                        group_id=members[0].group_id,
                        member_rows=[e.row_index for e in members]))
    return BagSet(bags=bags)


@dataclass(frozen=True)
class SpotVector:
    """One deconvolved spot: 16 cell-type proportions plus a tubule overlap area."""

    spot_id: str
    proportions: np.ndarray  # (16,), nonnegative, sums to 1 within 1e-6
    overlap_area: float

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=np.float64)
        if p.shape != (N_CELL_TYPES,):
            raise ValueError(f"spot {self.spot_id}: expected {N_CELL_TYPES} proportions")
        if np.any(p < 0):
            raise ValueError(f"spot {self.spot_id}: negative proportion")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError(f"spot {self.spot_id}: proportions sum to {p.sum():.8f}")
        if self.overlap_area < 0:
            raise ValueError(f"spot {self.spot_id}: negative overlap area")
        object.__setattr__(self, "proportions", p)


def aggregate_spot_vectors(spots: list[SpotVector]) -> np.ndarray:
    """Area-weighted average of spot proportion vectors.

    Weights are overlap areas normalized over the spots with positive area,
    so the output is a convex combination of the inputs and is invariant to
    uniform scaling of all areas.
    """
    if not spots:
        raise EmptyOverlapError("no spots supplied")
    areas = np.array([s.overlap_area for s in spots], dtype=np.float64)
    total = float(areas.sum())
    if total <= 0.0:
        raise EmptyOverlapError("all overlap areas are zero")
    weights = areas / total
    out = np.zeros(N_CELL_TYPES, dtype=np.float64)
    for w, spot in zip(weights, spots):
        out += w * spot.proportions
    return out


def load_spot_table(path) -> list[SpotVector]:
    """Read a spot CSV: ``spot_id,area,p0,...,p15``."""
    expected = ["spot_id", "area"] + [f"p{i}" for i in range(N_CELL_TYPES)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise FormatError(f"{path}: spot table header must be {','.join(expected)}")
        spots = []
        for row in reader:
            if not row:
                continue
            spots.append(SpotVector(
                spot_id=row[0],
                proportions=np.array([float(v) for v in row[2:]], dtype=np.float64),
                overlap_area=float(row[1]),
            ))
    return spots


def majority_reference_call(aggregate: np.ndarray, reference_idx: list[int],
                            altered_idx: list[int], cutoff: float = 0.5) -> bool:
    """True when reference-state mass strictly exceeds `cutoff` of the
    reference+altered mass. Index lists are caller policy; the default cutoff
    is a strict majority."""
    ref = float(aggregate[reference_idx].sum())
    alt = float(aggregate[altered_idx].sum())
    denom = ref + alt
    if denom <= 0.0:
        return False
    return ref / denom > cutoff
