"""Deterministic train/validation/test partitions.

Three splitters cover every protocol in the harness: stratified group K-fold
(tile classification), plain group K-fold (tile regression), and a nested
plan with a stratified/plain inner loop (slide tasks). Units are group ids
for tile tasks and bag ids for slide tasks; a unit never straddles a split.

All splitters canonicalize their input by sorting unit ids before the seeded
shuffle, so fold contents depend only on the unit multiset, k, and seed --
never on input order or execution schedule.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataspec import BagSet
from .errors import ArgumentError, InfeasibleError
from .rng import stream

DEFAULT_SEEDS = [0, 1, 2]
DEFAULT_OUTER_K = 5
DEFAULT_INNER_K = 4


def stratified_group_kfold(units: list[tuple[str, int]], k: int, seed: int) -> list[list[str]]:
    """Split (unit_id, class_index) pairs into k test folds.

    Greedy balanced assignment: units are seeded-shuffled, then each goes to
    the fold minimizing the cross-fold squared deviation of its class counts
    from the proportional share; for one unit at a time that is the fold with
    the fewest units of its class, tie-broken by smaller fold, then fold
    index. Per fold and class, counts land within +-1 of n_c/k.
    """
    _check_k(k, len(units))
    ids = [u for u, _ in units]
    if len(set(ids)) != len(ids):
        raise ArgumentError("duplicate unit ids")
    classes = {u: c for u, c in units}
    class_set = {c for _, c in units}

    order = sorted(ids)
    rng = stream(seed, "folds")
    rng.shuffle(order)

    counts = [dict.fromkeys(class_set, 0) for _ in range(k)]
    sizes = [0] * k
    folds: list[list[str]] = [[] for _ in range(k)]
    for unit in order:
        c = classes[unit]
        best = min(range(k), key=lambda f: (counts[f][c], sizes[f], f))
        folds[best].append(unit)
        counts[best][c] += 1
        sizes[best] += 1
    return [sorted(f) for f in folds]


def group_kfold(units: list[str], k: int, seed: int) -> list[list[str]]:
    """Split unit ids into k test folds with sizes differing by at most one.

    Which folds receive the remainder units is itself seed-determined.
    """
    _check_k(k, len(units))
    if len(set(units)) != len(units):
        raise ArgumentError("duplicate unit ids")
    order = sorted(units)
    rng = stream(seed, "folds")
    rng.shuffle(order)
    n = len(order)
    base, extra = divmod(n, k)
    sizes = np.full(k, base, dtype=np.int64)
    if extra:
        sizes[rng.permutation(k)[:extra]] += 1
    folds = []
    start = 0
    for size in sizes:
        folds.append(sorted(order[start:start + int(size)]))
        start += int(size)
    return folds


def _check_k(k: int, n_units: int) -> None:
    if k < 2:
        raise ArgumentError(f"k must be >= 2, got {k}")
    if k > n_units:
        raise InfeasibleError(f"k={k} exceeds the {n_units} available units")


@dataclass(frozen=True)
class InnerSplit:
    train: list[str]
    val: list[str]


@dataclass(frozen=True)
class OuterAssignment:
    seed: int
    outer_fold: int
    test: list[str]
    inner: list[InnerSplit] = field(default_factory=list)


@dataclass(frozen=True)
class FoldPlan:
    """Complete deterministic assignment of units to (seed, fold, role)."""

    seeds: list[int]
    outer_k: int
    inner_k: int | None
    assignments: list[OuterAssignment]

    def outer(self, seed: int, fold: int) -> OuterAssignment:
        for a in self.assignments:
            if a.seed == seed and a.outer_fold == fold:
                return a
        raise KeyError((seed, fold))

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "outer_k": self.outer_k,
            "inner_k": self.inner_k,
            "assignments": [
                {
                    "seed": a.seed,
                    "outer_fold": a.outer_fold,
                    "test": a.test,
                    "inner": [{"train": s.train, "val": s.val} for s in a.inner],
                }
                for a in self.assignments
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(payload: dict) -> "FoldPlan":
        assignments = [
            OuterAssignment(
                seed=entry["seed"],
                outer_fold=entry["outer_fold"],
                test=list(entry["test"]),
                inner=[InnerSplit(train=list(s["train"]), val=list(s["val"]))
                       for s in entry.get("inner", [])],
            )
            for entry in payload["assignments"]
        ]
        return FoldPlan(seeds=list(payload["seeds"]), outer_k=payload["outer_k"],
                        inner_k=payload.get("inner_k"), assignments=assignments)


def flat_plan(units: list[tuple[str, int]] | list[str], outer_k: int, seeds: list[int],
              stratified: bool) -> FoldPlan:
    """Repeated (stratified) group K-fold without an inner loop (tile tasks)."""
    assignments = []
    for seed in seeds:
        if stratified:
            folds = stratified_group_kfold(units, outer_k, seed)
        else:
            folds = group_kfold(list(units), outer_k, seed)
        for i, test in enumerate(folds):
            assignments.append(OuterAssignment(seed=seed, outer_fold=i, test=test))
    return FoldPlan(seeds=list(seeds), outer_k=outer_k, inner_k=None,
                    assignments=assignments)


def nested_plan(bags: BagSet, outer_k: int = DEFAULT_OUTER_K,
                inner_k: int = DEFAULT_INNER_K,
                seeds: list[int] | None = None) -> FoldPlan:
    """Repeated nested (stratified) K-fold over bags for slide tasks.

    Classification stratifies both loops on the bag label and requires at
    least ``outer_k`` bags per class; regression uses plain splits. Inner
    folds partition the outer-train bags; inner split j uses fold j as
    validation and the rest as training.
    """
    seeds = DEFAULT_SEEDS if seeds is None else list(seeds)
    if len(bags.bags) < outer_k:
        raise InfeasibleError(f"{len(bags.bags)} bags cannot fill {outer_k} outer folds")
    classify = bags.bags[0].label.is_class if bags.bags else False
    if classify:
        per_class: dict[int, int] = {}
        for bag in bags.bags:
            per_class[bag.label.class_index] = per_class.get(bag.label.class_index, 0) + 1
        for cls, count in sorted(per_class.items()):
            if count < outer_k:
                raise InfeasibleError(
                    f"class {cls} has {count} bags, fewer than outer_k={outer_k}")
        units = [(bag.bag_id, bag.label.class_index) for bag in bags.bags]
    else:
        units = [bag.bag_id for bag in bags.bags]
    label_of = {bag.bag_id: bag.label for bag in bags.bags}

    assignments = []
    for seed in seeds:
        if classify:
            outer_folds = stratified_group_kfold(units, outer_k, seed)
        else:
            outer_folds = group_kfold(list(units), outer_k, seed)
        all_ids = sorted(label_of)
        for i, test in enumerate(outer_folds):
            train_ids = [u for u in all_ids if u not in set(test)]
            if classify:
                inner_units = [(u, label_of[u].class_index) for u in train_ids]
                inner_folds = stratified_group_kfold(
                    inner_units, inner_k, _mix_inner(seed, i))
            else:
                inner_folds = group_kfold(train_ids, inner_k, _mix_inner(seed, i))
            inner = []
            for val in inner_folds:
                val_set = set(val)
                inner.append(InnerSplit(
                    train=[u for u in train_ids if u not in val_set], val=val))
            assignments.append(OuterAssignment(seed=seed, outer_fold=i,
                                               test=test, inner=inner))
    return FoldPlan(seeds=seeds, outer_k=outer_k, inner_k=inner_k,
                    assignments=assignments)


def _mix_inner(seed: int, outer_fold: int) -> int:
    from .rng import derive_seed

    return derive_seed(seed, "inner", outer_fold)


def verify_no_leakage(plan: FoldPlan, all_units: list[str]) -> None:
    """Check the partition laws: per (seed, fold) the test set is disjoint
    from its complement, per seed the test sets tile all units, and inner
    folds partition the outer-train units."""
    universe = set(all_units)
    for seed in plan.seeds:
        covered: list[str] = []
        for a in [a for a in plan.assignments if a.seed == seed]:
            test = set(a.test)
            if not test <= universe:
                raise AssertionError(f"seed {seed} fold {a.outer_fold}: unknown test units")
            covered.extend(a.test)
            train = universe - test
            if train & test:
                raise AssertionError(f"seed {seed} fold {a.outer_fold}: train/test overlap")
            if a.inner:
                inner_universe = sorted(train)
                seen: list[str] = []
                for s in a.inner:
                    if set(s.train) & set(s.val):
                        raise AssertionError("inner train/val overlap")
                    if not set(s.val) <= set(inner_universe):
                        raise AssertionError("inner val outside outer-train")
                    seen.extend(s.val)
                if sorted(seen) != inner_universe:
                    raise AssertionError("inner folds do not partition outer-train")
        if sorted(covered) != sorted(universe):
            raise AssertionError(f"seed {seed}: test folds do not partition the units")
