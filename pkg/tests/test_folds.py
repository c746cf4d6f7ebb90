import json

import numpy as np
import pytest

from embench.dataspec import Label, ManifestEntry, SampleManifest, assemble_bags
from embench.errors import ArgumentError, InfeasibleError
from embench.folds import (
    FoldPlan,
    flat_plan,
    group_kfold,
    nested_plan,
    stratified_group_kfold,
    verify_no_leakage,
)

from synthfix import planted_mil_task


def test_stratified_six_singletons():
    units = [(f"g{i}", i % 2) for i in range(6)]
    folds = stratified_group_kfold(units, 3, seed=0)
    cls = dict(units)
    for fold in folds:
        assert sorted(cls[u] for u in fold) == [0, 1]


def test_stratified_partition_law():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(8, 40))
        k = int(rng.integers(2, min(6, n) + 1))
        units = [(f"u{i}", int(rng.integers(0, 3))) for i in range(n)]
        folds = stratified_group_kfold(units, k, seed=trial)
        flat = [u for fold in folds for u in fold]
        assert sorted(flat) == sorted(u for u, _ in units)
        assert len(set(flat)) == n


def test_stratified_plus_minus_one():
    rng = np.random.default_rng(7)
    for trial in range(30):
        n = int(rng.integers(10, 60))
        k = int(rng.integers(2, 7))
        if k > n:
            continue
        units = [(f"u{i}", int(rng.integers(0, 4))) for i in range(n)]
        folds = stratified_group_kfold(units, k, seed=trial)
        cls = dict(units)
        n_c = {}
        for _, c in units:
            n_c[c] = n_c.get(c, 0) + 1
        for fold in folds:
            for c, total in n_c.items():
                count = sum(1 for u in fold if cls[u] == c)
                assert abs(count - total / k) <= 1.0


def test_stratified_infeasible_and_bad_k():
    units = [(f"u{i}", 0) for i in range(5)]
    with pytest.raises(InfeasibleError):
        stratified_group_kfold(units, 7, seed=0)
    with pytest.raises(ArgumentError):
        stratified_group_kfold(units, 1, seed=0)


def test_stratified_input_order_independent():
    units = [(f"u{i}", i % 3) for i in range(17)]
    a = stratified_group_kfold(units, 4, seed=5)
    b = stratified_group_kfold(list(reversed(units)), 4, seed=5)
    assert a == b


def test_group_kfold_sizes():
    assert [len(f) for f in group_kfold([f"u{i}" for i in range(10)], 5, 0)] == [2] * 5
    sizes = sorted(len(f) for f in group_kfold([f"u{i}" for i in range(11)], 5, 0))
    assert sizes == [2, 2, 2, 2, 3]


def test_group_kfold_remainder_fold_is_seed_determined():
    units = [f"u{i}" for i in range(11)]
    big = {seed: [len(f) for f in group_kfold(units, 5, seed)].index(3)
           for seed in range(20)}
    assert len(set(big.values())) > 1


def test_group_kfold_determinism():
    units = [f"u{i}" for i in range(11)]
    a = group_kfold(units, 5, 3)
    b = group_kfold(list(reversed(units)), 5, 3)
    assert a == b
    assert group_kfold(units, 5, 4) != a  # different seed moves contents


def test_nested_plan_counts_and_laws():
    table, manifest = planted_mil_task(n_bags=40)
    bags = assemble_bags(manifest)
    plan = nested_plan(bags, outer_k=5, inner_k=4, seeds=[0, 1, 2])
    assert len(plan.assignments) == 15
    for a in plan.assignments:
        assert len(a.inner) == 4
    verify_no_leakage(plan, [b.bag_id for b in bags.bags])


def test_nested_plan_infeasible_class():
    table, manifest = planted_mil_task(n_bags=40)
    bags = assemble_bags(manifest)
    # keep only 3 positive bags
    kept = [b for b in bags.bags if b.label.class_index == 0] + \
           [b for b in bags.bags if b.label.class_index == 1][:3]
    from embench.dataspec import BagSet
    with pytest.raises(InfeasibleError):
        nested_plan(BagSet(bags=kept), outer_k=5, inner_k=4, seeds=[0])


def test_coverage_every_unit_once_per_seed():
    units = [(f"u{i}", i % 2) for i in range(23)]
    plan = flat_plan(units, 5, [0, 1, 2], stratified=True)
    for seed in plan.seeds:
        tested = [u for a in plan.assignments if a.seed == seed for u in a.test]
        assert sorted(tested) == sorted(u for u, _ in units)


def test_leakage_property_random_manifests():
    rng = np.random.default_rng(11)
    for trial in range(25):
        n = int(rng.integers(12, 50))
        units = [(f"u{i}", int(rng.integers(0, 2))) for i in range(n)]
        plan = flat_plan(units, 4, [0, 1], stratified=True)
        verify_no_leakage(plan, [u for u, _ in units])


def test_plan_json_round_trip():
    units = [(f"u{i}", i % 2) for i in range(12)]
    plan = flat_plan(units, 3, [0, 1], stratified=True)
    restored = FoldPlan.from_dict(json.loads(plan.to_json()))
    assert restored == plan
    assert restored.to_json() == plan.to_json()


def test_nested_regression_plain_split():
    entries = []
    for b in range(10):
        entries.append(ManifestEntry(f"t{b}", b, f"s{b}", f"s{b}",
                                     Label(value=float(b))))
    manifest = SampleManifest(entries=entries, task="regression", class_names=[])
    bags = assemble_bags(manifest)
    plan = nested_plan(bags, outer_k=5, inner_k=2, seeds=[0])
    assert len(plan.assignments) == 5
    verify_no_leakage(plan, [b.bag_id for b in bags.bags])
