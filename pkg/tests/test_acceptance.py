"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; the whole suite is also part of the default ``pytest`` run.
"""
import functools
import hashlib
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from embench.abmil import AbmilConfig, AbmilModel, forward, init_params, loss_and_grad
from embench.cli import main
from embench.dataspec import EmbeddingTable, load_embeddings, write_embeddings
from embench.folds import flat_plan, stratified_group_kfold, verify_no_leakage
from embench.metrics import topk_accuracy
from embench.probes import (
    KnnIndex,
    fit_logistic,
    fit_ridge,
    knn_predict,
    logistic_objective,
)
from embench.runner import (
    ModelData,
    TaskSpec,
    collect_predictions,
    compare_models,
    metric_fn,
    run_copy_detection,
    run_slide_task,
    run_tile_task,
)
from embench.stats import (
    bootstrap,
    check_cld_laws,
    compact_letter_display,
    friedman,
    holm_bonferroni,
    wilcoxon_signed_rank,
)
from embench.tileqc import otsu_threshold, read_ppm, write_ppm

from synthfix import (
    fast_mil_grid,
    planted_mil_task,
    planted_tile_task,
    tissue_tile,
    write_model_files,
)


def criterion(number, label):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE {number}] {label}: FAIL", flush=True)
                raise
            print(f"\n[ACCEPTANCE {number}] {label}: PASS", flush=True)
        return wrapper
    return decorate


# -- criterion 1 -------------------------------------------------------------

def _wilcoxon_enum_oracle(x, y):
    d = np.asarray(x, float) - np.asarray(y, float)
    d = d[d != 0]
    m = d.size
    if m == 0:
        return 1.0
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(m)
    i = 0
    while i < m:
        j = i
        while j < m and absd[order[j]] == absd[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    w_plus = ranks[d > 0].sum()
    total = ranks.sum()
    masks = (np.arange(2 ** m)[:, None] >> np.arange(m)) & 1
    sums = masks @ ranks
    return float(np.mean(np.abs(sums - total / 2) >= abs(w_plus - total / 2) - 1e-12))


def _holm_oracle(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    adj = [0.0] * m
    for rank, idx in enumerate(order):
        candidate = max((m - j) * p[order[j]] for j in range(rank + 1))
        adj[idx] = min(1.0, candidate)
    return adj


def _otsu_exhaustive(hist):
    """Literal 256-threshold scan; exact integer comparison of the
    between-class variance numerator^2/denominator pairs."""
    total = sum(hist)
    weighted = sum(i * c for i, c in enumerate(hist))
    best_t, best_n2, best_d = 0, 0, 0
    for t in range(256):
        w0 = sum(hist[: t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        s0 = sum(i * hist[i] for i in range(t + 1))
        num = s0 * w1 - (weighted - s0) * w0
        n2, d = num * num, w0 * w1
        if (n2 * best_d > best_n2 * d) if best_d else n2 > 0:
            best_t, best_n2, best_d = t, n2, d
    return best_t


@criterion(1, "statistical primitives vs oracles (<10 s)")
def test_criterion_1_statistical_primitives():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        x = rng.integers(-6, 7, n).astype(float)
        y = rng.integers(-6, 7, n).astype(float)
        _, p = wilcoxon_signed_rank(x, y)
        assert p == pytest.approx(_wilcoxon_enum_oracle(x, y), abs=1e-12)

    assert holm_bonferroni([0.01, 0.04, 0.03]).tolist() == pytest.approx([0.03, 0.06, 0.06])
    for _ in range(200):
        p = rng.uniform(size=int(rng.integers(1, 12)))
        assert np.allclose(holm_bonferroni(p), _holm_oracle(list(p)), atol=1e-12)

    stat, _ = friedman(np.array([[1.0, 2.0, 3.0]] * 4))
    assert stat == 8.0

    for _ in range(1000):
        hist = rng.integers(0, 40, 256)
        hist[rng.integers(0, 256, int(rng.integers(0, 220)))] = 0
        h = [int(v) for v in hist]
        if sum(h) == 0:
            h[128] = 1
        assert otsu_threshold(np.array(h, float)) == _otsu_exhaustive(h)

    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"primitives took {elapsed:.1f}s"


# -- criterion 2 -------------------------------------------------------------

@criterion(2, "CLD coverage laws on 1000 random matrices")
def test_criterion_2_cld_laws():
    rng = np.random.default_rng(202)
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        adj = np.ones((k, k))
        for a in range(k):
            for b in range(a + 1, k):
                adj[a, b] = adj[b, a] = rng.uniform()
        ranking = [int(v) for v in rng.permutation(k)]
        letters = compact_letter_display(adj, 0.05, ranking)
        check_cld_laws(adj, 0.05, letters)
    chain = np.array([[1.0, 0.5, 0.01], [0.5, 1.0, 0.5], [0.01, 0.5, 1.0]])
    assert compact_letter_display(chain, 0.05, [0, 1, 2]) == ["a", "ab", "b"]


# -- criterion 3 -------------------------------------------------------------

@criterion(3, "probe correctness (kNN, ridge-SVD, logistic gradient)")
def test_criterion_3_probes():
    rng = np.random.default_rng(303)

    points = rng.normal(size=(1000, 8))
    labels = rng.integers(0, 3, 1000)
    queries = rng.normal(size=(30, 8))
    fast = knn_predict(KnnIndex(points, labels, k=20), queries)
    for qi, q in enumerate(queries):
        dists = [(float(np.linalg.norm(points[i] - q)), i) for i in range(1000)]
        nearest = sorted(dists)[:20]
        votes, sums = {}, {}
        for d, i in nearest:
            c = int(labels[i])
            votes[c] = votes.get(c, 0) + 1
            sums[c] = sums.get(c, 0.0) + d
        assert fast[qi] == min(votes, key=lambda c: (-votes[c], sums[c], c))

    for trial in range(5):
        X = rng.normal(size=(50, 8))
        Y = rng.normal(size=(50, 2))
        model = fit_ridge(X, Y)
        Xc = X - X.mean(axis=0)
        Yc = Y - Y.mean(axis=0)
        W = np.linalg.solve(Xc.T @ Xc + model.alpha * np.eye(8), Xc.T @ Yc)
        assert np.abs(model.weights - W).max() <= 1e-8

    X = rng.normal(size=(20, 4))
    y = np.array([i % 3 for i in range(20)])
    model = fit_logistic(X, y, 3)
    y_onehot = np.zeros((20, 3))
    y_onehot[np.arange(20), y] = 1.0
    params = np.concatenate([model.weights.ravel(), model.bias])
    _, grad = logistic_objective(params, X, y_onehot, model.lam)
    assert np.abs(grad).max() <= 1e-6 * max(1.0, np.abs(model.weights).max())
    # analytic gradient vs central differences at 1e-5 relative tolerance
    probe = rng.normal(size=params.size) * 0.3
    _, g = logistic_objective(probe, X, y_onehot, model.lam)
    fd = np.zeros_like(probe)
    for i in range(probe.size):
        eps = 1e-6
        bump = probe.copy()
        bump[i] += eps
        up, _ = logistic_objective(bump, X, y_onehot, model.lam)
        bump[i] -= 2 * eps
        down, _ = logistic_objective(bump, X, y_onehot, model.lam)
        fd[i] = (up - down) / (2 * eps)
    assert np.abs(g - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


# -- criterion 4 -------------------------------------------------------------

@criterion(4, "ABMIL numerics (gradients, pooling, attention)")
def test_criterion_4_abmil():
    rng = np.random.default_rng(404)
    for task, target in (("classification", 1), ("regression", 0.4)):
        cfg = AbmilConfig(attn_dim=16, fc_dim=4, dropout=0.0, task=task,
                          n_classes=3 if task == "classification" else None)
        params = init_params(8, cfg, seed=5)
        bag = rng.normal(size=(3, 8))
        _, grads = loss_and_grad(params, bag, target, task)
        for name, tensor in params.items():
            fd = np.zeros_like(tensor)
            it = np.nditer(tensor, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                eps = 1e-6
                orig = tensor[idx]
                tensor[idx] = orig + eps
                up, _ = loss_and_grad(params, bag, target, task)
                tensor[idx] = orig - eps
                down, _ = loss_and_grad(params, bag, target, task)
                tensor[idx] = orig
                fd[idx] = (up - down) / (2 * eps)
            rel = np.abs(grads[name] - fd).max() / max(np.abs(fd).max(), 1e-8)
            assert rel <= 1e-4, f"{task}/{name}: {rel}"

    cfg = AbmilConfig(attn_dim=16, fc_dim=4, dropout=0.0, task="classification",
                      n_classes=3)
    model = AbmilModel(params=init_params(8, cfg, seed=6), config=cfg)
    bag = rng.normal(size=(9, 8))
    out, attn = forward(model, bag)
    perm = rng.permutation(9)
    out2, attn2 = forward(model, bag[perm][np.argsort(perm)])
    assert np.array_equal(out, out2) and np.array_equal(attn, attn2)
    _, single = forward(model, bag[:1])
    assert single[0] == 1.0


# -- criterion 5 -------------------------------------------------------------

@criterion(5, "CV hygiene on 100 random manifests")
def test_criterion_5_cv_hygiene():
    rng = np.random.default_rng(505)
    seeds = [0, 1, 2]
    for trial in range(100):
        n_units = int(rng.integers(10, 60))
        n_classes = int(rng.integers(2, 4))
        k = int(rng.integers(2, 6))
        if k > n_units:
            continue
        units = [(f"u{i}", int(rng.integers(0, n_classes))) for i in range(n_units)]
        plan = flat_plan(units, k, seeds, stratified=True)
        verify_no_leakage(plan, [u for u, _ in units])
        cls = dict(units)
        n_c = {}
        for _, c in units:
            n_c[c] = n_c.get(c, 0) + 1
        tested_count = {u: 0 for u, _ in units}
        for a in plan.assignments:
            for c, total in n_c.items():
                fold_count = sum(1 for u in a.test if cls[u] == c)
                assert abs(fold_count - total / k) <= 1.0
            for u in a.test:
                tested_count[u] += 1
        assert set(tested_count.values()) == {len(seeds)}


# -- criterion 6 -------------------------------------------------------------

@criterion(6, "end-to-end synthetic signal recovery (<2 min)")
def test_criterion_6_end_to_end():
    start = time.monotonic()
    table_g, manifest_g = planted_tile_task(n=2000, groups=50, margin=8.0)
    table_s, manifest_s = planted_tile_task(n=2000, groups=50, margin=8.0,
                                            shuffle_seed=0)
    spec = TaskSpec(task_kind="tile-class", probe="lr",
                    models=[ModelData("good", table_g, manifest_g),
                            ModelData("shuffled", table_s, manifest_s)],
                    outer_k=5, seeds=[0, 1, 2], B=1000)
    result = run_tile_task(spec)
    assert result.skips == []
    cmp = compare_models(result, metric="mcc", B=1000, seed=0)
    report = cmp.report
    assert report.summaries["good"]["median"] >= 0.95
    shuffled = report.summaries["shuffled"]
    assert shuffled["q1"] <= 0.0 <= shuffled["q3"]
    assert report.adj_p[report.models.index("good"),
                        report.models.index("shuffled")] < 0.05
    assert report.cld["good"] != report.cld["shuffled"]

    mil_table, mil_manifest = planted_mil_task(n_bags=40)
    mil_spec = TaskSpec(task_kind="slide-class", probe="abmil",
                        models=[ModelData("mil", mil_table, mil_manifest)],
                        outer_k=5, inner_k=4, seeds=[0, 1, 2], B=200,
                        grid=fast_mil_grid())
    mil_result = run_slide_task(mil_spec)
    from embench.metrics import confusion_matrix, mcc

    pooled = mcc(confusion_matrix([r.truth for r in mil_result.rows],
                                  [r.pred for r in mil_result.rows], 2))
    assert pooled >= 0.9
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"pipeline took {elapsed:.1f}s"


# -- criterion 7 -------------------------------------------------------------

@criterion(7, "copy detection: identity ceiling, chance floor, monotone k")
def test_criterion_7_copy_detection():
    rng = np.random.default_rng(707)
    gallery = rng.normal(size=(100, 32))
    original = EmbeddingTable(data=gallery)
    identical = {f: EmbeddingTable(data=gallery * (1.0 + 0.5 * i))
                 for i, f in enumerate(["geo", "color", "noise", "deform"])}
    acc = run_copy_detection(original, identical, k=1)
    assert all(v == 1.0 for v in acc.values())

    shuffled = EmbeddingTable(data=gallery[rng.permutation(100)])
    chance = run_copy_detection(original, {"noise": shuffled}, k=1)["noise"]
    assert abs(chance - 1 / 100) <= 0.05

    sim = rng.normal(size=(40, 60))
    truth = rng.integers(0, 60, 40)
    accs = [topk_accuracy(sim, truth, k) for k in range(1, 61)]
    assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))


# -- criterion 8 -------------------------------------------------------------

def _run_probe_cli(tmp_path, tag, jobs):
    out = tmp_path / f"run-{tag}"
    code = main(["probe", "--config", str(tmp_path / "tile.toml"),
                 "--out-dir", str(out), "--jobs", str(jobs)])
    assert code == 0
    return {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
            for name in ("predictions.csv", "bootstrap.csv", "pvalues.json", "cld.csv")}


def _write_probe_fixture(tmp_path, B=300):
    emb_g, man_g = write_model_files(tmp_path, "good",
                                     *planted_tile_task(n=400, groups=20))
    emb_s, man_s = write_model_files(tmp_path, "shuffled",
                                     *planted_tile_task(n=400, groups=20, shuffle_seed=0))
    (tmp_path / "tile.toml").write_text(f"""
[task]
kind = "tile-class"
probe = "lr"

[bootstrap]
replicates = {B}

[[models]]
id = "good"
embeddings = "{emb_g}"
manifest = "{man_g}"

[[models]]
id = "shuffled"
embeddings = "{emb_s}"
manifest = "{man_s}"
""")


@criterion(8, "byte-identical outputs across --jobs settings")
def test_criterion_8_determinism(tmp_path):
    _write_probe_fixture(tmp_path)
    h1 = _run_probe_cli(tmp_path, "a", jobs=1)
    h2 = _run_probe_cli(tmp_path, "b", jobs=4)
    assert h1 == h2


# -- criterion 9 -------------------------------------------------------------

@criterion(9, "format fidelity and config round trip")
def test_criterion_9_formats(tmp_path):
    rng = np.random.default_rng(909)
    data = rng.normal(size=(9, 4)).astype(np.float32)
    write_embeddings(tmp_path / "rt.emb1", data)
    assert np.array_equal(load_embeddings(tmp_path / "rt.emb1").data.astype(np.float32),
                          data)
    write_embeddings(tmp_path / "rt2.emb1", load_embeddings(tmp_path / "rt.emb1").data)
    assert (tmp_path / "rt.emb1").read_bytes() == (tmp_path / "rt2.emb1").read_bytes()

    tile = tissue_tile((19, 11), seed=9)
    write_ppm(tmp_path / "rt.ppm", tile)
    again = read_ppm(tmp_path / "rt.ppm")
    assert np.array_equal(tile, again)
    write_ppm(tmp_path / "rt2.ppm", again)
    assert (tmp_path / "rt.ppm").read_bytes() == (tmp_path / "rt2.ppm").read_bytes()

    _write_probe_fixture(tmp_path, B=120)
    h1 = _run_probe_cli(tmp_path, "orig", jobs=1)

    # all emitted CSV/JSON parse against the documented schemas
    import csv as csv_mod
    out = tmp_path / "run-orig"
    with open(out / "predictions.csv", newline="") as fh:
        reader = csv_mod.reader(fh)
        assert next(reader) == ["model_id", "sample_or_bag_id", "seed", "fold",
                                "prediction", "truth"]
        for row in reader:
            int(row[2]), int(row[3])
    with open(out / "bootstrap.csv", newline="") as fh:
        reader = csv_mod.reader(fh)
        assert next(reader) == ["model", "replicate", "value"]
        for row in reader:
            int(row[1]), float(row[2])
    with open(out / "cld.csv", newline="") as fh:
        reader = csv_mod.reader(fh)
        assert next(reader) == ["cld", "model", "min", "q1", "median", "mean",
                                "q3", "max"]
        for row in reader:
            [float(v) for v in row[2:]]
    payload = json.loads((out / "pvalues.json").read_text())
    assert set(payload) >= {"models", "alpha", "friedman", "raw_p", "adj_p"}
    plans = json.loads((out / "plan.json").read_text())
    assert set(plans) == {"good", "shuffled"}

    # --print-config round trip reproduces the run hashes
    from embench.config import emit_toml, load_config

    resolved = emit_toml(load_config(str(tmp_path / "tile.toml")))
    (tmp_path / "tile.toml").write_text(resolved)
    h2 = _run_probe_cli(tmp_path, "replay", jobs=1)
    assert h1 == h2
