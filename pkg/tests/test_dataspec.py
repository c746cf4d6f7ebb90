import struct

import numpy as np
import pytest

from embench.dataspec import (
    EmbeddingTable,
    SpotVector,
    aggregate_spot_vectors,
    assemble_bags,
    load_embeddings,
    load_manifest,
    load_spot_table,
    majority_reference_call,
    write_embeddings,
)
from embench.errors import (
    DuplicateError,
    EmptyOverlapError,
    FormatError,
    LabelConflictError,
    LabelKindError,
    RangeError,
    TruncationError,
)

from synthfix import write_manifest_csv


def test_emb1_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "t.emb1"
    write_embeddings(path, data)
    table = load_embeddings(path)
    assert table.n_rows == 7 and table.dim == 5
    assert np.array_equal(table.data.astype(np.float32), data)
    # second round trip is byte-identical
    path2 = tmp_path / "t2.emb1"
    write_embeddings(path2, table.data)
    assert path.read_bytes() == path2.read_bytes()


def test_emb1_small_example(tmp_path):
    path = tmp_path / "t.emb1"
    write_embeddings(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    table = load_embeddings(path)
    assert table.data.shape == (2, 3)


def test_emb1_bad_magic(tmp_path):
    path = tmp_path / "bad.emb1"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_emb1_truncation(tmp_path):
    path = tmp_path / "trunc.emb1"
    # header says 5 rows but payload holds 4
    payload = struct.pack("<IQI", 1, 5, 3) + b"\x00" * (4 * 4 * 3)
    path.write_bytes(b"EMB1" + payload)
    with pytest.raises(TruncationError):
        load_embeddings(path)


def test_emb1_nan_rejected(tmp_path):
    path = tmp_path / "nan.emb1"
    data = np.zeros((2, 2), dtype=np.float32)
    data[1, 1] = np.nan
    with open(path, "wb") as fh:
        fh.write(b"EMB1" + struct.pack("<IQI", 1, 2, 2) + data.tobytes())
    with pytest.raises(ValueError):
        load_embeddings(path)


def _table(n, dim=3):
    return EmbeddingTable(data=np.zeros((n, dim)) + 1.0)


def test_manifest_lexicographic_classes(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "sample_id,row_index,group_id,bag_id,label\n"
        "a,0,g1,,pos\nb,1,g1,,neg\nc,2,g2,,pos\nd,3,g2,,neg\n")
    manifest = load_manifest(path, _table(4), task="classification")
    assert manifest.class_names == ["neg", "pos"]
    by_id = {e.sample_id: e.label.class_index for e in manifest.entries}
    assert by_id == {"a": 1, "b": 0, "c": 1, "d": 0}


def test_manifest_class_map_order_independent(tmp_path):
    rows = ["a,0,g1,,pos", "b,1,g1,,neg", "c,2,g2,,mid"]
    header = "sample_id,row_index,group_id,bag_id,label\n"
    p1 = tmp_path / "m1.csv"
    p1.write_text(header + "\n".join(rows) + "\n")
    p2 = tmp_path / "m2.csv"
    p2.write_text(header + "\n".join(reversed(rows)) + "\n")
    m1 = load_manifest(p1, _table(3), task="classification")
    m2 = load_manifest(p2, _table(3), task="classification")
    assert m1.class_names == m2.class_names
    assert {e.sample_id: e.label.class_index for e in m1.entries} == \
           {e.sample_id: e.label.class_index for e in m2.entries}


def test_manifest_range_error(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,10,g1,,x\n")
    with pytest.raises(RangeError):
        load_manifest(path, _table(5), task="classification")


def test_manifest_duplicate_row(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,0,g1,,x\nb,0,g1,,y\n")
    with pytest.raises(DuplicateError):
        load_manifest(path, _table(2), task="classification")


def test_manifest_label_kind_error(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,0,g1,,1.5\nb,1,g1,,oops\n")
    with pytest.raises(LabelKindError):
        load_manifest(path, _table(2), task="regression")


def test_manifest_multi_target_regression(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,0,g1,,0.1;0.9\nb,1,g1,,0.5;0.5\n")
    manifest = load_manifest(path, _table(2), task="regression")
    assert manifest.n_targets == 2
    assert manifest.labels_array().shape == (2, 2)


def test_manifest_round_trip(tmp_path):
    from synthfix import planted_tile_task

    table, manifest = planted_tile_task(n=20, groups=4)
    path = tmp_path / "m.csv"
    write_manifest_csv(path, manifest)
    loaded = load_manifest(path, table, task="classification")
    assert loaded.class_names == manifest.class_names
    assert loaded.labels_array().tolist() == manifest.labels_array().tolist()


def test_assemble_bags(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,2,p1,S1,x\nb,0,p1,S1,x\nc,1,p1,S1,x\n"
                    "d,3,p2,S2,y\ne,4,p2,S2,y\n")
    manifest = load_manifest(path, _table(5), task="classification")
    bags = assemble_bags(manifest)
    assert [b.bag_id for b in bags.bags] == ["S1", "S2"]
    assert [len(b.member_rows) for b in bags.bags] == [3, 2]
    assert bags.bags[0].member_rows == [0, 1, 2]  # ascending row order


def test_assemble_bags_label_conflict(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("sample_id,row_index,group_id,bag_id,label\n"
                    "a,0,p1,S1,x\nb,1,p1,S1,y\n")
    manifest = load_manifest(path, _table(2), task="classification")
    with pytest.raises(LabelConflictError):
        assemble_bags(manifest)


def test_assemble_bags_empty_manifest():
    from embench.dataspec import SampleManifest

    empty = SampleManifest(entries=[], task="classification", class_names=[])
    assert len(assemble_bags(empty)) == 0


def _spot(spot_id, area, hot=0, second=None, mix=1.0):
    p = np.zeros(16)
    if second is None:
        p[hot] = 1.0
    else:
        p[hot] = mix
        p[second] = 1.0 - mix
    return SpotVector(spot_id=spot_id, proportions=p, overlap_area=area)


def test_aggregate_single_spot_identity():
    p = np.full(16, 1 / 16)
    spot = SpotVector("s", p, 3.0)
    assert np.array_equal(aggregate_spot_vectors([spot]), p)


def test_aggregate_equal_areas_mean():
    a = _spot("a", 2.0, hot=0)
    b = _spot("b", 2.0, hot=1)
    out = aggregate_spot_vectors([a, b])
    assert out[0] == pytest.approx(0.5) and out[1] == pytest.approx(0.5)


def test_aggregate_weighted_hand_case():
    # areas (1, 3): weights 0.25/0.75
    a = _spot("a", 1.0, hot=0)
    b = _spot("b", 3.0, hot=1)
    out = aggregate_spot_vectors([a, b])
    assert out[0] == pytest.approx(0.25)
    assert out[1] == pytest.approx(0.75)
    assert out[2:].sum() == 0.0


def test_aggregate_scale_invariant_and_convex():
    rng = np.random.default_rng(1)
    spots = []
    for i in range(5):
        p = rng.dirichlet(np.ones(16))
        spots.append(SpotVector(f"s{i}", p, float(rng.uniform(0.1, 4.0))))
    out = aggregate_spot_vectors(spots)
    scaled = [SpotVector(s.spot_id, s.proportions, s.overlap_area * 7.5) for s in spots]
    assert np.allclose(aggregate_spot_vectors(scaled), out, atol=1e-12)
    assert abs(out.sum() - 1.0) < 1e-6
    stacked = np.stack([s.proportions for s in spots])
    assert np.all(out >= stacked.min(axis=0) - 1e-12)
    assert np.all(out <= stacked.max(axis=0) + 1e-12)


def test_aggregate_zero_areas():
    with pytest.raises(EmptyOverlapError):
        aggregate_spot_vectors([_spot("a", 0.0), _spot("b", 0.0)])
    with pytest.raises(EmptyOverlapError):
        aggregate_spot_vectors([])


def test_spot_table_csv(tmp_path):
    path = tmp_path / "spots.csv"
    header = "spot_id,area," + ",".join(f"p{i}" for i in range(16))
    row = "s1,2.0,1.0" + ",0.0" * 15
    path.write_text(header + "\n" + row + "\n")
    spots = load_spot_table(path)
    assert len(spots) == 1 and spots[0].overlap_area == 2.0


def test_majority_reference_call():
    agg = np.zeros(16)
    agg[0], agg[1] = 0.6, 0.3
    assert majority_reference_call(agg, [0], [1])
    assert not majority_reference_call(agg, [1], [0])
    # exactly half is not a strict majority
    agg[0] = agg[1] = 0.4
    assert not majority_reference_call(agg, [0], [1])
