from fractions import Fraction

import numpy as np
import pytest

from embench.errors import ArgumentError, FormatError, TruncationError
from embench.tileqc import (
    QcThresholds,
    background_fraction,
    blackish_fraction,
    grayscale,
    otsu_threshold,
    penmark_fraction,
    qc_filter,
    read_ppm,
    write_ppm,
    write_qc_report,
)

from synthfix import tissue_tile


def _otsu_oracle(hist):
    """Exhaustive 256-threshold search in exact rational arithmetic."""
    total = sum(hist)
    weighted = sum(i * c for i, c in enumerate(hist))
    best_t, best = 0, Fraction(0)
    for t in range(256):
        w0 = sum(hist[: t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        s0 = sum(i * hist[i] for i in range(t + 1))
        mu0 = Fraction(s0, w0)
        mu1 = Fraction(weighted - s0, w1)
        var = Fraction(w0 * w1) * (mu0 - mu1) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for trial in range(150):
        hist = rng.integers(0, 40, 256)
        hist[rng.integers(0, 256, 180)] = 0
        h = [int(v) for v in hist]
        if sum(h) == 0:
            h[100] = 3
        assert otsu_threshold(np.array(h, dtype=float)) == _otsu_oracle(h)


def test_otsu_two_spikes():
    h = np.zeros(256)
    h[10] = 100
    h[200] = 100
    t = otsu_threshold(h)
    assert 10 <= t <= 199
    assert t == _otsu_oracle([int(v) for v in h])


def test_otsu_single_bin_tie_rule():
    h = np.zeros(256)
    h[137] = 50
    assert otsu_threshold(h) == 0


def test_otsu_scale_invariant():
    rng = np.random.default_rng(1)
    h = rng.integers(0, 30, 256).astype(float)
    h[5] += 1
    t = otsu_threshold(h)
    assert otsu_threshold(h * 2.5) == t
    assert otsu_threshold(h * 0.25) == t


def test_otsu_rejects_bad_histograms():
    with pytest.raises(ArgumentError):
        otsu_threshold(np.zeros(256))
    with pytest.raises(ArgumentError):
        otsu_threshold(np.zeros(100))


def test_grayscale_rec601():
    tile = np.zeros((1, 1, 3), np.uint8)
    tile[0, 0] = (255, 0, 0)
    assert grayscale(tile)[0, 0] == round(0.299 * 255)
    tile[0, 0] = (0, 255, 0)
    assert grayscale(tile)[0, 0] == round(0.587 * 255)
    tile[0, 0] = (10, 20, 30)
    assert grayscale(tile)[0, 0] == round(0.299 * 10 + 0.587 * 20 + 0.114 * 30)


def test_background_degenerate_rules():
    white = np.full((16, 16, 3), 255, np.uint8)
    assert background_fraction(white) == 1.0
    black = np.zeros((16, 16, 3), np.uint8)
    assert background_fraction(black) == 0.0


def test_background_half_and_half():
    tile = np.zeros((20, 20, 3), np.uint8)
    tile[:10] = 255
    frac = background_fraction(tile)
    assert abs(frac - 0.5) <= 1 / 400


def test_blackish_fraction():
    assert blackish_fraction(np.zeros((8, 8, 3), np.uint8)) == 1.0
    assert blackish_fraction(np.full((8, 8, 3), 255, np.uint8)) == 0.0
    tile = np.full((10, 10, 3), 200, np.uint8)
    tile[:1] = 10  # exactly 10% dark
    assert blackish_fraction(tile) == pytest.approx(0.10)


def test_penmark_green_block():
    tile = tissue_tile((20, 20), seed=3)
    tile[:2] = (20, 220, 30)  # saturated green over 10%
    pen = penmark_fraction(tile)
    assert pen["green"] == pytest.approx(0.10)
    verdict = qc_filter(tile)
    assert not verdict.keep and "pen_green" in verdict.reasons


def test_penmark_grayscale_is_ink_free():
    gray = np.full((12, 12, 3), 128, np.uint8)
    pen = penmark_fraction(gray)
    assert pen == {"red": 0.0, "green": 0.0, "blue": 0.0}


def test_qc_keeps_tissue():
    verdict = qc_filter(tissue_tile((32, 32), seed=0))
    assert verdict.keep and verdict.reasons == []


def test_qc_rejects_white_background():
    tile = np.full((20, 20, 3), 255, np.uint8)
    tile[19, 19] = (128, 128, 128)
    verdict = qc_filter(tile)
    assert not verdict.keep
    assert verdict.reasons == ["background"]


def test_qc_background_boundary_is_strict():
    # bimodal 80/200 tile: Otsu puts the 200s above threshold; exactly 90%
    # background is kept ("more than 90%"), one more pixel rejects
    tile = np.full((20, 20, 3), 200, np.uint8)
    tile.reshape(-1, 3)[:40] = 80
    assert background_fraction(tile) == pytest.approx(0.90)
    verdict = qc_filter(tile)
    assert verdict.keep, verdict.reasons
    tile.reshape(-1, 3)[39] = 200
    verdict = qc_filter(tile)
    assert not verdict.keep and verdict.reasons == ["background"]


def test_qc_penmark_boundary_is_strict():
    # exactly 5% ink coverage is kept, one more pixel rejects
    tile = tissue_tile((20, 20), seed=9)
    tile.reshape(-1, 3)[:20] = (20, 220, 30)
    assert penmark_fraction(tile)["green"] == pytest.approx(0.05)
    verdict = qc_filter(tile)
    assert verdict.keep, verdict.reasons
    tile.reshape(-1, 3)[20] = (20, 220, 30)
    verdict = qc_filter(tile)
    assert not verdict.keep and verdict.reasons == ["pen_green"]


def test_qc_deterministic():
    tile = tissue_tile((24, 24), seed=5)
    v1, v2 = qc_filter(tile), qc_filter(tile.copy())
    assert v1 == v2


def test_fractions_have_pixel_denominator():
    tile = tissue_tile((10, 10), seed=2)
    for value in (background_fraction(tile), blackish_fraction(tile),
                  *penmark_fraction(tile).values()):
        assert 0.0 <= value <= 1.0
        assert (value * 100) == pytest.approx(round(value * 100), abs=1e-9)


def test_ppm_round_trip(tmp_path):
    tile = tissue_tile((13, 7), seed=1)
    path = tmp_path / "t.ppm"
    write_ppm(path, tile)
    again = read_ppm(path)
    assert np.array_equal(tile, again)
    write_ppm(tmp_path / "t2.ppm", again)
    assert (tmp_path / "t.ppm").read_bytes() == (tmp_path / "t2.ppm").read_bytes()


def test_ppm_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(FormatError):
        read_ppm(bad)
    trunc = tmp_path / "trunc.ppm"
    trunc.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(TruncationError):
        read_ppm(trunc)


def test_ppm_header_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# comment line\n2 1\n255\n" + bytes(range(6)))
    tile = read_ppm(path)
    assert tile.shape == (1, 2, 3)


def test_qc_report_csv(tmp_path):
    rows = [("a", qc_filter(tissue_tile((8, 8)))),
            ("b", qc_filter(np.full((8, 8, 3), 255, np.uint8)))]
    path = tmp_path / "qc.csv"
    write_qc_report(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "tile_id,background,blackish,pen_red,pen_green,pen_blue,verdict,reasons"
    assert len(lines) == 3
    assert lines[2].startswith("b,") and "reject" in lines[2]


def test_custom_thresholds():
    tile = tissue_tile((16, 16), seed=4)
    tile[:4] = 30  # 25% darkish
    strict = QcThresholds(dark_cutoff=60, blackish_max=0.05)
    lax = QcThresholds(dark_cutoff=20, blackish_max=0.5)
    assert not qc_filter(tile, strict).keep
    assert qc_filter(tile, lax).keep
