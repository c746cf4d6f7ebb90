"""Tile quality control: Otsu background, blackish area, and pen-mark filters.

Tiles are 8-bit RGB rasters held as (H, W, 3) uint8 arrays and exchanged on
disk as binary PPM (P6, maxval 255). A tile is rejected when background
exceeds 90%, dark area exceeds 5%, or any ink color exceeds 5% coverage; all
three cutoffs are strict inequalities and configurable.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError, TruncationError

BACKGROUND_MAX = 0.90
BLACKISH_MAX = 0.05
PENMARK_MAX = 0.05
DARK_CUTOFF = 60
# Degenerate histograms (>=99% of pixels in one gray bin) bypass Otsu: the
# tile is all background iff that bin is brighter than 200.
DEGENERATE_BIN_SHARE = 0.99
DEGENERATE_BRIGHT_GRAY = 200
# Ink dominance rules: channel above `ink_floor` and exceeding the other two
# by more than `ink_margin`.
INK_FLOOR = 100
INK_MARGIN = 30

INKS = ("red", "green", "blue")


@dataclass(frozen=True)
class QcThresholds:
    background_max: float = BACKGROUND_MAX
    blackish_max: float = BLACKISH_MAX
    penmark_max: float = PENMARK_MAX
    dark_cutoff: int = DARK_CUTOFF
    ink_floor: int = INK_FLOOR
    ink_margin: int = INK_MARGIN


def _check_tile(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3 or tile.dtype != np.uint8:
        raise ArgumentError(f"tile must be (H, W, 3) uint8, got {tile.shape} {tile.dtype}")
    if tile.shape[0] < 1 or tile.shape[1] < 1:
        raise ArgumentError("tile must have at least one pixel")
    return tile


def otsu_threshold(hist) -> int:
    """Threshold maximizing between-class variance over a 256-bin histogram.

    Pixels with gray > t form the bright (background) class. Evaluated in
    exact rational arithmetic, so ties resolve to the smallest t without
    float noise and the result is exactly invariant to uniform count scaling.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,) or np.any(hist < 0) or not np.all(np.isfinite(hist)):
        raise ArgumentError("histogram must be 256 nonnegative finite counts")
    if hist.sum() <= 0:
        raise ArgumentError("histogram is empty")
    # Scale dyadic float counts to exact integers (no-op for integer counts).
    ratios = [float(c).as_integer_ratio() for c in hist]
    denom = 1
    for _, d in ratios:
        denom = denom * d // math.gcd(denom, d)
    counts = [n * (denom // d) for n, d in ratios]
    total = sum(counts)
    weighted_total = sum(i * c for i, c in enumerate(counts))

    # Between-class variance at t is (S0*w1 - (S-S0)*w0)^2 / (w0*w1); compare
    # candidates by cross-multiplication to stay exact.
    best_t, best_num2, best_den = 0, 0, 0
    w0 = 0
    s0 = 0
    for t in range(256):
        w0 += counts[t]
        s0 += t * counts[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue  # variance 0, never beats the t=0 initialization
        num = s0 * w1 - (weighted_total - s0) * w0
        num2 = num * num
        den = w0 * w1
        if best_den == 0:
            greater = num2 > 0
        else:
            greater = num2 * best_den > best_num2 * den
        if greater:
            best_t, best_num2, best_den = t, num2, den
    return best_t


def grayscale(tile: np.ndarray) -> np.ndarray:
    """Integer-rounded Rec.601 luma."""
    tile = _check_tile(tile)
    luma = (0.299 * tile[..., 0].astype(np.float64)
            + 0.587 * tile[..., 1].astype(np.float64)
            + 0.114 * tile[..., 2].astype(np.float64))
    return np.rint(luma).astype(np.uint8)


def background_fraction(tile: np.ndarray, thresholds: QcThresholds = QcThresholds()) -> float:
    """Fraction of pixels brighter than the tile's Otsu threshold."""
    gray = grayscale(tile)
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = gray.size
    dominant = int(hist.argmax())
    if hist[dominant] >= DEGENERATE_BIN_SHARE * total:
        return 1.0 if dominant > DEGENERATE_BRIGHT_GRAY else 0.0
    t = otsu_threshold(hist)
    return float(np.count_nonzero(gray > t)) / total


def blackish_fraction(tile: np.ndarray, thresholds: QcThresholds = QcThresholds()) -> float:
    """Fraction of pixels whose brightest channel stays below the dark cutoff."""
    tile = _check_tile(tile)
    peak = tile.max(axis=2)
    return float(np.count_nonzero(peak < thresholds.dark_cutoff)) / peak.size


def penmark_fraction(tile: np.ndarray, thresholds: QcThresholds = QcThresholds()) -> dict[str, float]:
    """Per-ink coverage fractions under the channel-dominance rules."""
    tile = _check_tile(tile).astype(np.int32)
    r, g, b = tile[..., 0], tile[..., 1], tile[..., 2]
    total = r.size
    rules = {
        "red": (r > thresholds.ink_floor) & (r - np.maximum(g, b) > thresholds.ink_margin),
        "green": (g > thresholds.ink_floor) & (g - np.maximum(r, b) > thresholds.ink_margin),
        "blue": (b > thresholds.ink_floor) & (b - np.maximum(r, g) > thresholds.ink_margin),
    }
    return {ink: float(np.count_nonzero(mask)) / total for ink, mask in rules.items()}


@dataclass(frozen=True)
class QcVerdict:
    keep: bool
    reasons: list[str]
    background: float
    blackish: float
    pen: dict[str, float]


def qc_filter(tile: np.ndarray, thresholds: QcThresholds = QcThresholds()) -> QcVerdict:
    """Apply all three filters; rejection reasons list every violated rule."""
    bg = background_fraction(tile, thresholds)
    dark = blackish_fraction(tile, thresholds)
    pen = penmark_fraction(tile, thresholds)
    reasons = []
    if bg > thresholds.background_max:
        reasons.append("background")
    if dark > thresholds.blackish_max:
        reasons.append("blackish")
    for ink in INKS:
        if pen[ink] > thresholds.penmark_max:
            reasons.append(f"pen_{ink}")
    return QcVerdict(keep=not reasons, reasons=reasons, background=bg,
                     blackish=dark, pen=pen)


def write_qc_report(path, rows: list[tuple[str, QcVerdict]]) -> None:
    """QC report CSV: tile_id,background,blackish,pen_red,pen_green,pen_blue,verdict,reasons."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "background", "blackish", "pen_red",
                         "pen_green", "pen_blue", "verdict", "reasons"])
        for tile_id, v in rows:
            writer.writerow([
                tile_id, repr(v.background), repr(v.blackish),
                repr(v.pen["red"]), repr(v.pen["green"]), repr(v.pen["blue"]),
                "keep" if v.keep else "reject", ";".join(v.reasons),
            ])


# ---------------------------------------------------------------------------
# binary PPM (P6, maxval 255)


def write_ppm(path, tile: np.ndarray) -> None:
    tile = _check_tile(tile)
    h, w = tile.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(tile).tobytes())


def _read_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise TruncationError("unexpected end of PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        payload = fh.read(w * h * 3 + 1)
    if len(payload) < w * h * 3:
        raise TruncationError(f"{path}: pixel payload shorter than {w}x{h}")
    if len(payload) > w * h * 3:
        raise TruncationError(f"{path}: trailing bytes after pixel payload")
    return np.frombuffer(payload[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()
