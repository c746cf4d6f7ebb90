"""Seeded tile augmentations for copy-detection inputs.

Four families: geometric (similarity transform), color
(brightness/contrast then gamma), Gaussian noise, and elastic deformation.
Each family has a deterministic core taking explicit parameter values plus a
sampling wrapper that draws them from the configured ranges. Per-tile RNG
streams derive from (seed, tile_id, family), so parallel order cannot change
any output byte.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ArgumentError
from .rng import stream
from .tileqc import write_ppm

FAMILIES = ("geo", "color", "noise", "deform")


@dataclass(frozen=True)
class AugmentParams:
    """Sampling ranges; defaults follow the copy-detection protocol."""

    shift_frac: float = 0.10
    scale_frac: float = 0.10
    rotate_deg: float = 30.0
    brightness: float = 0.30
    contrast: float = 0.30
    gamma_low: float = 0.80
    gamma_high: float = 1.20
    noise_var_low: float = 1.0
    noise_var_high: float = 25.0
    elastic_sigma: float = 12.0
    elastic_alpha: float = 20.0


def _as_tile(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3 or tile.dtype != np.uint8:
        raise ArgumentError(f"tile must be (H, W, 3) uint8, got {tile.shape} {tile.dtype}")
    return tile


def _bilinear_sample(tile: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (H, W, 3) at float coords; out-of-bounds contributes black."""
    h, w = tile.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape + (3,), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            contrib = tile[yc, xc].astype(np.float64)
            out += (weight * inside)[..., None] * contrib
    return out


def geometric_transform(tile: np.ndarray, rotate_deg: float, scale: float,
                        shift_x: float, shift_y: float) -> np.ndarray:
    """Similarity transform about the tile center: rotate, scale, then shift
    (pixels). Bilinear resampling, constant black fill outside the source."""
    tile = _as_tile(tile)
    h, w = tile.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(rotate_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert forward map p' = s*R(p - c) + c + t
    dx = xs - cx - shift_x
    dy = ys - cy - shift_y
    src_x = (cos_t * dx + sin_t * dy) / scale + cx
    src_y = (-sin_t * dx + cos_t * dy) / scale + cy
    sampled = _bilinear_sample(tile, src_x, src_y)
    return np.clip(np.rint(sampled), 0, 255).astype(np.uint8)


def color_transform(tile: np.ndarray, contrast: float, brightness: float,
                    gamma: float) -> np.ndarray:
    """out = clip(contrast*in + brightness*255) then the gamma curve,
    applied uniformly across channels."""
    tile = _as_tile(tile).astype(np.float64)
    out = np.clip(contrast * tile + brightness * 255.0, 0.0, 255.0)
    out = 255.0 * (out / 255.0) ** gamma
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def noise_transform(tile: np.ndarray, variance: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, variance) per pixel per channel, clipped to [0, 255]."""
    tile = _as_tile(tile).astype(np.float64)
    if variance < 0:
        raise ArgumentError("variance must be nonnegative")
    noisy = tile + rng.normal(0.0, math.sqrt(variance), size=tile.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps with radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def elastic_transform(tile: np.ndarray, sigma: float, alpha: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Backward warp along a smoothed random displacement field.

    Raw per-pixel displacements are U(-1, 1), smoothed by a separable
    Gaussian (reflected borders), scaled by alpha, then bilinearly sampled
    with black fill. alpha bounds the displacement magnitude in pixels.
    """
    tile = _as_tile(tile)
    h, w = tile.shape[:2]
    field_x = rng.uniform(-1.0, 1.0, size=(h, w))
    field_y = rng.uniform(-1.0, 1.0, size=(h, w))
    if alpha == 0.0:
        return tile.copy()
    kernel = gaussian_kernel1d(sigma)
    field_x = correlate1d(correlate1d(field_x, kernel, axis=0, mode="reflect"),
                          kernel, axis=1, mode="reflect")
    field_y = correlate1d(correlate1d(field_y, kernel, axis=0, mode="reflect"),
                          kernel, axis=1, mode="reflect")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sampled = _bilinear_sample(tile, xs + alpha * field_x, ys + alpha * field_y)
    return np.clip(np.rint(sampled), 0, 255).astype(np.uint8)


def apply_geometric(tile: np.ndarray, params: AugmentParams,
                    rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    h, w = tile.shape[:2]
    angle = rng.uniform(-params.rotate_deg, params.rotate_deg)
    scale = rng.uniform(1.0 - params.scale_frac, 1.0 + params.scale_frac)
    shift_x = rng.uniform(-params.shift_frac, params.shift_frac) * w
    shift_y = rng.uniform(-params.shift_frac, params.shift_frac) * h
    drawn = {"rotate_deg": angle, "scale": scale, "shift_x": shift_x, "shift_y": shift_y}
    return geometric_transform(tile, angle, scale, shift_x, shift_y), drawn


def apply_color(tile: np.ndarray, params: AugmentParams,
                rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    contrast = rng.uniform(1.0 - params.contrast, 1.0 + params.contrast)
    brightness = rng.uniform(-params.brightness, params.brightness)
    gamma = rng.uniform(params.gamma_low, params.gamma_high)
    drawn = {"contrast": contrast, "brightness": brightness, "gamma": gamma}
    return color_transform(tile, contrast, brightness, gamma), drawn


def apply_noise(tile: np.ndarray, params: AugmentParams,
                rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    variance = rng.uniform(params.noise_var_low, params.noise_var_high)
    drawn = {"variance": variance}
    return noise_transform(tile, variance, rng), drawn


def apply_elastic(tile: np.ndarray, params: AugmentParams,
                  rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    drawn = {"sigma": params.elastic_sigma, "alpha": params.elastic_alpha}
    return elastic_transform(tile, params.elastic_sigma, params.elastic_alpha, rng), drawn


_APPLIERS = {
    "geo": apply_geometric,
    "color": apply_color,
    "noise": apply_noise,
    "deform": apply_elastic,
}


@dataclass(frozen=True)
class AugmentRecord:
    tile_id: str
    family: str
    params: dict
    tile: np.ndarray
    path: str


def make_copy_detection_set(tiles: list[tuple[str, np.ndarray]], families,
                            seed: int, params: AugmentParams = AugmentParams(),
                            out_dir: str | None = None) -> list[AugmentRecord]:
    """One augmented tile per (tile, family) with recorded provenance.

    When `out_dir` is given, tiles land at ``aug/<family>/<tile_id>.ppm``
    under it and ``aug_manifest.csv`` records tile_id,family,params_json,path.
    """
    unknown = [f for f in families if f not in FAMILIES]
    if unknown:
        raise ArgumentError(f"unknown families {unknown}; valid: {list(FAMILIES)}")
    records = []
    for tile_id, tile in tiles:
        for family in families:
            rng = stream(seed, tile_id, family)
            augmented, drawn = _APPLIERS[family](tile, params, rng)
            rel = os.path.join("aug", family, f"{tile_id}.ppm")
            records.append(AugmentRecord(tile_id=tile_id, family=family,
                                         params=drawn, tile=augmented, path=rel))
    if out_dir is not None:
        for record in records:
            dest = os.path.join(out_dir, record.path)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            write_ppm(dest, record.tile)
        manifest = os.path.join(out_dir, "aug_manifest.csv")
        with open(manifest, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tile_id", "family", "params_json", "path"])
            for record in records:
                writer.writerow([record.tile_id, record.family,
                                 json.dumps(record.params, sort_keys=True),
                                 record.path])
    return records
