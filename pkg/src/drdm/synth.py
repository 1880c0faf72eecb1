"""Synthetic city generation: urban context plus multi-scale ground-truth traffic.

A city couples four conditioning fields (surface/road classes, AoI classes, a
POI embedding, a population history) with a finest-level traffic field tied to
them by a fixed, documented law:

    traffic = softplus(w1 * population + w2 * poi_intensity
                       + w3 * surface_factor + w_noise * xi)

where ``xi`` is a smoothed static spatial field. AoI classes carry distinct
diurnal profiles (phase and amplitude), population is profile times a smoothed
density, so traffic at neighboring scales within one AoI stays strongly
correlated. The ladder is built by sum-aggregation from the finest level.

Generation is deterministic per (config, seed): every field draws from its own
named substream, and stored arrays are float32, so regeneration is
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .bundle import load_bundle, load_meta, save_bundle
from .grids import MultiScaleTraffic, ResolutionLevel, SpatioTemporalGrid, coarsen
from .rng import substream
from .validation import ShapeError, check_divisible, check_finite

N_SURFACE_CLASSES = 4
# Per surface class weight in the traffic law (indoor-low ... dense-road-high).
SURFACE_FACTORS = (0.2, 0.6, 1.0, 1.4)
# Weight of the shared stochastic spatial field in the traffic law.
NOISE_WEIGHT = 0.5
DIURNAL_PERIOD = 24
SURFACE_BLOCK = 4


@dataclass(frozen=True)
class CityConfig:
    """Synthesis parameters; see ``from_file`` for the key-value format."""

    h_fine: int = 32
    w_fine: int = 32
    t_fine: int = 48
    ladder: tuple[tuple[int, int], ...] = ((4, 4), (2, 2), (1, 1))
    aoi_classes: int = 5
    poi_dim: int = 8
    weights: tuple[float, float, float] = (1.0, 0.6, 0.4)
    amplitudes: tuple[float, ...] = (0.8, 0.3, 0.6, 0.45, 0.7)
    seed: int = 0

    def __post_init__(self):
        if len(self.amplitudes) != self.aoi_classes:
            raise ValueError(
                f"amplitudes needs one entry per AoI class "
                f"({self.aoi_classes}), got {len(self.amplitudes)}"
            )
        if any(abs(a) > 1.0 for a in self.amplitudes):
            raise ValueError("diurnal amplitudes must stay within [-1, 1]")
        if len(self.ladder) < 2:
            raise ValueError("ladder needs K >= 2 levels")
        if self.ladder[-1] != (1, 1):
            raise ValueError("the finest ladder level must be (1, 1)")

    @classmethod
    def from_file(cls, path) -> "CityConfig":
        """Parse a plain-text ``key = value`` file.

        Keys: h_fine, w_fine, t_fine, ladder, aoi_classes, poi_dim, weights,
        amplitudes, seed. ``ladder`` is space-separated ``SPATIALxTEMPORAL``
        pairs coarse to fine (e.g. ``4x4 2x2 1x1``); ``weights`` and
        ``amplitudes`` are comma-separated floats.
        """
        from .config import parse_kv_file

        raw = parse_kv_file(path)
        known = {
            "h_fine", "w_fine", "t_fine", "ladder", "aoi_classes",
            "poi_dim", "weights", "amplitudes", "seed",
        }
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown city config keys: {', '.join(unknown)}")
        kwargs: dict = {}
        for key in ("h_fine", "w_fine", "t_fine", "aoi_classes", "poi_dim", "seed"):
            if key in raw:
                kwargs[key] = int(raw[key])
        if "ladder" in raw:
            pairs = []
            for tok in raw["ladder"].replace(",", " ").split():
                s, t = tok.lower().split("x")
                pairs.append((int(s), int(t)))
            kwargs["ladder"] = tuple(pairs)
        if "weights" in raw:
            kwargs["weights"] = tuple(float(v) for v in raw["weights"].split(","))
        if "amplitudes" in raw:
            kwargs["amplitudes"] = tuple(float(v) for v in raw["amplitudes"].split(","))
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "h_fine": self.h_fine,
            "w_fine": self.w_fine,
            "t_fine": self.t_fine,
            "ladder": [list(p) for p in self.ladder],
            "aoi_classes": self.aoi_classes,
            "poi_dim": self.poi_dim,
            "weights": list(self.weights),
            "amplitudes": list(self.amplitudes),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class UrbanContext:
    """The four conditioning fields at the finest spatial resolution."""

    surface: np.ndarray      # (H, W) int class map
    aoi: np.ndarray          # (H, W) int class map
    poi: np.ndarray          # (d, H, W) float embedding
    population: np.ndarray   # (T, H, W) nonnegative history
    n_surface_classes: int = N_SURFACE_CLASSES
    n_aoi_classes: int = 5

    def __post_init__(self):
        h, w = self.surface.shape
        if self.aoi.shape != (h, w):
            raise ShapeError("surface and aoi maps must share shape")
        if self.poi.shape[1:] != (h, w) or self.population.shape[1:] != (h, w):
            raise ShapeError("poi and population must match the finest spatial shape")
        for name, arr, n in (("surface", self.surface, self.n_surface_classes),
                             ("aoi", self.aoi, self.n_aoi_classes)):
            if arr.min() < 0 or arr.max() >= n:
                raise ValueError(f"{name} classes must lie in [0, {n})")
        check_finite(self.population, "population")
        if self.population.min() < 0:
            raise ValueError("population must be nonnegative")

    @property
    def poi_dim(self) -> int:
        return self.poi.shape[0]


@dataclass(frozen=True)
class SyntheticCity:
    context: UrbanContext
    traffic: MultiScaleTraffic
    ladder_spec: tuple[ResolutionLevel, ...]
    seed: int
    psnr_peak: float
    config: CityConfig


def softplus(z: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + exp(z))."""
    return np.logaddexp(0.0, z)


def _smooth_axis(arr: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Length-k moving average along ``axis`` with edge padding."""
    if k <= 1:
        return arr
    moved = np.moveaxis(arr, axis, -1)
    left = k // 2
    right = k - 1 - left
    padded = np.concatenate(
        [np.repeat(moved[..., :1], left, axis=-1), moved,
         np.repeat(moved[..., -1:], right, axis=-1)],
        axis=-1,
    )
    csum = np.cumsum(padded, axis=-1)
    csum = np.concatenate([np.zeros_like(csum[..., :1]), csum], axis=-1)
    out = (csum[..., k:] - csum[..., :-k]) / k
    return np.moveaxis(out, -1, axis)


def _box_smooth(arr: np.ndarray, k: int) -> np.ndarray:
    """Separable box filter over the last two axes (edge-padded)."""
    out = _smooth_axis(arr.astype(np.float64), k, -2)
    return _smooth_axis(out, k, -1)


def make_levels(spec: Sequence[tuple[int, int]], labels: Sequence[str] | None = None
                ) -> tuple[ResolutionLevel, ...]:
    """Build ResolutionLevel objects from (spatial, temporal) factor pairs."""
    levels = []
    for idx, (ds, dt) in enumerate(spec, start=1):
        label = labels[idx - 1] if labels else f"L{idx}_s{ds}t{dt}"
        levels.append(ResolutionLevel(idx, ds, dt, label))
    return tuple(levels)


def build_ladder(fine: SpatioTemporalGrid, spec: Sequence[ResolutionLevel]
                 ) -> MultiScaleTraffic:
    """Aggregate a finest-level grid into the ladder described by ``spec``.

    ``spec`` is ordered coarse to fine, ends at unit factors, and every factor
    must divide the fine shape. Levels are sum-aggregations, so the ladder
    consistency invariant holds by construction.
    """
    if len(spec) < 2:
        raise ValueError(f"ladder spec needs K >= 2 levels, got {len(spec)}")
    if spec[-1].spatial_scale != 1 or spec[-1].temporal_scale != 1:
        raise ValueError("ladder spec must end at the (1, 1) level")
    prev = None
    for lv in spec:
        if prev is not None and (lv.spatial_scale > prev.spatial_scale
                                 or lv.temporal_scale > prev.temporal_scale):
            raise ValueError("ladder spec must be ordered coarse to fine")
        prev = lv
    t, h, w = fine.data.shape
    grids = []
    for lv in spec:
        check_divisible(t, lv.temporal_scale, "time")
        check_divisible(h, lv.spatial_scale, "height")
        check_divisible(w, lv.spatial_scale, "width")
        g = coarsen(fine, lv.temporal_scale, lv.spatial_scale, mode="sum")
        grids.append(SpatioTemporalGrid(lv, g.data, t0=fine.t0))
    return MultiScaleTraffic(tuple(grids))


def generate_city(config: CityConfig, seed: int) -> SyntheticCity:
    """Generate a deterministic synthetic city for (config, seed).

    Substreams: ``aoi`` (zone rectangles), ``surface`` (class blocks),
    ``poi`` (embedding field), ``population`` (density field), ``noise``
    (the shared static field xi in the traffic law).
    """
    h, w, t = config.h_fine, config.w_fine, config.t_fine
    n_aoi = config.aoi_classes

    aoi_rng = substream(seed, "aoi")
    aoi = np.zeros((h, w), dtype=np.int32)
    for _ in range(3 * n_aoi):
        cls = int(aoi_rng.integers(0, n_aoi))
        i0 = int(aoi_rng.integers(0, h))
        j0 = int(aoi_rng.integers(0, w))
        di = int(aoi_rng.integers(max(2, h // 8), max(3, h // 2)))
        dj = int(aoi_rng.integers(max(2, w // 8), max(3, w // 2)))
        aoi[i0: min(h, i0 + di), j0: min(w, j0 + dj)] = cls

    surf_rng = substream(seed, "surface")
    bh = (h + SURFACE_BLOCK - 1) // SURFACE_BLOCK
    bw = (w + SURFACE_BLOCK - 1) // SURFACE_BLOCK
    blocks = surf_rng.integers(0, N_SURFACE_CLASSES, size=(bh, bw))
    surface = np.repeat(np.repeat(blocks, SURFACE_BLOCK, 0), SURFACE_BLOCK, 1)
    surface = surface[:h, :w].astype(np.int32)

    poi_rng = substream(seed, "poi")
    poi = poi_rng.normal(0.0, 1.0, size=(config.poi_dim, h, w))
    poi = _box_smooth(poi, max(2, h // 8)).astype(np.float64)

    pop_rng = substream(seed, "population")
    density = _box_smooth(pop_rng.normal(0.0, 1.0, size=(h, w)), max(2, h // 4))
    density = softplus(2.5 * density)
    density = density / density.mean()

    # Per-class diurnal profile: unit mean, class-specific amplitude and phase.
    phases = 2.0 * math.pi * np.arange(n_aoi) / n_aoi
    amps = np.asarray(config.amplitudes, dtype=np.float64)
    tt = np.arange(t, dtype=np.float64)
    profiles = 1.0 + amps[:, None] * np.sin(
        2.0 * math.pi * tt[None, :] / DIURNAL_PERIOD + phases[:, None]
    )
    population = profiles[aoi].transpose(2, 0, 1) * density[None, :, :]

    noise_rng = substream(seed, "noise")
    xi = _box_smooth(noise_rng.normal(0.0, 1.0, size=(h, w)), max(2, h // 8))
    xi = xi / max(float(xi.std()), 1e-12)

    w1, w2, w3 = config.weights
    poi_intensity = poi.mean(axis=0)
    surface_factor = np.asarray(SURFACE_FACTORS, dtype=np.float64)[surface]
    env = (
        w1 * population
        + (w2 * poi_intensity + w3 * surface_factor + NOISE_WEIGHT * xi)[None, :, :]
    )
    fine_data = softplus(env).astype(np.float32)

    context = UrbanContext(
        surface=surface,
        aoi=aoi,
        poi=poi.astype(np.float32),
        population=population.astype(np.float32),
        n_surface_classes=N_SURFACE_CLASSES,
        n_aoi_classes=n_aoi,
    )
    levels = make_levels(config.ladder)
    fine_grid = SpatioTemporalGrid(levels[-1], fine_data)
    ladder = build_ladder(fine_grid, levels)
    ladder = MultiScaleTraffic(
        tuple(
            SpatioTemporalGrid(g.level, g.data.astype(np.float32), g.t0)
            for g in ladder.levels
        )
    )
    peak = float(fine_data.max())
    return SyntheticCity(context, ladder, levels, seed, peak, config)


def save_city(city: SyntheticCity, path) -> None:
    """Persist a city as a tensor bundle (float32 traffic, int32 class maps)."""
    tensors = {}
    for i, g in enumerate(city.traffic.levels):
        tensors[f"traffic_level_{i}"] = g.data.astype(np.float32)
    tensors["ctx_surface"] = city.context.surface.astype(np.int32)
    tensors["ctx_aoi"] = city.context.aoi.astype(np.int32)
    tensors["ctx_poi"] = city.context.poi.astype(np.float32)
    tensors["ctx_population"] = city.context.population.astype(np.float32)
    meta = {
        "schema": "drdm-city-v1",
        "seed": city.seed,
        "psnr_peak": city.psnr_peak,
        "ladder": [[lv.spatial_scale, lv.temporal_scale] for lv in city.ladder_spec],
        "labels": [lv.label for lv in city.ladder_spec],
        "n_surface_classes": city.context.n_surface_classes,
        "n_aoi_classes": city.context.n_aoi_classes,
        "config": city.config.to_dict(),
    }
    save_bundle(tensors, path, meta=meta)


def load_city(path) -> SyntheticCity:
    meta = load_meta(path)
    tensors = load_bundle(path)
    spec = tuple((int(s), int(t)) for s, t in meta["ladder"])
    levels = make_levels(spec, labels=meta.get("labels"))
    grids = tuple(
        SpatioTemporalGrid(lv, tensors[f"traffic_level_{i}"])
        for i, lv in enumerate(levels)
    )
    cfg = CityConfig(
        h_fine=int(meta["config"]["h_fine"]),
        w_fine=int(meta["config"]["w_fine"]),
        t_fine=int(meta["config"]["t_fine"]),
        ladder=spec,
        aoi_classes=int(meta["config"]["aoi_classes"]),
        poi_dim=int(meta["config"]["poi_dim"]),
        weights=tuple(meta["config"]["weights"]),
        amplitudes=tuple(meta["config"]["amplitudes"]),
        seed=int(meta["config"]["seed"]),
    )
    context = UrbanContext(
        surface=tensors["ctx_surface"],
        aoi=tensors["ctx_aoi"],
        poi=tensors["ctx_poi"],
        population=tensors["ctx_population"],
        n_surface_classes=int(meta["n_surface_classes"]),
        n_aoi_classes=int(meta["n_aoi_classes"]),
    )
    return SyntheticCity(
        context,
        MultiScaleTraffic(grids),
        levels,
        int(meta["seed"]),
        float(meta["psnr_peak"]),
        cfg,
    )


def iter_tiles(city: SyntheticCity, tile: int) -> Iterator[tuple[UrbanContext, SpatioTemporalGrid]]:
    """Yield disjoint tile-size spatial patches as (context, finest grid) pairs."""
    h, w = city.context.surface.shape
    check_divisible(h, tile, "height")
    check_divisible(w, tile, "width")
    fine = city.traffic.finest
    for i0 in range(0, h, tile):
        for j0 in range(0, w, tile):
            sl = (slice(i0, i0 + tile), slice(j0, j0 + tile))
            ctx = UrbanContext(
                surface=city.context.surface[sl],
                aoi=city.context.aoi[sl],
                poi=city.context.poi[:, sl[0], sl[1]],
                population=city.context.population[:, sl[0], sl[1]],
                n_surface_classes=city.context.n_surface_classes,
                n_aoi_classes=city.context.n_aoi_classes,
            )
            grid = SpatioTemporalGrid(fine.level, fine.data[:, sl[0], sl[1]], fine.t0)
            yield ctx, grid


def split_tiles(city: SyntheticCity, tile: int, holdout: int, seed: int
                ) -> tuple[list, list]:
    """Deterministic train/held-out split of a city's tiles.

    The split is spatial (disjoint patches); ``holdout`` tiles are selected by
    a seeded shuffle of tile indices.
    """
    tiles = list(iter_tiles(city, tile))
    if holdout < 0 or holdout >= len(tiles):
        raise ValueError(f"holdout must be in [0, {len(tiles)}), got {holdout}")
    order = substream(seed, "tile-split").permutation(len(tiles))
    held = sorted(order[:holdout].tolist())
    held_set = set(held)
    train = [tiles[i] for i in range(len(tiles)) if i not in held_set]
    held_out = [tiles[i] for i in held]
    return train, held_out


def dominant_aoi_bbox(aoi: np.ndarray) -> tuple[slice, slice]:
    """Bounding box rows/cols of the most frequent AoI class."""
    vals, counts = np.unique(aoi, return_counts=True)
    cls = int(vals[np.argmax(counts)])
    idx = np.argwhere(aoi == cls)
    (i0, j0), (i1, j1) = idx.min(axis=0), idx.max(axis=0)
    return slice(int(i0), int(i1) + 1), slice(int(j0), int(j1) + 1)
