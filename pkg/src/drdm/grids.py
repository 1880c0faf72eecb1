"""Spatiotemporal traffic grids, resolution ladders, and evaluation metrics.

A traffic field is a T x H x W array with the time axis outermost. Fields at
several resolutions form a ladder ordered coarse to fine, where every level is
an integer-factor block aggregation of the finest one. Ladders aggregate by
sum (traffic volume adds over area and time); mean-mode upsampling divides by
the block cardinality, so a sum-coarsening round trip is exact.

All operations here are pure functions over immutable inputs. Metric
accumulation happens in float64 regardless of the stored dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .validation import (
    DegenerateMatrixError,
    ShapeError,
    as_field,
    check_divisible,
    check_same_shape,
)


@dataclass(frozen=True)
class ResolutionLevel:
    """One rung of a resolution ladder.

    Scales are integer coarsening factors relative to the finest grid:
    ``spatial_scale`` cells per side and ``temporal_scale`` fine steps are
    aggregated into one cell at this level.
    """

    level_index: int
    spatial_scale: int
    temporal_scale: int
    label: str = ""

    def __post_init__(self):
        if self.level_index < 1:
            raise ValueError(f"level_index must be >= 1, got {self.level_index}")
        if self.spatial_scale < 1 or self.temporal_scale < 1:
            raise ValueError(
                f"scales must be >= 1, got spatial={self.spatial_scale} "
                f"temporal={self.temporal_scale}"
            )

    @property
    def block_cells(self) -> int:
        """Finest-grid cells aggregated into one cell at this level."""
        return self.temporal_scale * self.spatial_scale * self.spatial_scale


@dataclass(frozen=True)
class SpatioTemporalGrid:
    """A traffic field at one resolution level.

    ``data`` is (T, H, W); ``t0`` is the start index in finest time units.
    Ground-truth grids are nonnegative and finite; noisy diffusion states are
    unconstrained.
    """

    level: ResolutionLevel
    data: np.ndarray
    t0: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"grid data must be (T, H, W), got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class MultiScaleTraffic:
    """Ordered ladder of grids from coarsest (index 0) to finest."""

    levels: tuple[SpatioTemporalGrid, ...]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError(f"a ladder needs K >= 2 levels, got {len(self.levels)}")
        prev = None
        for g in self.levels:
            if prev is not None:
                if (
                    g.level.spatial_scale > prev.spatial_scale
                    or g.level.temporal_scale > prev.temporal_scale
                ):
                    raise ValueError("ladder levels must go coarse to fine")
            prev = g.level
        finest = self.levels[-1].level
        if finest.spatial_scale != 1 or finest.temporal_scale != 1:
            raise ValueError("the finest ladder level must have unit scales")

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> SpatioTemporalGrid:
        return self.levels[-1]

    def max_consistency_error(self) -> float:
        """Worst relative sum-aggregation error between adjacent levels."""
        worst = 0.0
        for coarse, fine in zip(self.levels, self.levels[1:]):
            ft = fine.level.temporal_scale
            fs = fine.level.spatial_scale
            agg = coarsen(
                fine,
                coarse.level.temporal_scale // ft,
                coarse.level.spatial_scale // fs,
                mode="sum",
            )
            denom = max(float(np.max(np.abs(coarse.data))), 1e-30)
            err = float(np.max(np.abs(agg.data.astype(np.float64) - coarse.data))) / denom
            worst = max(worst, err)
        return worst


def coarsen(
    grid: SpatioTemporalGrid,
    factor_t: int = 1,
    factor_s: int = 1,
    mode: str = "sum",
) -> SpatioTemporalGrid:
    """Block-aggregate a grid by integer factors along time and both space axes.

    ``mode="sum"`` adds volumes over each factor_t x factor_s x factor_s
    block; ``mode="mean"`` averages them. Factors must divide the respective
    axis sizes exactly.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown coarsen mode {mode!r}")
    t, h, w = grid.data.shape
    check_divisible(t, factor_t, "time")
    check_divisible(h, factor_s, "height")
    check_divisible(w, factor_s, "width")
    blocks = grid.data.astype(np.float64).reshape(
        t // factor_t, factor_t, h // factor_s, factor_s, w // factor_s, factor_s
    )
    if mode == "sum":
        out = blocks.sum(axis=(1, 3, 5))
    else:
        out = blocks.mean(axis=(1, 3, 5))
    level = replace(
        grid.level,
        spatial_scale=grid.level.spatial_scale * factor_s,
        temporal_scale=grid.level.temporal_scale * factor_t,
    )
    return SpatioTemporalGrid(level, out.astype(grid.data.dtype), t0=grid.t0)


def upsample(
    grid: SpatioTemporalGrid,
    factor_t: int = 1,
    factor_s: int = 1,
    mode: str = "replicate_mean",
) -> SpatioTemporalGrid:
    """Replicate a grid to a finer resolution by integer factors.

    ``replicate_mean`` divides each value by the block cardinality
    factor_t * factor_s**2 before replication, so that
    ``coarsen(upsample(x), mode="sum")`` recovers x. ``replicate_value``
    copies values unchanged. Level bookkeeping assumes the factors divide the
    level scales; otherwise scales floor at 1.
    """
    if mode not in ("replicate_mean", "replicate_value"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    if factor_t < 1 or factor_s < 1:
        raise ValueError("upsample factors must be >= 1")
    data = grid.data.astype(np.float64)
    if mode == "replicate_mean":
        data = data / float(factor_t * factor_s * factor_s)
    data = np.repeat(data, factor_t, axis=0)
    data = np.repeat(data, factor_s, axis=1)
    data = np.repeat(data, factor_s, axis=2)
    level = replace(
        grid.level,
        spatial_scale=max(1, grid.level.spatial_scale // factor_s),
        temporal_scale=max(1, grid.level.temporal_scale // factor_t),
    )
    return SpatioTemporalGrid(level, data.astype(grid.data.dtype), t0=grid.t0)


def mae(pred, truth) -> float:
    """Mean absolute error over all T*H*W cells."""
    p = as_field(pred, "pred")
    t = as_field(truth, "truth")
    check_same_shape(p, t, "metric inputs")
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    """Root mean squared error over all cells."""
    p = as_field(pred, "pred")
    t = as_field(truth, "truth")
    check_same_shape(p, t, "metric inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def sp_rmse(pred, truth) -> float:
    """RMSE of the time-averaged spatial maps (spatial-distribution fidelity)."""
    p = as_field(pred, "pred")
    t = as_field(truth, "truth")
    check_same_shape(p, t, "metric inputs")
    return float(np.sqrt(np.mean((p.mean(axis=0) - t.mean(axis=0)) ** 2)))


def psnr(pred, truth, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; returns math.inf when MSE is zero.

    ``peak`` is the maximum possible data value (per-dataset, stored in the
    dataset manifest).
    """
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    p = as_field(pred, "pred")
    t = as_field(truth, "truth")
    check_same_shape(p, t, "metric inputs")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rv_coefficient(gamma1: np.ndarray, gamma2: np.ndarray) -> float:
    """Gram-trace similarity between two data matrices, in [0, 1].

    Both matrices must have the same row count (columns may differ). The
    value is tr(G1 G2) / sqrt(tr(G1^2) tr(G2^2)) with G_i the Gram matrix
    of gamma_i; it is symmetric and invariant under nonzero scaling of
    either argument. Output is clipped to [0, 1] against rounding jitter.
    """
    g1 = np.asarray(gamma1, dtype=np.float64)
    g2 = np.asarray(gamma2, dtype=np.float64)
    if g1.ndim != 2 or g2.ndim != 2:
        raise ShapeError("rv_coefficient expects 2-d matrices")
    if g1.shape[0] != g2.shape[0]:
        raise ShapeError(
            f"matrices must share a row count, got {g1.shape[0]} vs {g2.shape[0]}"
        )
    gram1 = g1 @ g1.T
    gram2 = g2 @ g2.T
    d1 = float(np.sum(gram1 * gram1))
    d2 = float(np.sum(gram2 * gram2))
    if d1 == 0.0 or d2 == 0.0:
        raise DegenerateMatrixError("rv_coefficient is undefined for a zero Gram matrix")
    val = float(np.sum(gram1 * gram2)) / math.sqrt(d1 * d2)
    return min(1.0, max(0.0, val))
