"""Diffusion-step bookkeeping: stage plans, noise schedules, reverse variance.

Total steps N are partitioned into K stages by a resolution greediness
preference (RGP). Stage k occupies the half-open interval [N_k, N_{k-1}) with
N_0 = N and N_K = 0; stage 1 is the coarsest and sits at the noisy end of the
trajectory, stage K is the finest and ends at step 0.

Noise strength beta rises 0 -> 1 with n; the cumulative coefficient
alpha = 1 - beta multiplies the clean signal and falls 1 -> 0 accordingly.
With the continuous schedule (CN) beta = n / N globally; with the segmented
schedule (SN) beta ramps 0 -> 1 inside each stage, so every stage boundary is
a noise-free node. Interior alphas are clamped away from {0, 1} so per-step
ratios and the reverse variance stay finite; exact endpoint values appear
only at boundary steps, where the engine takes dedicated paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .grids import MultiScaleTraffic, ResolutionLevel, SpatioTemporalGrid, coarsen
from .validation import check_choice

STRATEGIES = ("uniform", "coarse_greedy", "fine_greedy")


class ScheduleError(ValueError):
    """A step index or plan argument is out of contract."""


@dataclass(frozen=True)
class ScheduleSpec:
    """Noise scheduling choices plus the interior alpha clamp."""

    intensity: str = "SN"      # CN: beta = n/N | SN: per-stage ramp
    adding: str = "SA"         # CA: finest data starts every stage | SA: own level
    denoising: str = "SD"      # CD: continue across stages | SD: restart from noise
    alpha_min: float = 1e-4
    alpha_max: float = 1.0 - 1e-4
    sigma_form: str = "paper"  # paper | ddpm_posterior

    def __post_init__(self):
        check_choice(self.intensity, ("CN", "SN"), "intensity")
        check_choice(self.adding, ("CA", "SA"), "adding")
        check_choice(self.denoising, ("CD", "SD"), "denoising")
        check_choice(self.sigma_form, ("paper", "ddpm_posterior"), "sigma_form")
        if not (0.0 < self.alpha_min < self.alpha_max < 1.0):
            raise ValueError(
                f"need 0 < alpha_min < alpha_max < 1, got "
                f"({self.alpha_min}, {self.alpha_max})"
            )

    @property
    def tag(self) -> str:
        return f"{self.intensity},{self.adding},{self.denoising}"


@dataclass(frozen=True)
class RGPPlan:
    """Partition of N steps into stages with per-stage resolution levels.

    ``boundaries`` is the strictly decreasing tuple (N_1, ..., N_K) ending at
    0; ``stage_levels`` pairs each stage with its resolution, coarse to fine.
    """

    total_steps: int
    boundaries: tuple[int, ...]
    stage_levels: tuple[ResolutionLevel, ...]
    strategy: str = "fine_greedy"

    def __post_init__(self):
        n = self.total_steps
        b = self.boundaries
        if n < 1:
            raise ScheduleError(f"total_steps must be >= 1, got {n}")
        if len(b) != len(self.stage_levels):
            raise ScheduleError("one boundary per stage is required")
        if b[-1] != 0:
            raise ScheduleError("the last boundary must be 0")
        prev = n
        for nk in b:
            if not (0 <= nk < prev):
                raise ScheduleError(f"boundaries must decrease strictly below N, got {b}")
            prev = nk
        lv_prev = None
        for lv in self.stage_levels:
            if lv_prev is not None and (
                lv.spatial_scale > lv_prev.spatial_scale
                or lv.temporal_scale > lv_prev.temporal_scale
            ):
                raise ScheduleError("stage resolutions must go coarse to fine")
            lv_prev = lv

    @property
    def stages(self) -> int:
        return len(self.boundaries)

    def stage_interval(self, k: int) -> tuple[int, int]:
        """Half-open step interval [lo, hi) of stage k (1-based)."""
        if not 1 <= k <= self.stages:
            raise ScheduleError(f"stage {k} outside [1, {self.stages}]")
        lo = self.boundaries[k - 1]
        hi = self.total_steps if k == 1 else self.boundaries[k - 2]
        return lo, hi

    def level_of_stage(self, k: int) -> ResolutionLevel:
        return self.stage_levels[k - 1]


def plan_rgp(
    spatial_levels,
    temporal_levels,
    total_steps: int,
    strategy: str = "fine_greedy",
) -> RGPPlan:
    """Build a stage plan from per-dimension factor lists (coarse to fine).

    Greedy strategies use K = max(level counts); the shorter dimension
    finishes refining early (fine_greedy) or starts late (coarse_greedy).
    Uniform refines one dimension per stage, temporal first, giving
    K = |spatial| + |temporal| - 1. Boundaries split the steps evenly and
    every stage must get at least 2 steps.
    """
    check_choice(strategy, STRATEGIES, "strategy")
    sp = [int(v) for v in spatial_levels]
    tp = [int(v) for v in temporal_levels]
    for name, seq in (("spatial", sp), ("temporal", tp)):
        if not seq:
            raise ScheduleError(f"{name} level list is empty")
        if any(v < 1 for v in seq):
            raise ScheduleError(f"{name} factors must be >= 1")
        if any(a < b for a, b in zip(seq, seq[1:])):
            raise ScheduleError(f"{name} factors must be non-increasing")
        if seq[-1] != 1:
            raise ScheduleError(f"{name} factors must end at 1 (the finest level)")

    if strategy == "uniform":
        pairs = [(sp[0], tp[0])]
        si, ti = 0, 0
        turn_temporal = True
        while si < len(sp) - 1 or ti < len(tp) - 1:
            if turn_temporal and ti < len(tp) - 1:
                ti += 1
            elif si < len(sp) - 1:
                si += 1
            else:
                ti += 1
            pairs.append((sp[si], tp[ti]))
            turn_temporal = not turn_temporal
    else:
        k_total = max(len(sp), len(tp))
        pairs = []
        for k in range(1, k_total + 1):
            if strategy == "fine_greedy":
                s_idx = min(k, len(sp)) - 1
                t_idx = min(k, len(tp)) - 1
            else:
                s_idx = max(1, len(sp) - (k_total - k)) - 1
                t_idx = max(1, len(tp) - (k_total - k)) - 1
            pairs.append((sp[s_idx], tp[t_idx]))

    k_total = len(pairs)
    if k_total < 2:
        raise ScheduleError("a plan needs K >= 2 stages; add resolution levels")
    if total_steps < 2 * k_total:
        raise ScheduleError(
            f"N={total_steps} is too small for {k_total} stages of >= 2 steps"
        )
    boundaries = tuple(total_steps * (k_total - k) // k_total for k in range(1, k_total + 1))
    levels = tuple(
        ResolutionLevel(k, ds, dt, label=f"L{k}_s{ds}t{dt}")
        for k, (ds, dt) in enumerate(pairs, start=1)
    )
    return RGPPlan(total_steps, boundaries, levels, strategy)


def stage_of(plan: RGPPlan, n: int) -> int:
    """The unique stage whose half-open interval contains step n."""
    if not 0 <= n < plan.total_steps:
        raise ScheduleError(f"step {n} outside [0, {plan.total_steps})")
    for k in range(1, plan.stages + 1):
        if n >= plan.boundaries[k - 1]:
            return k
    raise AssertionError("interval tiling failure")  # pragma: no cover


def noise_level_in_stage(plan: RGPPlan, spec: ScheduleSpec, n: int, k: int) -> float:
    """Noise strength beta at step n as scheduled inside stage k.

    Valid for n in the closed interval [N_k, N_{k-1}]; the coarse endpoint
    belongs to the previous stage for indexing purposes but is the pure-noise
    top of stage k's own ramp.
    """
    lo, hi = plan.stage_interval(k)
    if not lo <= n <= hi:
        raise ScheduleError(f"step {n} outside stage {k} range [{lo}, {hi}]")
    if spec.intensity == "CN":
        return n / plan.total_steps
    return (n - lo) / (hi - lo)


def noise_level(plan: RGPPlan, spec: ScheduleSpec, n: int) -> float:
    """Noise strength beta at step n; n == N is the pure-noise endpoint."""
    if n == plan.total_steps:
        return 1.0
    return noise_level_in_stage(plan, spec, n, stage_of(plan, n))


def _alpha_from_beta(beta: float, spec: ScheduleSpec) -> float:
    if beta == 0.0:
        return 1.0
    if beta == 1.0:
        return 0.0
    return min(max(1.0 - beta, spec.alpha_min), spec.alpha_max)


def alpha(plan: RGPPlan, spec: ScheduleSpec, n: int) -> float:
    """Cumulative signal coefficient 1 - beta, with the interior clamp applied."""
    return _alpha_from_beta(noise_level(plan, spec, n), spec)


def alpha_in_stage(plan: RGPPlan, spec: ScheduleSpec, n: int, k: int) -> float:
    """Stage-local alpha; exact 1 at the stage's fine boundary, 0 at its top."""
    return _alpha_from_beta(noise_level_in_stage(plan, spec, n, k), spec)


def _alpha_at(plan: RGPPlan, spec: ScheduleSpec, m: int, k: int) -> float:
    """Alpha for sigma evaluation; CN is global in m, SN is stage-local."""
    if spec.intensity == "CN":
        return _alpha_from_beta(m / plan.total_steps, spec)
    return alpha_in_stage(plan, spec, m, k)


def sigma_in_stage(plan: RGPPlan, spec: ScheduleSpec, n: int, k: int) -> float:
    """Reverse-step noise scale for the update indexed by n inside stage k.

    Zero at the terminal update of a stage (the one landing on its boundary),
    so extracted boundary states are deterministic.
    """
    lo, hi = plan.stage_interval(k)
    if not lo + 1 <= n <= hi:
        raise ScheduleError(f"update step {n} outside stage {k} range [{lo + 1}, {hi}]")
    if n - 1 == lo:
        return 0.0
    a_n = _alpha_at(plan, spec, n, k)
    a_1 = _alpha_at(plan, spec, n - 1, k)
    if spec.sigma_form == "paper":
        a_2 = _alpha_at(plan, spec, n - 2, k)
        hat_prev = a_1 / a_2
        return math.sqrt(max(0.0, 1.0 - hat_prev)) * (1.0 - a_1) / (1.0 - a_n)
    hat = a_n / a_1
    return math.sqrt(max(0.0, (1.0 - hat) * (1.0 - a_1) / (1.0 - a_n)))


def sigma(plan: RGPPlan, spec: ScheduleSpec, n: int) -> float:
    """Reverse-step noise scale at step n within its own stage."""
    if n == plan.total_steps:
        k = 1
    else:
        k = stage_of(plan, n)
        lo, _ = plan.stage_interval(k)
        if n == lo:
            return 0.0
    return sigma_in_stage(plan, spec, n, k)


def noising_start(plan: RGPPlan, spec: ScheduleSpec, n: int,
                  ladder: MultiScaleTraffic | list) -> SpatioTemporalGrid:
    """The clean field that noise is added onto at step n.

    SA uses the ladder's own level for the step's stage. CA renders the
    finest field at the stage's resolution as a mean-preserving coarsening
    (block means), keeping values at finest-cell scale.
    """
    k = stage_of(plan, n)
    levels = list(getattr(ladder, "levels", ladder))
    if len(levels) != plan.stages:
        raise ScheduleError(
            f"ladder has {len(levels)} levels but the plan has {plan.stages} stages"
        )
    lv = plan.level_of_stage(k)
    grid = levels[k - 1]
    if (grid.level.spatial_scale, grid.level.temporal_scale) != (
        lv.spatial_scale, lv.temporal_scale
    ):
        raise ScheduleError(f"ladder level {k} does not match the plan's stage level")
    if spec.adding == "SA":
        return grid
    fine = levels[-1]
    return SpatioTemporalGrid(
        lv,
        coarsen(fine, lv.temporal_scale, lv.spatial_scale, mode="mean").data,
        t0=fine.t0,
    )


def schedule_table(plan: RGPPlan, spec: ScheduleSpec) -> list[tuple[int, int, float, float, float]]:
    """Rows (n, stage, beta, alpha, sigma) for n = 0 .. N-1, for CSV dumps."""
    rows = []
    for n in range(plan.total_steps):
        k = stage_of(plan, n)
        rows.append(
            (n, k, noise_level(plan, spec, n), alpha(plan, spec, n), sigma(plan, spec, n))
        )
    return rows
