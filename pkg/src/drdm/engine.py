"""Training and sampling for the multi-stage refinement diffusion chain.

The forward pass noises a stage's own start field toward pure noise; the
reverse pass walks the N steps stage by stage, coarse to fine, and the state
recorded at each stage boundary is that stage's output. The coarse prior
enters through the fused noise term of the reverse update and through the
training loss, never through the state construction, so boundary states stay
exact under segmented schedules.

During training the prior is teacher-forced from the true coarser level;
during sampling it comes from the previous stage's generated boundary output
(optionally overridden with true levels for exposure-gap evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import (
    ConditionSeries,
    DenoiserConfig,
    block_mean_adjoint,
    condition_series,
    encode_uec,
    encode_uec_backward,
    fusion_view,
    predict_noise,
    predict_noise_backward,
    zero_grads,
)
from .grids import MultiScaleTraffic, ResolutionLevel, SpatioTemporalGrid, upsample
from .guidance import GuidanceConfig, fuse_noise, fuse_noise_backward, prior_noise
from .rng import substream
from .schedule import (
    RGPPlan,
    ScheduleSpec,
    alpha_in_stage,
    noising_start,
    sigma_in_stage,
    stage_of,
)
from .synth import UrbanContext
from .validation import ShapeError


class EngineError(RuntimeError):
    """A sampling chain produced an invalid state."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


Predictor = Callable[[np.ndarray, int, int], np.ndarray]


@dataclass(frozen=True)
class DiffusionState:
    value: np.ndarray
    step: int
    stage: int


@dataclass(frozen=True)
class TrainSample:
    levels: tuple[SpatioTemporalGrid, ...]  # plan-aligned ladder (chain space)
    context: UrbanContext
    step: int
    eps: np.ndarray


@dataclass(frozen=True)
class TrainingBatch:
    items: tuple[TrainSample, ...]


@dataclass
class SampleResult:
    levels: list[SpatioTemporalGrid]
    forward_passes: int
    boundary_steps: list[int]
    trace: list[tuple] = field(default_factory=list)

    @property
    def ladder(self) -> MultiScaleTraffic:
        return MultiScaleTraffic(tuple(self.levels))


def _clip_interior(a: float, spec: ScheduleSpec) -> float:
    return min(max(a, spec.alpha_min), spec.alpha_max)


def hnap_forward(levels: Sequence[SpatioTemporalGrid], plan: RGPPlan,
                 spec: ScheduleSpec, n: int, eps: np.ndarray) -> DiffusionState:
    """Noised state at step n: sqrt(a) * stage_start + sqrt(1-a) * eps.

    ``n == N`` is the pure-noise endpoint (the state equals eps exactly); at
    segmented-schedule stage boundaries the state equals the stage's start
    field exactly.
    """
    if n == plan.total_steps:
        if eps.shape != levels[0].data.shape:
            raise ShapeError("eps must match the coarsest stage shape at n == N")
        return DiffusionState(np.asarray(eps, dtype=np.float64).copy(), n, 1)
    k = stage_of(plan, n)
    start = noising_start(plan, spec, n, levels)
    if eps.shape != start.data.shape:
        raise ShapeError(
            f"eps shape {eps.shape} does not match stage {k} shape {start.data.shape}"
        )
    a = alpha_in_stage(plan, spec, n, k)
    value = math.sqrt(a) * start.data.astype(np.float64) + math.sqrt(1.0 - a) * eps
    return DiffusionState(value, n, k)


def reverse_update(x: np.ndarray, fused: np.ndarray, a_n: float, a_prev: float,
                   sigma: float, noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step from alpha a_n to a_prev given the fused noise term."""
    hat = a_n / a_prev
    coef = (1.0 - hat) / math.sqrt(1.0 - a_n)
    out = (x - coef * fused) / math.sqrt(hat)
    if sigma > 0.0 and noise is not None:
        out = out + sigma * noise
    return out


def make_training_batch(data: Sequence[tuple], plan: RGPPlan, spec: ScheduleSpec,
                        rng: np.random.Generator, size: int) -> TrainingBatch:
    """Draw (sample, step, noise) items uniformly.

    Steps are uniform over [0, N) minus the exact noise-free boundary steps,
    which carry no noise to predict and whose prior ratio is unbounded; this
    keeps stage weighting proportional to the step allocation.
    """
    boundary = {
        plan.boundaries[k - 1]
        for k in range(1, plan.stages + 1)
        if spec.intensity == "SN" or plan.boundaries[k - 1] == 0
    }
    items = []
    while len(items) < size:
        idx = int(rng.integers(0, len(data)))
        n = int(rng.integers(0, plan.total_steps))
        if n in boundary:
            continue
        levels, ctx = data[idx]
        k = stage_of(plan, n)
        eps = rng.standard_normal(levels[k - 1].data.shape)
        items.append(TrainSample(tuple(levels), ctx, n, eps))
    return TrainingBatch(tuple(items))


def _signed_prior(levels, k: int, plan: RGPPlan, spec: ScheduleSpec,
                  guidance: GuidanceConfig, n: int, shape) -> np.ndarray | None:
    """Teacher-forced prior tensor for stage k at step n, sign applied."""
    if not guidance.enabled or k == 1:
        return None
    a = _clip_interior(alpha_in_stage(plan, spec, n, k), spec)
    p = prior_noise(levels[k - 2], a, k, plan.level_of_stage(k), shape,
                    mode=guidance.upsample_mode)
    return guidance.sign * p.tensor


def training_step(batch: TrainingBatch, params: dict, dconfig: DenoiserConfig,
                  plan: RGPPlan, spec: ScheduleSpec, guidance: GuidanceConfig,
                  predictor: Predictor | None = None):
    """Batch loss and gradients for the prior-fused noise-prediction objective.

    Per item the loss is the mean squared difference between the fused noise
    estimate and the sampled noise. With ``predictor`` given (an oracle), the
    network is bypassed and gradients cover only the fusion parameters.
    """
    grads = zero_grads(params)
    total = 0.0
    bsz = len(batch.items)
    for idx, item in enumerate(batch.items):
        state = hnap_forward(item.levels, plan, spec, item.step, item.eps)
        k = state.stage
        lv = plan.level_of_stage(k)
        if predictor is None:
            ctx_latent, uec_cache = encode_uec(params, dconfig, item.context)
            cond = condition_series(ctx_latent, plan, params, dconfig,
                                    t0=item.levels[-1].t0)
            eps_hat, net_cache = predict_noise(params, dconfig, state.value,
                                               item.step, cond.for_stage(k))
        else:
            eps_hat = predictor(state.value, item.step, k)
        p_signed = _signed_prior(item.levels, k, plan, spec, guidance,
                                 item.step, state.value.shape)
        if guidance.enabled and "fuse_w_eps" in params:
            p_term = p_signed if p_signed is not None else np.zeros_like(eps_hat)
            fused = fuse_noise(eps_hat, p_term, fusion_view(params))
        else:
            p_term = None
            fused = eps_hat
        res = fused - item.eps
        item_loss = float(np.mean(res * res))
        if not math.isfinite(item_loss):
            raise TrainingDivergedError(f"non-finite loss at batch item {idx}")
        total += item_loss

        dfused = (2.0 / res.size / bsz) * res
        if p_term is not None:
            deps, fgrads = fuse_noise_backward(dfused, eps_hat, p_term,
                                               fusion_view(params))
            for name, g in fgrads.items():
                grads[name] += g
        else:
            deps = dfused
        if predictor is None:
            dc_k = predict_noise_backward(deps, net_cache, params, dconfig, grads)
            dc = block_mean_adjoint(dc_k, lv.temporal_scale, lv.spatial_scale)
            encode_uec_backward(dc, uec_cache, params, grads)
    return total / bsz, grads


def _net_predictor(params: dict, dconfig: DenoiserConfig,
                   cond: ConditionSeries) -> Predictor:
    def run(x: np.ndarray, n: int, k: int) -> np.ndarray:
        out, _ = predict_noise(params, dconfig, x, n, cond.for_stage(k))
        return out
    return run


def _run_stages(
    params: dict,
    dconfig: DenoiserConfig,
    cond: ConditionSeries,
    plan: RGPPlan,
    spec: ScheduleSpec,
    guidance: GuidanceConfig,
    rng: np.random.Generator,
    stages: Sequence[int],
    init_prior: SpatioTemporalGrid | None,
    init_state: SpatioTemporalGrid | None,
    true_prior_levels: Sequence[SpatioTemporalGrid] | None,
    predictor: Predictor | None,
    sigma_override: float | None,
    collect_trace: bool,
) -> SampleResult:
    if predictor is None:
        predictor = _net_predictor(params, dconfig, cond)
    outputs: list[SpatioTemporalGrid] = []
    trace: list[tuple] = []
    passes = 0
    prev_grid = init_state
    prior_grid = init_prior
    for k in stages:
        lo, hi = plan.stage_interval(k)
        lv = plan.level_of_stage(k)
        shape = cond.for_stage(k).context.shape[1:]
        if spec.denoising == "SD" or prev_grid is None:
            x = rng.standard_normal(shape)
        else:
            ft = prev_grid.level.temporal_scale // lv.temporal_scale
            fs = prev_grid.level.spatial_scale // lv.spatial_scale
            x = upsample(prev_grid, ft, fs, mode="replicate_value").data.astype(np.float64)
        if true_prior_levels is not None and k > stages[0]:
            prior_grid = true_prior_levels[k - 2]
        for n in range(hi, lo, -1):
            a_n = alpha_in_stage(plan, spec, n, k)
            if a_n <= 0.0:
                a_n = spec.alpha_min
            a_prev = alpha_in_stage(plan, spec, n - 1, k)
            if guidance.enabled and prior_grid is not None:
                p = prior_noise(prior_grid, _clip_interior(a_n, spec), k, lv, shape,
                                mode=guidance.upsample_mode)
                p_term = guidance.sign * p.tensor
            else:
                p_term = None
            eps_hat = predictor(x, n, k)
            passes += 1
            if guidance.enabled and "fuse_w_eps" in params:
                term = p_term if p_term is not None else np.zeros_like(eps_hat)
                fused = fuse_noise(eps_hat, term, fusion_view(params))
            elif p_term is not None:
                fused = eps_hat + p_term
            else:
                fused = eps_hat
            sig = sigma_in_stage(plan, spec, n, k)
            if sigma_override is not None:
                sig = sigma_override
            noise = rng.standard_normal(shape) if sig > 0.0 else None
            x = reverse_update(x, fused, a_n, a_prev, sig, noise)
            if not np.all(np.isfinite(x)):
                raise EngineError(f"non-finite state at step {n} (stage {k})")
            if collect_trace:
                beta = 1.0 - a_n
                trace.append((n, k, beta, a_n, sig, float(np.sqrt(np.mean(x * x)))))
        out = SpatioTemporalGrid(lv, x, t0=0)
        outputs.append(out)
        prev_grid = out
        if true_prior_levels is None:
            prior_grid = out
    return SampleResult(
        levels=outputs,
        forward_passes=passes,
        boundary_steps=[plan.boundaries[k - 1] for k in stages],
        trace=trace,
    )


def rrdp_sample(
    params: dict,
    dconfig: DenoiserConfig,
    cond: ConditionSeries,
    plan: RGPPlan,
    spec: ScheduleSpec,
    guidance: GuidanceConfig,
    seed: int,
    true_prior_levels: Sequence[SpatioTemporalGrid] | None = None,
    predictor: Predictor | None = None,
    sigma_override: float | None = None,
    collect_trace: bool = False,
) -> SampleResult:
    """Run the reverse chain over all stages and extract every boundary state.

    Stage sub-chains restart from fresh noise under SD; under CD the previous
    terminal state continues, upsampled by value replication. The prior for
    stage k comes from stage k-1's generated output, or from
    ``true_prior_levels`` when supplied (exposure-gap evaluation).
    """
    rng = substream(seed, "rrdp")
    return _run_stages(
        params, dconfig, cond, plan, spec, guidance, rng,
        stages=list(range(1, plan.stages + 1)),
        init_prior=None, init_state=None,
        true_prior_levels=true_prior_levels,
        predictor=predictor, sigma_override=sigma_override,
        collect_trace=collect_trace,
    )


def single_stage_plan(total_steps: int, level: ResolutionLevel) -> RGPPlan:
    """A one-stage plan at a fixed level (the canonical chain's bookkeeping)."""
    return RGPPlan(total_steps, (0,), (level,), strategy="fine_greedy")


def canonical_sample(
    params: dict,
    dconfig: DenoiserConfig,
    cond_finest,
    total_steps: int,
    seed: int,
    spec: ScheduleSpec | None = None,
    record_at: Sequence[int] = (),
    predictor: Predictor | None = None,
    sigma_override: float | None = None,
    collect_trace: bool = False,
):
    """Single-resolution reverse chain at the finest level.

    ``cond_finest`` is a StageConditioning at the finest level (or a
    ConditionSeries whose last stage is used). Intermediate states at
    ``record_at`` steps are captured (noisy) for comparison plots. Returns
    (finest grid, recorded dict, forward passes, trace).
    """
    stage = cond_finest.stages[-1] if isinstance(cond_finest, ConditionSeries) \
        else cond_finest
    plan = single_stage_plan(total_steps, stage.level)
    base = spec or ScheduleSpec()
    cspec = ScheduleSpec("CN", "CA", "CD", base.alpha_min, base.alpha_max,
                         base.sigma_form)
    series = ConditionSeries((stage,))
    rng = substream(seed, "rrdp")
    if predictor is None:
        predictor = _net_predictor(params, dconfig, series)
    record = set(int(v) for v in record_at)
    recorded: dict[int, np.ndarray] = {}
    shape = stage.context.shape[1:]
    x = rng.standard_normal(shape)
    passes = 0
    trace: list[tuple] = []
    use_fusion = "fuse_w_eps" in params
    for n in range(total_steps, 0, -1):
        a_n = alpha_in_stage(plan, cspec, n, 1)
        if a_n <= 0.0:
            a_n = cspec.alpha_min
        a_prev = alpha_in_stage(plan, cspec, n - 1, 1)
        eps_hat = predictor(x, n, 1)
        passes += 1
        if use_fusion:
            fused = fuse_noise(eps_hat, np.zeros_like(eps_hat), fusion_view(params))
        else:
            fused = eps_hat
        sig = sigma_in_stage(plan, cspec, n, 1)
        if sigma_override is not None:
            sig = sigma_override
        noise = rng.standard_normal(shape) if sig > 0.0 else None
        x = reverse_update(x, fused, a_n, a_prev, sig, noise)
        if not np.all(np.isfinite(x)):
            raise EngineError(f"non-finite state at step {n}")
        if collect_trace:
            trace.append((n, 1, 1.0 - a_n, a_n, sig, float(np.sqrt(np.mean(x * x)))))
        if n - 1 in record:
            recorded[n - 1] = x.copy()
    grid = SpatioTemporalGrid(stage.level, x, t0=0)
    return grid, recorded, passes, trace


def refine_zero_shot(
    params: dict,
    dconfig: DenoiserConfig,
    coarse: SpatioTemporalGrid,
    cond: ConditionSeries,
    plan: RGPPlan,
    spec: ScheduleSpec,
    guidance: GuidanceConfig,
    seed: int,
    predictor: Predictor | None = None,
) -> SampleResult:
    """Resume the reverse chain below a known coarse field.

    The coarse grid must match some stage j's resolution; stages 1..j are
    skipped, the prior pathway is seeded with the given field, and only
    stages j+1..K run. The finest output is the last level of the result.
    """
    j = None
    for k in range(1, plan.stages + 1):
        lv = plan.level_of_stage(k)
        if (lv.spatial_scale, lv.temporal_scale) == (
            coarse.level.spatial_scale, coarse.level.temporal_scale
        ):
            j = k
            break
    if j is None or j == plan.stages:
        raise ShapeError(
            "coarse grid must match a non-final stage resolution of the plan"
        )
    rng = substream(seed, "refine")
    return _run_stages(
        params, dconfig, cond, plan, spec, guidance, rng,
        stages=list(range(j + 1, plan.stages + 1)),
        init_prior=coarse, init_state=coarse,
        true_prior_levels=None,
        predictor=predictor, sigma_override=None,
        collect_trace=False,
    )


def training_loss_fn(batch: TrainingBatch, dconfig: DenoiserConfig, plan: RGPPlan,
                     spec: ScheduleSpec, guidance: GuidanceConfig):
    """Deterministic (loss, grads) closure over a fixed batch, for grad checks."""
    def run(params: dict):
        return training_step(batch, params, dconfig, plan, spec, guidance)
    return run


def gradcheck_fixture(seed: int = 0, stage: str = "fine",
                      spec: ScheduleSpec | None = None,
                      guidance: GuidanceConfig | None = None):
    """Deterministic 2x4x4 fixture for gradient checks.

    The output layer is randomized away from its zero initialization so every
    upstream block receives gradient; ``stage`` selects whether the sampled
    step sits in the fine or the coarse stage (the coarse-stage spatial
    encoding only gets gradient from a coarse-stage sample). Returns
    (params, loss_and_grads callable).
    """
    from .denoiser import init_denoiser
    from .synth import build_ladder

    rng = substream(seed, "gradcheck-fixture")
    t, h, w = 2, 4, 4
    dconfig = DenoiserConfig(embed_dim=8, trunk_channels=8, n_surface_classes=3,
                             n_aoi_classes=3, poi_dim=2)
    guidance = guidance or GuidanceConfig(latent_dim=4)
    spec = spec or ScheduleSpec()
    levels = (ResolutionLevel(1, 2, 2, "coarse"), ResolutionLevel(2, 1, 1, "fine"))
    plan = RGPPlan(8, (4, 0), levels)
    params = init_denoiser(dconfig, guidance, levels, (h, w), seed)
    params["out_w"] = 0.3 * rng.normal(size=params["out_w"].shape)
    params["out_b"] = 0.1 * rng.normal(size=params["out_b"].shape)
    ctx = UrbanContext(
        surface=rng.integers(0, 3, size=(h, w)).astype(np.int32),
        aoi=rng.integers(0, 3, size=(h, w)).astype(np.int32),
        poi=rng.normal(size=(2, h, w)),
        population=np.abs(rng.normal(size=(t, h, w))),
        n_surface_classes=3,
        n_aoi_classes=3,
    )
    fine = SpatioTemporalGrid(levels[1], rng.normal(size=(t, h, w)))
    ladder = build_ladder(fine, levels)
    data = [(tuple(ladder.levels), ctx)]
    want = (lambda n: n < 4) if stage == "fine" else (lambda n: n >= 4)
    batch = None
    for _ in range(200):
        cand = make_training_batch(data, plan, spec, rng, size=1)
        if want(cand.items[0].step):
            batch = cand
            break
    assert batch is not None
    return params, training_loss_fn(batch, dconfig, plan, spec, guidance)
