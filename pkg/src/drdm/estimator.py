"""Scikit-learn style estimator around the multi-stage diffusion engine.

``MultiScaleDiffusion`` is fit on (context, finest traffic) pairs and then
samples whole resolution ladders conditioned on new contexts. It follows the
usual estimator conventions: constructor arguments are stored verbatim,
learned state carries a trailing underscore, ``get_params``/``set_params``
come from ``sklearn.base.BaseEstimator``, and ``fit`` returns ``self``.

Internally each training field is converted to its chain representation:
every ladder level is divided by its block cardinality (a per-finest-cell
mean rendition) and standardized with one shared mean/scale, so all stages
see O(1) data against unit noise and adjacent levels stay block-mean
consistent. Priors are therefore upsampled by value replication in chain
space. Outputs are mapped back to raw volumes on extraction.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator

from .denoiser import (
    DenoiserConfig,
    condition_series,
    encode_uec,
    init_denoiser,
    param_count,
)
from .engine import (
    make_training_batch,
    refine_zero_shot,
    rrdp_sample,
    training_step,
)
from .denoiser import apply_update
from .grids import MultiScaleTraffic, SpatioTemporalGrid, mae
from .guidance import GuidanceConfig
from .rng import substream
from .schedule import RGPPlan, ScheduleSpec, plan_rgp
from .synth import UrbanContext, build_ladder
from .validation import ShapeError, as_field


class MultiScaleDiffusion(BaseEstimator):
    """Conditional generator of multi-resolution traffic fields.

    Parameters
    ----------
    spatial_factors, temporal_factors:
        Per-dimension coarsening factors, coarse to fine, ending at 1.
    steps:
        Total diffusion steps N.
    strategy:
        Stage allocation: "uniform", "coarse_greedy" or "fine_greedy".
    intensity, adding, denoising:
        Noise schedule selectors (CN/SN, CA/SA, CD/SD).
    sigma_form:
        Reverse-variance formula variant ("paper" or "ddpm_posterior").
    prior_dim:
        Latent width D of the noise fusion; 0 disables prior guidance.
    prior_sign:
        "plus" fuses prediction + prior, "minus" fuses prediction - prior.
    prior_mode:
        Upsampling used for priors; chain space is mean renditions, so the
        default is value replication.
    use_tpe, use_spe:
        Positional-encoding ablation switches.
    embed_dim, trunk_channels:
        Network widths.
    epochs, batch_size, learning_rate, momentum:
        Plain SGD-with-momentum training budget.
    random_state:
        Base seed for initialization, batch order, and default sampling.
    """

    def __init__(
        self,
        spatial_factors=(4, 2, 1),
        temporal_factors=(4, 2, 1),
        steps: int = 300,
        strategy: str = "fine_greedy",
        intensity: str = "SN",
        adding: str = "SA",
        denoising: str = "SD",
        sigma_form: str = "paper",
        alpha_min: float = 1e-4,
        alpha_max: float = 1.0 - 1e-4,
        prior_dim: int = 32,
        prior_sign: str = "plus",
        prior_mode: str = "replicate_value",
        use_tpe: bool = True,
        use_spe: bool = True,
        embed_dim: int = 32,
        trunk_channels: int = 32,
        epochs: int = 20,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        momentum: float = 0.9,
        random_state: int = 0,
    ):
        self.spatial_factors = spatial_factors
        self.temporal_factors = temporal_factors
        self.steps = steps
        self.strategy = strategy
        self.intensity = intensity
        self.adding = adding
        self.denoising = denoising
        self.sigma_form = sigma_form
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.prior_dim = prior_dim
        self.prior_sign = prior_sign
        self.prior_mode = prior_mode
        self.use_tpe = use_tpe
        self.use_spe = use_spe
        self.embed_dim = embed_dim
        self.trunk_channels = trunk_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state

    # -- assembly -----------------------------------------------------------

    def _spec(self) -> ScheduleSpec:
        return ScheduleSpec(self.intensity, self.adding, self.denoising,
                            self.alpha_min, self.alpha_max, self.sigma_form)

    def _guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.prior_dim, self.prior_sign, self.prior_mode)

    def _plan(self) -> RGPPlan:
        return plan_rgp(self.spatial_factors, self.temporal_factors,
                        self.steps, self.strategy)

    def _dconfig(self, ctx: UrbanContext) -> DenoiserConfig:
        return DenoiserConfig(
            embed_dim=self.embed_dim,
            trunk_channels=self.trunk_channels,
            n_surface_classes=ctx.n_surface_classes,
            n_aoi_classes=ctx.n_aoi_classes,
            poi_dim=ctx.poi_dim,
            use_tpe=self.use_tpe,
            use_spe=self.use_spe,
        )

    # -- chain-space mapping -------------------------------------------------

    def _to_chain(self, ladder: MultiScaleTraffic) -> tuple[SpatioTemporalGrid, ...]:
        out = []
        for g in ladder.levels:
            z = (g.data.astype(np.float64) / g.level.block_cells - self.mu_) / self.scale_
            out.append(SpatioTemporalGrid(g.level, z, g.t0))
        return tuple(out)

    def _from_chain(self, levels) -> MultiScaleTraffic:
        out = []
        for g in levels:
            x = (g.data * self.scale_ + self.mu_) * g.level.block_cells
            out.append(SpatioTemporalGrid(g.level, x, g.t0))
        return MultiScaleTraffic(tuple(out))

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y):
        """Train on contexts ``X`` and finest-level traffic fields ``y``.

        ``X`` is a sequence of UrbanContext tiles; ``y`` the matching finest
        (T, H, W) fields (grids or arrays). Ladders for every plan stage are
        built here by sum-aggregation.
        """
        if len(X) != len(y):
            raise ValueError(f"got {len(X)} contexts but {len(y)} traffic fields")
        if not X:
            raise ValueError("fit needs at least one (context, traffic) pair")
        plan = self._plan()
        spec = self._spec()
        guidance = self._guidance()
        dconfig = self._dconfig(X[0])

        fields = [as_field(f, "traffic") for f in y]
        shape = fields[0].shape
        for f in fields:
            if f.shape != shape:
                raise ShapeError("all training fields must share one tile shape")
        finest = fields[0]
        mu = float(np.mean(fields))
        scale = float(np.std(fields))
        self.mu_ = mu
        self.scale_ = max(scale, 1e-8)

        ladders = []
        for f in fields:
            grid = SpatioTemporalGrid(plan.stage_levels[-1], f)
            ladders.append(build_ladder(grid, plan.stage_levels))
        data = [(self._to_chain(lad), ctx) for lad, ctx in zip(ladders, X)]

        params = init_denoiser(dconfig, guidance, plan.stage_levels,
                               finest.shape[1:], self.random_state)
        state: dict = {}
        rng = substream(self.random_state, "train")
        losses = []
        steps_per_epoch = max(1, len(data) // max(1, self.batch_size))
        t_start = time.perf_counter()
        for _ in range(self.epochs):
            for _ in range(steps_per_epoch):
                batch = make_training_batch(data, plan, spec, rng, self.batch_size)
                loss, grads = training_step(batch, params, dconfig, plan, spec,
                                            guidance)
                apply_update(params, grads, state, self.learning_rate, self.momentum)
                losses.append(loss)
        elapsed = time.perf_counter() - t_start

        self.plan_ = plan
        self.params_ = params
        self.dconfig_ = dconfig
        self.guidance_ = guidance
        self.spec_ = spec
        self.loss_history_ = losses
        self.n_parameters_ = param_count(params)
        self.seconds_per_epoch_ = elapsed / max(1, self.epochs)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _cond_for(self, ctx: UrbanContext):
        latent, _ = encode_uec(self.params_, self.dconfig_, ctx)
        return condition_series(latent, self.plan_, self.params_, self.dconfig_)

    def sample(self, X, random_state: int | None = None,
               true_ladders=None, return_results: bool = False):
        """Generate one multi-resolution ladder per context in ``X``.

        ``true_ladders`` (optional, raw scale) replaces generated priors with
        true coarse levels at every stage, for exposure-gap evaluation.
        """
        self._check_fitted()
        base = self.random_state if random_state is None else random_state
        out, results = [], []
        for i, ctx in enumerate(X):
            cond = self._cond_for(ctx)
            truth = None
            if true_ladders is not None:
                truth = list(self._to_chain(true_ladders[i]))
            res = rrdp_sample(
                self.params_, self.dconfig_, cond, self.plan_, self.spec_,
                self.guidance_, seed=base + 7919 * i, true_prior_levels=truth,
            )
            out.append(self._from_chain(res.levels))
            results.append(res)
        return (out, results) if return_results else out

    def predict(self, X):
        """Finest-level fields for each context (deterministic per estimator seed)."""
        return [lad.finest.data for lad in self.sample(X)]

    def refine(self, X, coarse_grids, random_state: int | None = None):
        """Zero-shot refinement of known coarse fields down to the finest level.

        ``coarse_grids`` are raw-scale grids matching some non-final stage
        resolution; stages above it are skipped and the prior pathway is
        seeded with the given field.
        """
        self._check_fitted()
        base = self.random_state if random_state is None else random_state
        out = []
        for i, (ctx, coarse) in enumerate(zip(X, coarse_grids)):
            cond = self._cond_for(ctx)
            z = (coarse.data.astype(np.float64) / coarse.level.block_cells
                 - self.mu_) / self.scale_
            zgrid = SpatioTemporalGrid(coarse.level, z, coarse.t0)
            res = refine_zero_shot(
                self.params_, self.dconfig_, zgrid, cond, self.plan_,
                self.spec_, self.guidance_, seed=base + 104729 * i,
            )
            fine = res.levels[-1]
            raw = (fine.data * self.scale_ + self.mu_) * fine.level.block_cells
            out.append(SpatioTemporalGrid(fine.level, raw, fine.t0))
        return out

    def score(self, X, y):
        """Negative finest-level MAE (higher is better), clamped at zero volume."""
        self._check_fitted()
        preds = self.predict(X)
        errs = [mae(np.maximum(p, 0.0), as_field(t)) for p, t in zip(preds, y)]
        return -float(np.mean(errs))


def save_checkpoint(est: MultiScaleDiffusion, path) -> None:
    """Persist a fitted estimator as a tensor bundle naming every block."""
    from .bundle import save_bundle

    est._check_fitted()
    meta = {
        "schema": "drdm-checkpoint-v1",
        "estimator": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in est.get_params().items()},
        "mu": est.mu_,
        "scale": est.scale_,
        "n_surface_classes": est.dconfig_.n_surface_classes,
        "n_aoi_classes": est.dconfig_.n_aoi_classes,
        "poi_dim": est.dconfig_.poi_dim,
        "n_parameters": est.n_parameters_,
        "seconds_per_epoch": est.seconds_per_epoch_,
    }
    save_bundle(dict(est.params_), path, meta=meta)


def load_checkpoint(path) -> MultiScaleDiffusion:
    """Rebuild a fitted estimator from a checkpoint bundle."""
    from .bundle import load_bundle, load_meta

    meta = load_meta(path)
    kwargs = dict(meta["estimator"])
    for key in ("spatial_factors", "temporal_factors"):
        kwargs[key] = tuple(kwargs[key])
    est = MultiScaleDiffusion(**kwargs)
    est.mu_ = float(meta["mu"])
    est.scale_ = float(meta["scale"])
    est.plan_ = est._plan()
    est.spec_ = est._spec()
    est.guidance_ = est._guidance()
    est.dconfig_ = DenoiserConfig(
        embed_dim=est.embed_dim,
        trunk_channels=est.trunk_channels,
        n_surface_classes=int(meta["n_surface_classes"]),
        n_aoi_classes=int(meta["n_aoi_classes"]),
        poi_dim=int(meta["poi_dim"]),
        use_tpe=est.use_tpe,
        use_spe=est.use_spe,
    )
    est.params_ = load_bundle(path)
    est.n_parameters_ = int(meta["n_parameters"])
    est.seconds_per_epoch_ = float(meta["seconds_per_epoch"])
    est.loss_history_ = []
    return est
