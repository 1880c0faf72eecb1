"""Prior-noise guidance between adjacent resolution stages.

A stage's clean field can be split into a known coarse component H (the
adjacent coarser level, upsampled) plus a residual. The coarse component maps
to a deterministic prior-noise tensor

    P = sqrt(alpha) / sqrt(1 - alpha) * H,

which is zero at the coarsest stage. The denoiser then only has to model the
residual part; its prediction and P are merged by a small learned fusion that
projects both into a D-dimensional per-cell latent, concatenates, and projects
back. At the identity-bypass initialization the fusion is exactly additive.

``prior_sign`` selects which side of the prior-term sign ambiguity is used:
``plus`` fuses eps_pred + P (both in the loss and in sampling) and ``minus``
fuses eps_pred - P. Both are self-consistent; they differ in what the raw
network output converges to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import ResolutionLevel, SpatioTemporalGrid, upsample
from .validation import ShapeError, check_choice, check_same_shape

PRIOR_SIGNS = ("plus", "minus")


@dataclass(frozen=True)
class GuidanceConfig:
    """Prior-guidance knobs. ``latent_dim == 0`` disables the pathway."""

    latent_dim: int = 32
    prior_sign: str = "plus"
    upsample_mode: str = "replicate_mean"

    def __post_init__(self):
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        check_choice(self.prior_sign, PRIOR_SIGNS, "prior_sign")
        check_choice(self.upsample_mode, ("replicate_mean", "replicate_value"),
                     "upsample_mode")

    @property
    def enabled(self) -> bool:
        return self.latent_dim > 0

    @property
    def sign(self) -> float:
        return 1.0 if self.prior_sign == "plus" else -1.0


@dataclass(frozen=True)
class PriorNoise:
    """Prior-noise tensor at a stage's own resolution."""

    tensor: np.ndarray
    source_level: int   # stage index the coarse field came from (k - 1)
    alpha_used: float


@dataclass(frozen=True)
class ResidualDecomposition:
    delta_x0: np.ndarray   # x0 - H
    prior_component: np.ndarray
    delta_eps: np.ndarray  # eps + hat_eps, the network's modelling target
    hat_eps: np.ndarray    # sqrt(alpha) H / sqrt(1 - alpha)


def prior_ratio(alpha: float) -> float:
    """The signal-to-noise amplitude ratio sqrt(alpha) / sqrt(1 - alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be strictly inside (0, 1), got {alpha}")
    return math.sqrt(alpha) / math.sqrt(1.0 - alpha)


def prior_noise(
    coarse_prev: SpatioTemporalGrid | None,
    alpha: float,
    k: int,
    target_level: ResolutionLevel,
    target_shape: tuple[int, int, int],
    mode: str = "replicate_mean",
) -> PriorNoise:
    """Prior noise for stage k computed from the adjacent coarser field.

    Returns a zero tensor when k == 1 (no coarser stage exists). Otherwise
    the coarse field is upsampled to ``target_level`` and scaled by
    sqrt(alpha)/sqrt(1-alpha); alpha must arrive already clamped inside
    (0, 1).
    """
    if k == 1:
        return PriorNoise(np.zeros(target_shape), source_level=0, alpha_used=alpha)
    if coarse_prev is None:
        raise ValueError(f"stage {k} needs the coarser field for its prior")
    lv = coarse_prev.level
    if lv.spatial_scale % target_level.spatial_scale or \
            lv.temporal_scale % target_level.temporal_scale:
        raise ShapeError(
            f"coarse level ({lv.spatial_scale},{lv.temporal_scale}) does not refine "
            f"to ({target_level.spatial_scale},{target_level.temporal_scale})"
        )
    up = upsample(
        coarse_prev,
        factor_t=lv.temporal_scale // target_level.temporal_scale,
        factor_s=lv.spatial_scale // target_level.spatial_scale,
        mode=mode,
    )
    if up.data.shape != tuple(target_shape):
        raise ShapeError(
            f"upsampled prior shape {up.data.shape} != stage shape {tuple(target_shape)}"
        )
    tensor = prior_ratio(alpha) * up.data.astype(np.float64)
    return PriorNoise(tensor, source_level=k - 1, alpha_used=alpha)


def residual_decompose(x0: np.ndarray, prior_component: np.ndarray,
                       alpha: float, eps: np.ndarray) -> ResidualDecomposition:
    """Split (x0, eps) around a known component H of the clean field.

    Reconstruction identity: eps == delta_eps - hat_eps, and the noised state
    sqrt(alpha) x0 + sqrt(1-alpha) eps equals
    sqrt(alpha) (H + delta_x0) + sqrt(1-alpha) eps exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    h = np.asarray(prior_component, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(x0, h, "x0 and prior component")
    check_same_shape(x0, eps, "x0 and eps")
    hat = prior_ratio(alpha) * h
    return ResidualDecomposition(
        delta_x0=x0 - h,
        prior_component=h,
        delta_eps=eps + hat,
        hat_eps=hat,
    )


@dataclass
class FusionParams:
    """Per-cell linear fusion of predicted and prior noise through a D-latent."""

    w_eps: np.ndarray    # (D,) scalar -> latent
    b_eps: np.ndarray    # (D,)
    w_prior: np.ndarray  # (D,)
    b_prior: np.ndarray  # (D,)
    w_out: np.ndarray    # (2D,) concatenated latent -> scalar
    b_out: np.ndarray    # (1,)

    @classmethod
    def identity_bypass(cls, latent_dim: int) -> "FusionParams":
        """Initialization whose output is exactly eps_pred + prior."""
        d = int(latent_dim)
        if d < 1:
            raise ValueError("latent_dim must be >= 1 for fusion params")
        w_eps = np.zeros(d)
        w_prior = np.zeros(d)
        w_out = np.zeros(2 * d)
        w_eps[0] = 1.0
        w_prior[0] = 1.0
        w_out[0] = 1.0
        w_out[d] = 1.0
        return cls(w_eps, np.zeros(d), w_prior, np.zeros(d), w_out, np.zeros(1))

    @property
    def latent_dim(self) -> int:
        return self.w_eps.shape[0]


def fuse_noise(eps_pred: np.ndarray, prior: PriorNoise | np.ndarray,
               params: FusionParams) -> np.ndarray:
    """Fuse predicted noise with the prior tensor through the learned latent.

    The map is linear per cell: out = a * eps_pred + b * prior + c with
    a = <w_eps, w_out[:D]>, b = <w_prior, w_out[D:]>, and c collecting the
    biases; the latent layout only matters for how gradients factor.
    """
    p = prior.tensor if isinstance(prior, PriorNoise) else np.asarray(prior)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    check_same_shape(eps_pred, p, "eps_pred and prior")
    d = params.latent_dim
    a = float(params.w_eps @ params.w_out[:d])
    b = float(params.w_prior @ params.w_out[d:])
    c = float(params.b_eps @ params.w_out[:d] + params.b_prior @ params.w_out[d:]
              + params.b_out[0])
    return a * eps_pred + b * p + c


def fuse_noise_backward(dout: np.ndarray, eps_pred: np.ndarray,
                        prior: np.ndarray, params: FusionParams
                        ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of fuse_noise w.r.t. eps_pred and the fusion parameters."""
    d = params.latent_dim
    s0 = float(np.sum(dout))
    s_eps = float(np.sum(dout * eps_pred))
    s_prior = float(np.sum(dout * prior))
    grads = {
        "fuse_w_eps": s_eps * params.w_out[:d],
        "fuse_b_eps": s0 * params.w_out[:d],
        "fuse_w_prior": s_prior * params.w_out[d:],
        "fuse_b_prior": s0 * params.w_out[d:],
        "fuse_w_out": np.concatenate(
            [s_eps * params.w_eps + s0 * params.b_eps,
             s_prior * params.w_prior + s0 * params.b_prior]
        ),
        "fuse_b_out": np.array([s0]),
    }
    deps = float(params.w_eps @ params.w_out[:d]) * dout
    return deps, grads
