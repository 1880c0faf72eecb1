"""Shared conditional noise-estimation network with hand-written gradients.

One network serves every resolution stage. Its inputs are the noisy field,
the diffusion step, and per-stage conditioning (urban-context latent,
sinusoidal temporal encoding, learnable per-resolution spatial encoding), all
projected into one embedding space and merged by element-wise addition. The
trunk is four 3x3 convolution layers with the time axis folded into the
batch; the output layer starts at zero so an untrained network predicts zero
residual noise.

Everything is float64 numpy. Backward passes are written out explicitly and
validated against central finite differences (see ``grad_check``); gradient
accumulation order is fixed, so training is bit-reproducible given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grids import ResolutionLevel
from .guidance import FusionParams, GuidanceConfig
from .rng import substream
from .synth import UrbanContext
from .validation import ShapeError

ENCODING_DIM = 128
_HALF = ENCODING_DIM // 2
_TPE_FREQS = 1.0 / (10000.0 ** (2.0 * np.arange(_HALF) / ENCODING_DIM))


def tpe(t: int | float) -> np.ndarray:
    """128-wide sinusoidal time encoding, interleaved (sin, cos) pairs."""
    if t < 0:
        raise ValueError(f"time index must be >= 0, got {t}")
    v = float(t) * _TPE_FREQS
    out = np.empty(ENCODING_DIM)
    out[0::2] = np.sin(v)
    out[1::2] = np.cos(v)
    return out


def tpe_matrix(ts: Sequence[int]) -> np.ndarray:
    """Stacked encodings for a sequence of time indices, shape (len, 128)."""
    arr = np.asarray(ts, dtype=np.float64)
    if arr.size and arr.min() < 0:
        raise ValueError("time indices must be >= 0")
    v = arr[:, None] * _TPE_FREQS[None, :]
    out = np.empty((arr.shape[0], ENCODING_DIM))
    out[:, 0::2] = np.sin(v)
    out[:, 1::2] = np.cos(v)
    return out


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _dsilu(z: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + z * (1.0 - s))


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution; x is (B, Cin, H, W), w is (Co, Cin, 3, 3)."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).transpose(1, 0, 2, 3)
    acc = np.zeros((cout, bsz * h * wd))
    for di in range(3):
        for dj in range(3):
            sl = np.ascontiguousarray(xp[:, :, di:di + h, dj:dj + wd]).reshape(cin, -1)
            acc += w[:, :, di, dj] @ sl
    out = acc.reshape(cout, bsz, h, wd).transpose(1, 0, 2, 3)
    return out + b[None, :, None, None]


def _conv3x3_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for _conv3x3; g is (B, Co, H, W). Returns (dx, dw, db)."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).transpose(1, 0, 2, 3)
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            sl = np.ascontiguousarray(xp[:, :, di:di + h, dj:dj + wd]).reshape(cin, -1)
            dw[:, :, di, dj] = gt @ sl.T
            dsl = (w[:, :, di, dj].T @ gt).reshape(cin, bsz, h, wd)
            dxp[:, :, di:di + h, dj:dj + wd] += dsl
    dx = dxp[:, :, 1:h + 1, 1:wd + 1].transpose(1, 0, 2, 3)
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


def _mlp_forward(x2d, w1, b1, w2, b2):
    z1 = x2d @ w1 + b1
    a1, s1 = _silu(z1)
    return a1 @ w2 + b2, (x2d, z1, s1, a1)


def _mlp_backward(dout, cache, w1, w2):
    x2d, z1, s1, a1 = cache
    dw2 = a1.T @ dout
    db2 = dout.sum(axis=0)
    dz1 = (dout @ w2.T) * _dsilu(z1, s1)
    dw1 = x2d.T @ dz1
    db1 = dz1.sum(axis=0)
    return dw1, db1, dw2, db2


def _one_hot_drop_first(classes: np.ndarray, n_classes: int) -> np.ndarray:
    """Drop-first one-hot: class 0 encodes as the zero vector."""
    flat = classes.ravel()
    out = np.zeros((flat.shape[0], max(1, n_classes - 1)))
    mask = flat > 0
    out[np.nonzero(mask)[0], flat[mask] - 1] = 1.0
    return out


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 32
    trunk_channels: int = 32
    n_surface_classes: int = 4
    n_aoi_classes: int = 5
    poi_dim: int = 8
    use_tpe: bool = True
    use_spe: bool = True


@dataclass(frozen=True)
class StageConditioning:
    """Conditioning slice for one stage: latent context plus encodings."""

    level: ResolutionLevel
    context: np.ndarray   # (E, T_k, H_k, W_k)
    tpe: np.ndarray       # (T_k, 128), zeros when disabled
    spe: np.ndarray       # (128, H_k, W_k), zeros when disabled
    spe_name: str | None  # parameter block receiving spatial-encoding grads


@dataclass(frozen=True)
class ConditionSeries:
    """Per-stage conditioning derived from one fused context tensor."""

    stages: tuple[StageConditioning, ...]

    def for_stage(self, k: int) -> StageConditioning:
        return self.stages[k - 1]


def spe_block_name(spatial_scale: int) -> str:
    return f"spe_s{spatial_scale}"


def init_denoiser(
    config: DenoiserConfig,
    guidance: GuidanceConfig,
    levels: Sequence[ResolutionLevel],
    tile_hw: tuple[int, int],
    seed: int,
) -> dict[str, np.ndarray]:
    """Create all parameter blocks (insertion order is the canonical order)."""
    rng = substream(seed, "denoiser-init")
    e = config.embed_dim
    c = config.trunk_channels
    h, w = tile_hw

    def lin(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params: dict[str, np.ndarray] = {}
    field_dims = (
        max(1, config.n_surface_classes - 1),
        max(1, config.n_aoi_classes - 1),
        config.poi_dim,
        1,
    )
    for i, dim in enumerate(field_dims, start=1):
        params[f"f{i}_w1"] = lin((dim, e), dim)
        params[f"f{i}_b1"] = np.zeros(e)
        params[f"f{i}_w2"] = lin((e, e), e)
        params[f"f{i}_b2"] = np.zeros(e)
    params["pe_w"] = lin((2 * ENCODING_DIM, e), 2 * ENCODING_DIM)
    params["pe_b"] = np.zeros(e)
    params["step_w"] = lin((ENCODING_DIM, e), ENCODING_DIM)
    params["step_b"] = np.zeros(e)
    params["in_w"] = rng.normal(0.0, 0.5, size=e)
    params["in_b"] = np.zeros(e)
    params["conv1_w"] = lin((c, e, 3, 3), e * 9)
    params["conv1_b"] = np.zeros(c)
    params["conv2_w"] = lin((c, c, 3, 3), c * 9)
    params["conv2_b"] = np.zeros(c)
    params["conv3_w"] = lin((c, c, 3, 3), c * 9)
    params["conv3_b"] = np.zeros(c)
    params["out_w"] = np.zeros((1, c, 3, 3))
    params["out_b"] = np.zeros(1)
    for ds in sorted({lv.spatial_scale for lv in levels}, reverse=True):
        if h % ds or w % ds:
            raise ShapeError(f"tile {h}x{w} not divisible by spatial scale {ds}")
        params[spe_block_name(ds)] = 0.02 * rng.normal(
            size=(ENCODING_DIM, h // ds, w // ds)
        )
    if guidance.enabled:
        fusion = FusionParams.identity_bypass(guidance.latent_dim)
        params["fuse_w_eps"] = fusion.w_eps
        params["fuse_b_eps"] = fusion.b_eps
        params["fuse_w_prior"] = fusion.w_prior
        params["fuse_b_prior"] = fusion.b_prior
        params["fuse_w_out"] = fusion.w_out
        params["fuse_b_out"] = fusion.b_out
    return params


def fusion_view(params: dict[str, np.ndarray]) -> FusionParams:
    return FusionParams(
        params["fuse_w_eps"], params["fuse_b_eps"],
        params["fuse_w_prior"], params["fuse_b_prior"],
        params["fuse_w_out"], params["fuse_b_out"],
    )


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def encode_uec(params: dict, config: DenoiserConfig, ctx: UrbanContext):
    """Fuse the four context fields into one (E, T, H, W) latent tensor.

    Each field runs through its own two-layer per-cell perceptron; the four
    outputs combine by addition, static fields broadcasting over time. With
    zero biases a zero context maps to the zero tensor.
    """
    t = ctx.population.shape[0]
    h, w = ctx.surface.shape
    cells = h * w
    xs = _one_hot_drop_first(ctx.surface, config.n_surface_classes)
    xa = _one_hot_drop_first(ctx.aoi, config.n_aoi_classes)
    xp = ctx.poi.reshape(config.poi_dim, cells).T.astype(np.float64)
    xpop = ctx.population.reshape(t * cells, 1).astype(np.float64)
    o1, c1 = _mlp_forward(xs, params["f1_w1"], params["f1_b1"],
                          params["f1_w2"], params["f1_b2"])
    o2, c2 = _mlp_forward(xa, params["f2_w1"], params["f2_b1"],
                          params["f2_w2"], params["f2_b2"])
    o3, c3 = _mlp_forward(xp, params["f3_w1"], params["f3_b1"],
                          params["f3_w2"], params["f3_b2"])
    o4, c4 = _mlp_forward(xpop, params["f4_w1"], params["f4_b1"],
                          params["f4_w2"], params["f4_b2"])
    combined = o1 + o2 + o3 + o4.reshape(t, cells, -1)
    out = combined.transpose(2, 0, 1).reshape(-1, t, h, w)
    return out, (c1, c2, c3, c4, (t, h, w))


def encode_uec_backward(dc: np.ndarray, cache, params: dict,
                        grads: dict[str, np.ndarray]) -> None:
    """Accumulate mapper gradients for an upstream (E, T, H, W) gradient."""
    c1, c2, c3, c4, (t, h, w) = cache
    cells = h * w
    dcomb = dc.reshape(-1, t, cells).transpose(1, 2, 0)  # (T, cells, E)
    dstatic = dcomb.sum(axis=0)
    for idx, cache_i, dout in (
        (1, c1, dstatic), (2, c2, dstatic), (3, c3, dstatic),
        (4, c4, dcomb.reshape(t * cells, -1)),
    ):
        dw1, db1, dw2, db2 = _mlp_backward(
            dout, cache_i, params[f"f{idx}_w1"], params[f"f{idx}_w2"]
        )
        grads[f"f{idx}_w1"] += dw1
        grads[f"f{idx}_b1"] += db1
        grads[f"f{idx}_w2"] += dw2
        grads[f"f{idx}_b2"] += db2


def _block_mean(c: np.ndarray, ft: int, fs: int) -> np.ndarray:
    e, t, h, w = c.shape
    return c.reshape(e, t // ft, ft, h // fs, fs, w // fs, fs).mean(axis=(2, 4, 6))


def block_mean_adjoint(dc_k: np.ndarray, ft: int, fs: int) -> np.ndarray:
    """Adjoint of the block mean: replicate and divide by block cardinality."""
    out = np.repeat(dc_k, ft, axis=1)
    out = np.repeat(out, fs, axis=2)
    out = np.repeat(out, fs, axis=3)
    return out / float(ft * fs * fs)


def condition_series(c: np.ndarray, plan, params: dict, config: DenoiserConfig,
                     t0: int = 0) -> ConditionSeries:
    """Downsample the fused context to every stage and attach encodings.

    Contexts coarsen by block mean; temporal encodings stride the fine time
    axis (index t0 + t * tau); spatial encodings are per-resolution lookup
    tables. Disabled encodings are zero tensors.
    """
    e, t, h, w = c.shape
    stages = []
    for lv in plan.stage_levels:
        if t % lv.temporal_scale or h % lv.spatial_scale or w % lv.spatial_scale:
            raise ShapeError(
                f"context {c.shape[1:]} not divisible by stage factors "
                f"({lv.temporal_scale}, {lv.spatial_scale})"
            )
        ck = _block_mean(c, lv.temporal_scale, lv.spatial_scale)
        tk = ck.shape[1]
        if config.use_tpe:
            enc_t = tpe_matrix(t0 + np.arange(tk) * lv.temporal_scale)
        else:
            enc_t = np.zeros((tk, ENCODING_DIM))
        name = spe_block_name(lv.spatial_scale) if config.use_spe else None
        if config.use_spe:
            enc_s = params[name]
            if enc_s.shape[1:] != ck.shape[2:]:
                raise ShapeError(
                    f"spatial encoding {enc_s.shape[1:]} does not match stage "
                    f"shape {ck.shape[2:]}"
                )
        else:
            enc_s = np.zeros((ENCODING_DIM,) + ck.shape[2:])
        stages.append(StageConditioning(lv, ck, enc_t, enc_s, name))
    return ConditionSeries(tuple(stages))


def predict_noise(params: dict, config: DenoiserConfig, x: np.ndarray, n: int,
                  cond: StageConditioning):
    """Estimate residual noise for a noisy stage field x of shape (T, H, W)."""
    t, h, w = x.shape
    if cond.context.shape[1:] != (t, h, w):
        raise ShapeError(
            f"conditioning {cond.context.shape[1:]} does not match field {(t, h, w)}"
        )
    half = ENCODING_DIM
    pe_t = cond.tpe @ params["pe_w"][:half]                      # (T, E)
    pe_s = np.einsum("fhw,fe->ehw", cond.spe, params["pe_w"][half:])
    step_vec = tpe(n)
    semb = step_vec @ params["step_w"] + params["step_b"] + params["pe_b"]
    u = (
        x[:, None, :, :] * params["in_w"][None, :, None, None]
        + params["in_b"][None, :, None, None]
        + cond.context.transpose(1, 0, 2, 3)
        + pe_t[:, :, None, None]
        + pe_s[None, :, :, :]
        + semb[None, :, None, None]
    )
    z1 = _conv3x3(u, params["conv1_w"], params["conv1_b"])
    a1, s1 = _silu(z1)
    z2 = _conv3x3(a1, params["conv2_w"], params["conv2_b"])
    a2, s2 = _silu(z2)
    z3 = _conv3x3(a2, params["conv3_w"], params["conv3_b"])
    a3, s3 = _silu(z3)
    out = _conv3x3(a3, params["out_w"], params["out_b"])[:, 0]
    cache = (x, u, z1, s1, a1, z2, s2, a2, z3, s3, a3, step_vec, cond)
    return out, cache


def predict_noise_backward(dout: np.ndarray, cache, params: dict,
                           config: DenoiserConfig,
                           grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate trunk/encoding gradients; returns the context gradient."""
    x, u, z1, s1, a1, z2, s2, a2, z3, s3, a3, step_vec, cond = cache
    g = dout[:, None, :, :]
    da3, dw, db = _conv3x3_backward(g, a3, params["out_w"])
    grads["out_w"] += dw
    grads["out_b"] += db
    dz3 = da3 * _dsilu(z3, s3)
    da2, dw, db = _conv3x3_backward(dz3, a2, params["conv3_w"])
    grads["conv3_w"] += dw
    grads["conv3_b"] += db
    dz2 = da2 * _dsilu(z2, s2)
    da1, dw, db = _conv3x3_backward(dz2, a1, params["conv2_w"])
    grads["conv2_w"] += dw
    grads["conv2_b"] += db
    dz1 = da1 * _dsilu(z1, s1)
    du, dw, db = _conv3x3_backward(dz1, u, params["conv1_w"])
    grads["conv1_w"] += dw
    grads["conv1_b"] += db

    half = ENCODING_DIM
    grads["in_w"] += np.einsum("tehw,thw->e", du, x)
    grads["in_b"] += du.sum(axis=(0, 2, 3))
    dpe_t = du.sum(axis=(2, 3))                     # (T, E)
    dpe_s = du.sum(axis=0)                          # (E, H, W)
    grads["pe_w"][:half] += cond.tpe.T @ dpe_t
    grads["pe_w"][half:] += np.einsum("fhw,ehw->fe", cond.spe, dpe_s)
    dsem = du.sum(axis=(0, 2, 3))
    grads["pe_b"] += dsem
    grads["step_w"] += np.outer(step_vec, dsem)
    grads["step_b"] += dsem
    if cond.spe_name is not None:
        grads[cond.spe_name] += np.einsum("fe,ehw->fhw", params["pe_w"][half:], dpe_s)
    return du.transpose(1, 0, 2, 3)


def apply_update(params: dict, grads: dict, state: dict,
                 lr: float = 1e-3, momentum: float = 0.9) -> dict:
    """Stochastic gradient step with momentum, in place; returns params."""
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + grads[name]
        state[name] = v
        p -= lr * v
    return params


@dataclass(frozen=True)
class GradCheckReport:
    tolerance: float
    block_errors: dict[str, float]
    passed: bool
    worst_block: str

    def __str__(self) -> str:
        lines = [f"gradient check (tolerance {self.tolerance:g}):"]
        for name, err in self.block_errors.items():
            lines.append(f"  {name:14s} max_rel_err={err:.3e}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'} "
                     f"(worst block: {self.worst_block})")
        return "\n".join(lines)


def grad_check(
    params: dict[str, np.ndarray],
    loss_and_grads: Callable[[dict], tuple[float, dict]],
    tolerance: float = 1e-3,
    fd_step: float = 1e-4,
    blocks: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads`` must be a deterministic map from params to
    (loss, gradient dict). Reports the max relative error per parameter
    block (all blocks, or just ``blocks``); empty blocks pass vacuously.
    """
    _, analytic = loss_and_grads(params)

    def loss_only(p):
        return loss_and_grads(p)[0]

    names = list(params) if blocks is None else list(blocks)
    errors: dict[str, float] = {}
    for name in names:
        block = params[name]
        flat = block.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = loss_only(params)
            flat[i] = orig - fd_step
            down = loss_only(params)
            flat[i] = orig
            fd = (up - down) / (2.0 * fd_step)
            denom = max(abs(fd), abs(ga[i]), 1e-6)
            worst = max(worst, abs(fd - ga[i]) / denom)
        errors[name] = worst
    worst_block = max(errors, key=errors.get) if errors else ""
    passed = all(v <= tolerance for v in errors.values())
    return GradCheckReport(tolerance, errors, passed, worst_block)
