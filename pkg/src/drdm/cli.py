"""Config-driven command line front end.

Commands: synth | train | sample | eval | refine | schedule | gradcheck,
each taking ``--config FILE`` plus optional ``--seed`` and ``--out``
overrides. ``--seeds a,b,c`` fans a command out to one subprocess per seed
(outputs under ``<out>/seed_<k>``) and, for eval, aggregates the reports.
Every run writes a resolved-config snapshot into its output directory.

Exit codes: 0 ok, 1 user error (bad config/arguments/files), 2 internal
error. Setting ``DRDM_TRACE=1`` emits per-step trace CSVs during sampling.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .bundle import BundleError, load_bundle, load_meta, save_bundle
from .config import ConfigError, ExperimentConfig
from .denoiser import grad_check
from .estimator import MultiScaleDiffusion, load_checkpoint, save_checkpoint
from .guidance import GuidanceConfig
from .report import MetricsReport, aggregate_reports, level_metrics
from .schedule import ScheduleSpec, plan_rgp, schedule_table
from .synth import (
    CityConfig,
    build_ladder,
    generate_city,
    load_city,
    save_city,
    split_tiles,
)

TRACE_ENV = "DRDM_TRACE"


def _estimator_from_config(cfg: ExperimentConfig, seed: int) -> MultiScaleDiffusion:
    return MultiScaleDiffusion(
        spatial_factors=cfg["plan.spatial"],
        temporal_factors=cfg["plan.temporal"],
        steps=cfg["plan.steps"],
        strategy=cfg["plan.strategy"],
        intensity=cfg["spec.intensity"],
        adding=cfg["spec.adding"],
        denoising=cfg["spec.denoising"],
        sigma_form=cfg["spec.sigma_form"],
        alpha_min=cfg["spec.alpha_min"],
        alpha_max=cfg["spec.alpha_max"],
        prior_dim=cfg["spec.prior_dim"],
        prior_sign=cfg["spec.prior_sign"],
        prior_mode=cfg["spec.prior_mode"],
        use_tpe=cfg["trainer.use_tpe"],
        use_spe=cfg["trainer.use_spe"],
        embed_dim=cfg["trainer.embed_dim"],
        trunk_channels=cfg["trainer.trunk_channels"],
        epochs=cfg["trainer.epochs"],
        batch_size=cfg["trainer.batch"],
        learning_rate=cfg["trainer.lr"],
        momentum=cfg["trainer.momentum"],
        random_state=seed,
    )


def _split_from_config(cfg: ExperimentConfig, city):
    return split_tiles(city, cfg["trainer.tile"], cfg["eval.held_out"],
                       seed=cfg["trainer.seed"])


def _require(cfg: ExperimentConfig, key: str):
    value = cfg.get(key)
    if value is None:
        raise ConfigError([f"missing required key {key!r} for this command"])
    return value


def cmd_synth(cfg: ExperimentConfig, seed: int | None, out: Path) -> int:
    city_cfg_path = cfg.get("dataset.city_config")
    city_cfg = CityConfig.from_file(city_cfg_path) if city_cfg_path else CityConfig()
    use_seed = seed if seed is not None else city_cfg.seed
    city = generate_city(city_cfg, use_seed)
    dataset_path = Path(_require(cfg, "dataset.path"))
    save_city(city, dataset_path)
    cfg.write_snapshot(out)
    print(f"synth: wrote dataset bundle to {dataset_path} (seed={use_seed})")
    return 0


def cmd_train(cfg: ExperimentConfig, seed: int | None, out: Path) -> int:
    city = load_city(_require(cfg, "dataset.path"))
    train, _ = _split_from_config(cfg, city)
    use_seed = seed if seed is not None else cfg["trainer.seed"]
    est = _estimator_from_config(cfg, use_seed)
    contexts = [ctx for ctx, _ in train]
    fields = [grid for _, grid in train]
    t0 = time.perf_counter()
    est.fit(contexts, fields)
    elapsed = time.perf_counter() - t0
    ckpt = out / "checkpoint"
    save_checkpoint(est, ckpt)
    log = "\n".join(f"{i},{v:.8f}" for i, v in enumerate(est.loss_history_))
    (out / "train_log.csv").write_text("step,loss\n" + log + "\n", encoding="utf-8")
    cfg.write_snapshot(out)
    print(
        f"train: {est.n_parameters_} parameters, "
        f"{est.seconds_per_epoch_:.2f} s/epoch, total {elapsed:.1f}s, "
        f"checkpoint at {ckpt}"
    )
    return 0


def _generated_name(tile_idx: int, level_idx: int) -> str:
    return f"tile{tile_idx}_level{level_idx}"


def cmd_sample(cfg: ExperimentConfig, seed: int | None, out: Path,
               checkpoint: str) -> int:
    city = load_city(_require(cfg, "dataset.path"))
    _, held = _split_from_config(cfg, city)
    est = load_checkpoint(checkpoint)
    use_seed = seed if seed is not None else est.random_state
    contexts = [ctx for ctx, _ in held]
    t0 = time.perf_counter()
    ladders, results = est.sample(contexts, random_state=use_seed,
                                  return_results=True)
    elapsed = time.perf_counter() - t0
    tensors = {}
    for i, lad in enumerate(ladders):
        for k, grid in enumerate(lad.levels):
            tensors[_generated_name(i, k)] = grid.data.astype(np.float32)
    passes = int(sum(r.forward_passes for r in results))
    meta = {
        "schema": "drdm-generated-v1",
        "seed": use_seed,
        "tiles": len(ladders),
        "levels": len(ladders[0].levels) if ladders else 0,
        "forward_passes": passes,
        "seconds_per_run": elapsed / max(1, len(ladders)),
    }
    gen = out / "generated"
    save_bundle(tensors, gen, meta=meta)
    if os.environ.get(TRACE_ENV) == "1" and contexts:
        from .engine import rrdp_sample

        cond = est._cond_for(contexts[0])
        tr = rrdp_sample(est.params_, est.dconfig_, cond, est.plan_, est.spec_,
                         est.guidance_, seed=use_seed, collect_trace=True)
        rows = ["n,stage,beta,alpha,sigma,state_rms"]
        for rec in tr.trace:
            rows.append(",".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                                 for v in rec))
        (out / "trace.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    cfg.write_snapshot(out)
    print(f"sample: wrote {len(ladders)} tile ladders to {gen} "
          f"({passes} denoiser passes)")
    return 0


def cmd_eval(cfg: ExperimentConfig, seed: int | None, out: Path,
             generated: str) -> int:
    city = load_city(_require(cfg, "dataset.path"))
    _, held = _split_from_config(cfg, city)
    gen = load_bundle(generated)
    gmeta = load_meta(generated)
    plan = plan_rgp(cfg["plan.spatial"], cfg["plan.temporal"],
                    cfg["plan.steps"], cfg["plan.strategy"])
    peak = city.psnr_peak
    wanted = cfg["eval.metrics"]
    per_level: list[list[dict]] = [[] for _ in plan.stage_levels]
    for i, (_, fine) in enumerate(held):
        truth = build_ladder(fine, plan.stage_levels)
        for k, lv in enumerate(plan.stage_levels):
            name = _generated_name(i, k)
            pred = gen[name].astype(np.float64)
            per_level[k].append(level_metrics(pred, truth.levels[k], peak))
    rows = []
    for k, lv in enumerate(plan.stage_levels):
        row = {"level": lv.label}
        for col in ("mae", "rmse", "sprmse", "psnr"):
            vals = [m[col] for m in per_level[k]]
            finite = [v for v in vals if np.isfinite(v)]
            row[col] = float(np.mean(finite)) if finite else float("inf")
        rows.append(row)
    report = MetricsReport(rows, stats={
        "tiles": float(len(held)),
        "forward_passes": float(gmeta.get("forward_passes", 0)),
        "seconds_per_run": float(gmeta.get("seconds_per_run", 0.0)),
    })
    keep = ("level",) + tuple(wanted) + tuple(f"{m}_var" for m in wanted)
    for row in report.rows:
        for col in list(row):
            if col not in keep and col != "level":
                row.pop(col, None)
    report.save(out / "metrics.csv")
    cfg.write_snapshot(out)
    print(f"eval: wrote {out / 'metrics.csv'}")
    return 0


def cmd_refine(cfg: ExperimentConfig, seed: int | None, out: Path,
               checkpoint: str, level_index: int | None) -> int:
    city = load_city(_require(cfg, "dataset.path"))
    _, held = _split_from_config(cfg, city)
    est = load_checkpoint(checkpoint)
    use_seed = seed if seed is not None else est.random_state
    plan = est._plan()
    j = level_index if level_index is not None else plan.stages - 1
    if not 1 <= j < plan.stages:
        raise ConfigError([f"refine level must be in [1, {plan.stages}), got {j}"])
    lv = plan.level_of_stage(j)
    contexts = [ctx for ctx, _ in held]
    coarse = []
    truths = []
    for _, fine in held:
        lad = build_ladder(fine, plan.stage_levels)
        coarse.append(lad.levels[j - 1])
        truths.append(lad.finest)
    refined = est.refine(contexts, coarse, random_state=use_seed)
    tensors = {f"tile{i}_refined": g.data.astype(np.float32)
               for i, g in enumerate(refined)}
    meta = {"schema": "drdm-refined-v1", "seed": use_seed,
            "from_level": j, "from_label": lv.label}
    save_bundle(tensors, out / "refined", meta=meta)
    rows = []
    metrics = [level_metrics(g, t, city.psnr_peak) for g, t in zip(refined, truths)]
    row = {"level": plan.stage_levels[-1].label}
    for col in ("mae", "rmse", "sprmse", "psnr"):
        vals = [m[col] for m in metrics if np.isfinite(m[col])]
        row[col] = float(np.mean(vals)) if vals else float("inf")
    rows.append(row)
    MetricsReport(rows, stats={"tiles": float(len(held)), "from_level": float(j)}
                  ).save(out / "refine_metrics.csv")
    cfg.write_snapshot(out)
    print(f"refine: wrote {out / 'refined'} (from stage {j}: {lv.label})")
    return 0


def cmd_schedule(cfg: ExperimentConfig, seed: int | None, out: Path) -> int:
    plan = plan_rgp(cfg["plan.spatial"], cfg["plan.temporal"],
                    cfg["plan.steps"], cfg["plan.strategy"])
    spec = ScheduleSpec(cfg["spec.intensity"], cfg["spec.adding"],
                        cfg["spec.denoising"], cfg["spec.alpha_min"],
                        cfg["spec.alpha_max"], cfg["spec.sigma_form"])
    rows = ["n,stage,beta,alpha,sigma"]
    for n, k, beta, a, sig in schedule_table(plan, spec):
        rows.append(f"{n},{k},{beta:.10g},{a:.10g},{sig:.10g}")
    path = out / "schedule.csv"
    out.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    cfg.write_snapshot(out)
    print(f"schedule: wrote {path}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, seed: int | None, out: Path) -> int:
    from .engine import gradcheck_fixture

    use_seed = seed if seed is not None else cfg["trainer.seed"]
    guidance = GuidanceConfig(latent_dim=4, prior_sign=cfg["spec.prior_sign"],
                              upsample_mode=cfg["spec.prior_mode"])
    spec = ScheduleSpec(cfg["spec.intensity"], cfg["spec.adding"],
                        cfg["spec.denoising"], sigma_form=cfg["spec.sigma_form"])
    params, loss_fn = gradcheck_fixture(use_seed, spec=spec, guidance=guidance)
    report = grad_check(params, loss_fn)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(str(report) + "\n", encoding="utf-8")
    cfg.write_snapshot(out)
    print(report)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drdm",
        description="Multi-resolution traffic diffusion harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "sample", "eval", "refine", "schedule",
                 "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=str, default=None,
                       help="comma-separated seeds; fans out to subprocesses")
        p.add_argument("--out", type=str, default=None,
                       help="output directory (defaults to output.dir)")
        if name == "sample":
            p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--generated", required=True)
        if name == "refine":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--level", type=int, default=None,
                           help="stage index of the provided coarse field")
    return parser


def _fan_out(args, argv: list[str], out: Path) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError(["--seeds given but empty"])
    procs = []
    for s in seeds:
        sub_argv = [sys.executable, "-m", "drdm"]
        skip = False
        for tok in argv:
            if skip:
                skip = False
                continue
            if tok == "--seeds":
                skip = True
                continue
            if tok.startswith("--seeds="):
                continue
            if tok == "--out":
                skip = True
                continue
            if tok.startswith("--out="):
                continue
            sub_argv.append(tok)
        sub_argv += ["--seed", str(s), "--out", str(out / f"seed_{s}")]
        procs.append((s, subprocess.Popen(sub_argv)))
    rc = 0
    for s, proc in procs:
        code = proc.wait()
        if code != 0:
            print(f"drdm-error: replicate: seed {s} exited with {code}",
                  file=sys.stderr)
            rc = code
    if rc == 0 and args.command == "eval":
        reports = [MetricsReport.load(out / f"seed_{s}" / "metrics.csv")
                   for s in seeds]
        aggregate_reports(reports).save(out / "metrics_aggregate.csv")
        print(f"eval: aggregated {len(seeds)} replicates into "
              f"{out / 'metrics_aggregate.csv'}")
    return rc


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
        out = Path(args.out) if args.out else Path(cfg["output.dir"])
        out.mkdir(parents=True, exist_ok=True)
        if args.seeds:
            return _fan_out(args, argv, out)
        if args.command == "synth":
            return cmd_synth(cfg, args.seed, out)
        if args.command == "train":
            return cmd_train(cfg, args.seed, out)
        if args.command == "sample":
            return cmd_sample(cfg, args.seed, out, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.seed, out, args.generated)
        if args.command == "refine":
            return cmd_refine(cfg, args.seed, out, args.checkpoint, args.level)
        if args.command == "schedule":
            return cmd_schedule(cfg, args.seed, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.seed, out)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError, BundleError) as exc:
        print(f"drdm-error: user: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        print(f"drdm-error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
