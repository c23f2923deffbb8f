"""Command-line pipeline: gen-data, pretrain, adapt, rollout, evaluate, ablate.

Every command takes --config (flat key=value file), with --seed/--out
overriding the config's seed and output directory. Runs write their resolved
configuration, a run log, and command-specific outputs under --out.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (checkpoint_from_model, config_hash_of, load_checkpoint,
                         load_into_model, save_checkpoint)
from .config import ConfigError, RunConfig, load_config, write_resolved
from .metrics import MetricReport, MetricRow, evaluate
from .model import build_model
from .report import emit_panels, panel_variables
from .rng import RngStream
from .synthetic import generate_synthetic
from .train import (DataBundle, ModelForecaster, PretrainSkillError, RolloutForecaster,
                    RunLog, TrainError, adapt, pretrain_proxy)


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig(**overrides)


def _prepare_out(cfg: RunConfig) -> tuple[Path, str, RunLog]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = write_resolved(cfg, out)
    log = RunLog(echo=True)
    return out, config_hash_of(resolved.read_text()), log


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    data_dir = Path(cfg.data_dir)
    if data_dir.exists() and any(data_dir.iterdir()) and not args.overwrite:
        print(f"error: {data_dir} exists and is not empty; pass --overwrite",
              file=sys.stderr)
        return 1
    manifests = generate_synthetic(cfg.synthetic_config(), cfg.seed, data_dir)
    write_resolved(cfg, data_dir)
    for name, m in manifests.items():
        print(f"{name}: steps {min(m.files)}..{max(m.files)}, {len(m.pairs)} pairs "
              f"at horizon {m.horizon_steps}")
    g = cfg.grid()
    print(f"dataset: {cfg.n_steps} steps on a {g.n_lat}x{g.n_lon} grid, "
          f"{g.n_level} levels, {cfg.n_oci} ocean indices x {cfg.oci_lags} lags")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    out, chash, log = _prepare_out(cfg)
    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.pretrain_horizon)
    try:
        model, _ = pretrain_proxy(cfg, bundle, cfg.seed, log, config_hash=chash)
    except PretrainSkillError as e:
        log(f"warning: {e}")
        log.save(out / "pretrain.log")
        return 1
    ckpt = checkpoint_from_model(model, epoch=cfg.pretrain_epochs - 1,
                                 config_hash=chash, tag="pretrained-1day")
    save_checkpoint(out / "pretrained.ckpt", ckpt)
    log(f"saved {out / 'pretrained.ckpt'}")
    log.save(out / "pretrain.log")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_run_config(args)
    if cfg.mode not in ("lora_oci", "lora_no_oci", "full_finetune"):
        print(f"error: adapt needs mode lora_oci, lora_no_oci or full_finetune, "
              f"got {cfg.mode}", file=sys.stderr)
        return 1
    out, chash, log = _prepare_out(cfg)
    pretrained = load_checkpoint(args.pretrained)
    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.horizon_steps)
    try:
        model, result = adapt(cfg, bundle, pretrained, cfg.seed, log, config_hash=chash)
    except TrainError as e:
        log(f"error: {e}")
        log.save(out / "adapt.log")
        return 1
    ckpt = checkpoint_from_model(model, epoch=result.best_epoch, config_hash=chash,
                                 tag=f"adapted-{cfg.mode}")
    path = out / f"adapted_{cfg.mode}.ckpt"
    save_checkpoint(path, ckpt)
    log(f"saved {path} (best epoch {result.best_epoch}, val {result.best_val:.6f})")
    log.save(out / "adapt.log")
    return 0


def cmd_rollout(args) -> int:
    cfg = _load_run_config(args)
    out, chash, log = _prepare_out(cfg)
    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.horizon_steps)
    ckpt = load_checkpoint(args.pretrained)
    model = _model_from_checkpoint(cfg, ckpt, force=args.force)
    steps = args.steps if args.steps else cfg.horizon_steps
    roller = RolloutForecaster("rollout", model, bundle.stats, bundle.store,
                               cfg.pretrain_horizon, steps)
    log(f"rollout: {roller.iterations} iterations of the {cfg.pretrain_horizon}-step model")
    report = evaluate([roller], bundle.manifests["test"], bundle.store,
                      bundle.climatology, max_pairs=cfg.eval_max_pairs or None,
                      seed=cfg.seed, config_hash=chash)
    report.save_csv(out / "rollout_metrics.csv")
    direct = ModelForecaster("direct-short", model, bundle.stats)
    short = evaluate([direct], manifest_short(bundle, cfg), bundle.store,
                     bundle.climatology, max_pairs=cfg.eval_max_pairs or None,
                     include_persistence=False, seed=cfg.seed, config_hash=chash)
    mean_roll = float(np.mean([r.wrmse for r in report.rows if r.model == "rollout"]))
    mean_short = float(np.mean([r.wrmse for r in short.rows]))
    log(f"rollout mean wrmse {mean_roll:.6f} vs direct short-lead {mean_short:.6f} "
        f"(error growth expected, not asserted)")
    log.save(out / "rollout.log")
    print(report.to_csv_text(), end="")
    return 0


def manifest_short(bundle: DataBundle, cfg: RunConfig):
    from .train import manifest_with_horizon
    return manifest_with_horizon(bundle.manifests["test"], cfg.pretrain_horizon)


def _model_from_checkpoint(cfg: RunConfig, ckpt, force: bool = False):
    """Rebuild the architecture a checkpoint was saved from, then restore it."""
    mode = ckpt.tag.replace("adapted-", "", 1) if ckpt.tag.startswith("adapted-") \
        else "frozen"
    if mode not in ("lora_oci", "lora_no_oci", "full_finetune", "frozen"):
        mode = "frozen"
    if mode in ("lora_oci", "lora_no_oci"):
        model = build_model(cfg.grid(), cfg.backbone_config(), mode,
                            RngStream(cfg.seed, tag="restore"),
                            n_oci_indices=cfg.n_oci, n_oci_lags=cfg.oci_lags,
                            gate_mode=cfg.gate_mode, gate_width=cfg.gate_width,
                            lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha,
                            lora_dropout=cfg.lora_dropout,
                            lora_targets=cfg.lora_target_patterns())
    else:
        model = build_model(cfg.grid(), cfg.backbone_config(), "frozen",
                            RngStream(cfg.seed, tag="restore"))
    load_into_model(ckpt, model, force=force)
    model.eval()
    return model


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out, chash, log = _prepare_out(cfg)
    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.horizon_steps)
    forecasters = []
    for path in args.checkpoints:
        ckpt = load_checkpoint(path)
        model = _model_from_checkpoint(cfg, ckpt, force=args.force)
        name = ckpt.tag or Path(path).stem
        forecasters.append(ModelForecaster(name, model, bundle.stats))
    manifest = bundle.manifests[args.split]
    report = evaluate(forecasters, manifest, bundle.store, bundle.climatology,
                      max_pairs=cfg.eval_max_pairs or None, seed=cfg.seed,
                      config_hash=chash)
    report.save_csv(out / "metrics.csv")
    log(f"wrote {out / 'metrics.csv'} ({len(report.rows)} rows)")

    t_in, t_tgt = manifest.pairs[0] if cfg.panel_timestamp < 0 else next(
        p for p in manifest.pairs if p[0] == cfg.panel_timestamp)
    sample = bundle.store.sample(t_in)
    tgt_s, tgt_u = bundle.store.load_fields(t_tgt)
    panel_dir = out / "panels"
    for fc in forecasters or []:
        pred_s, pred_u = fc.predict(sample)
        for label, kind, chan, lev in panel_variables(manifest.grid):
            if kind == "surface":
                fields = (sample.surface[chan], tgt_s[chan], pred_s[chan])
            else:
                fields = (sample.upper[chan, lev], tgt_u[chan, lev], pred_u[chan, lev])
            emit_panels(panel_dir / fc.name, manifest.grid, label, *fields, log=log)
    log.save(out / "evaluate.log")
    print(report.to_csv_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out, chash, log = _prepare_out(cfg)
    pretrained = load_checkpoint(args.pretrained)
    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.horizon_steps)
    import dataclasses as _dc
    reports = {}
    epoch0 = {}
    for mode in ("lora_oci", "lora_no_oci"):
        run_cfg = _dc.replace(cfg, mode=mode)
        log(f"=== ablation arm {mode} ===")
        model, result = adapt(run_cfg, bundle, pretrained, cfg.seed, log,
                              config_hash=chash)
        epoch0[mode] = result.val_losses[0]
        fc = ModelForecaster(mode, model, bundle.stats)
        reports[mode] = evaluate([fc], bundle.manifests["test"], bundle.store,
                                 bundle.climatology, include_persistence=False,
                                 max_pairs=cfg.eval_max_pairs or None,
                                 seed=cfg.seed, config_hash=chash)
    log(f"epoch-0 val losses: lora_oci {epoch0['lora_oci']:.9f}, "
        f"lora_no_oci {epoch0['lora_no_oci']:.9f}")
    delta = MetricReport(split="test", seed=cfg.seed, config_hash=chash)
    for row_oci in reports["lora_oci"].rows:
        row_no = reports["lora_no_oci"].row_for("lora_no_oci", row_oci.variable)
        delta.rows.append(MetricRow(
            model="wrmse(lora_no_oci)-wrmse(lora_oci)", variable=row_oci.variable,
            horizon_steps=row_oci.horizon_steps,
            wrmse=row_no.wrmse - row_oci.wrmse, wacc=None, acc_defined=False,
            n_samples=row_oci.n_samples))
    delta.save_csv(out / "ablation_delta.csv")
    for name, rep in reports.items():
        rep.save_csv(out / f"ablation_{name}.csv")
    log(f"wrote {out / 'ablation_delta.csv'}")
    log.save(out / "ablate.log")
    print(delta.to_csv_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="telecast",
        description="Teleconnection-gated adaptation pipeline on synthetic grids")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override config out_dir")
    parser.add_argument("--overwrite", action="store_true",
                        help="allow writing into a non-empty data dir")
    parser.add_argument("--force", action="store_true",
                        help="ignore checkpoint/config hash mismatches")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic dataset")
    sub.add_parser("pretrain", help="train the short-lead backbone proxy")

    p_adapt = sub.add_parser("adapt", help="adapt from a pretrained checkpoint")
    p_adapt.add_argument("--pretrained", required=True)

    p_roll = sub.add_parser("rollout", help="iterate the short-lead model to the horizon")
    p_roll.add_argument("--pretrained", required=True)
    p_roll.add_argument("--steps", type=int, default=None)

    p_eval = sub.add_parser("evaluate", help="score checkpoints on a split")
    p_eval.add_argument("--checkpoints", nargs="*", default=[])
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))

    p_abl = sub.add_parser("ablate", help="paired lora_oci vs lora_no_oci run")
    p_abl.add_argument("--pretrained", required=True)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
