"""The desk-scale skill experiment: from one pretrained proxy checkpoint,
adapt with and without the ocean-index input across several seeds and
compare latitude-weighted RMSE on the generator's coupled variables.

Cross-variable aggregation normalizes each variable's RMSE by its training
standard deviation, since the synthetic variables deliberately live in
different physical units (a raw average would be dominated by the
largest-unit variable).
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_from_model
from .config import RunConfig
from .grids import parse_variable_label
from .metrics import evaluate
from .synthetic import generate_synthetic
from .train import DataBundle, ModelForecaster, RunLog, adapt, pretrain_proxy

# settings tuned for CPU-minutes runtime at the full 2,000-step dataset
EXPERIMENT_OVERRIDES = dict(
    embed_dim=48,
    gate_width=8,
    gate_lr_scale=8.0,
    lr=5e-3,
    epochs=6,
    max_pairs_per_epoch=256,
    batch_size=16,
    val_max_pairs=96,
    pretrain_epochs=2,
    pretrain_pairs_per_epoch=192,
    pretrain_lr=2e-3,
)


@dataclass
class SkillResult:
    coupled_variables: list
    per_variable: dict          # variable -> {"lora_oci": [..], "lora_no_oci": [..], "persistence": ..}
    margins: list               # one standardized margin per seed (percent)
    mean_margin: float = 0.0
    beats_persistence: dict = field(default_factory=dict)  # variable -> bool
    runtime_seconds: float = 0.0
    seeds: tuple = ()

    def summary_lines(self) -> list:
        lines = [f"seeds {list(self.seeds)}; runtime {self.runtime_seconds:.0f}s",
                 f"mean standardized margin lora_oci over lora_no_oci: "
                 f"{self.mean_margin:.2f}% (per seed: "
                 + ", ".join(f"{m:.2f}%" for m in self.margins) + ")"]
        for v in self.coupled_variables:
            oci = np.mean(self.per_variable[v]["lora_oci"])
            no = np.mean(self.per_variable[v]["lora_no_oci"])
            pers = np.mean(self.per_variable[v]["persistence"])
            lines.append(f"  {v}: lora_oci {oci:.4f}  lora_no_oci {no:.4f}  "
                         f"persistence {pers:.4f}")
        return lines


def experiment_config(workdir, overrides: dict | None = None) -> RunConfig:
    base = dict(EXPERIMENT_OVERRIDES)
    base.update(overrides or {})
    workdir = Path(workdir)
    return RunConfig(data_dir=str(workdir / "data"), out_dir=str(workdir / "out"), **base)


def run_skill_experiment(workdir, seeds=(1, 2, 3), overrides: dict | None = None,
                         echo: bool = False) -> SkillResult:
    t0 = time.time()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = experiment_config(workdir, overrides)
    log = RunLog(echo=echo)

    data_dir = Path(cfg.data_dir)
    if not (data_dir / "truth.json").exists():
        log("generating dataset")
        generate_synthetic(cfg.synthetic_config(), cfg.seed, data_dir)
    truth = json.loads((data_dir / "truth.json").read_text())
    coupled = truth["coupled_variables"]

    bundle = DataBundle.open(cfg.data_dir, horizon=cfg.horizon_steps)
    log("pretraining the short-lead proxy")
    pre_model, _ = pretrain_proxy(cfg, bundle.horizon_view(cfg.pretrain_horizon),
                                  cfg.seed, log)
    pre_ckpt = checkpoint_from_model(pre_model, tag="pretrained-1day")

    def sigma(label: str) -> float:
        kind, c, z = parse_variable_label(label, cfg.grid())
        if kind == "surface":
            return float(bundle.stats.surface_std[c])
        return float(bundle.stats.upper_std[c, z])

    per_variable = {v: {"lora_oci": [], "lora_no_oci": [], "persistence": []}
                    for v in coupled}
    margins = []
    for seed in seeds:
        forecasters = []
        for mode in ("lora_oci", "lora_no_oci"):
            mcfg = dataclasses.replace(cfg, mode=mode, seed=seed)
            log(f"seed {seed}: adapting {mode}")
            model, _ = adapt(mcfg, bundle, pre_ckpt, seed, log)
            forecasters.append(ModelForecaster(mode, model, bundle.stats))
        report = evaluate(forecasters, bundle.manifests["test"], bundle.store,
                          bundle.climatology, seed=seed)
        std_means = {}
        for name in ("lora_oci", "lora_no_oci", "persistence"):
            vals = [report.row_for(name, v).wrmse for v in coupled]
            for v, w in zip(coupled, vals):
                per_variable[v][name].append(w)
            std_means[name] = float(np.mean([w / sigma(v) for v, w in zip(coupled, vals)]))
        margin = 100.0 * (std_means["lora_no_oci"] - std_means["lora_oci"]) \
            / std_means["lora_no_oci"]
        margins.append(margin)
        log(f"seed {seed}: standardized margin {margin:.2f}%")

    result = SkillResult(
        coupled_variables=coupled,
        per_variable=per_variable,
        margins=margins,
        mean_margin=float(np.mean(margins)),
        beats_persistence={
            v: float(np.mean(per_variable[v]["lora_oci"]))
            < float(np.mean(per_variable[v]["persistence"]))
            for v in coupled},
        runtime_seconds=time.time() - t0,
        seeds=tuple(seeds),
    )
    for line in result.summary_lines():
        log(line)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "skill_experiment.json").write_text(json.dumps({
        "seeds": list(seeds),
        "coupled_variables": coupled,
        "margins_percent": margins,
        "mean_margin_percent": result.mean_margin,
        "beats_persistence": result.beats_persistence,
        "per_variable": per_variable,
        "runtime_seconds": result.runtime_seconds,
    }, indent=1, sort_keys=True))
    log.save(out_dir / "skill_experiment.log")
    return result
