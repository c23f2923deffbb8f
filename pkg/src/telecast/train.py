"""Training loops and scored forecasters.

The adaptation objective is a latitude-weighted mean-squared error in
normalized space with equal weight per variable, minimized over exactly the
trainable-flagged tensors; that set is asserted against the optimizer's
parameter set on every step, and frozen tensors are never touched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model, load_into_model
from .config import RunConfig
from .grids import (Climatology, DatasetManifest, FieldStore, GridSample, NormStats,
                    compute_climatology, compute_norm_stats, split_manifest)
from .metrics import Forecaster, lat_weights
from .model import (ForecastModel, apply_mode_flags, build_model,
                    trainable_named_parameters, frozen_named_parameters,
                    parameter_group)
from .lora import account_parameters, inject_lora
from .optim import Adam, SchedulerConfig, lr_at
from .rng import RngStream
from .temporal import OciGate
from .tensor import Tensor, no_grad


class TrainError(RuntimeError):
    pass


class PretrainSkillError(TrainError):
    """The pretraining proxy failed to beat persistence on validation."""


class RunLog:
    """Collects run log lines; optionally echoes to stdout."""

    def __init__(self, echo: bool = False):
        self.lines: list[str] = []
        self.echo = echo

    def __call__(self, msg: str) -> None:
        self.lines.append(msg)
        if self.echo:
            print(msg)

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.text())


class BatchSource:
    """Normalized in-memory arrays for one split, indexed by timestamp."""

    def __init__(self, store: FieldStore, manifest: DatasetManifest, stats: NormStats):
        self.manifest = manifest
        self.stats = stats
        steps = sorted(manifest.files)
        self._index = {t: i for i, t in enumerate(steps)}
        surface = np.stack([store.load_fields(t)[0] for t in steps])
        upper = np.stack([store.load_fields(t)[1] for t in steps])
        self.surface = stats.normalize_surface(surface)
        self.upper = stats.normalize_upper(upper)
        series, mask = store.oci_series()
        z = (series - stats.oci_mean[:, None]) / stats.oci_std[:, None]
        z[mask] = 0.0
        self._oci_filled = z
        self._lags = manifest.oci_lags

    def with_manifest(self, manifest: DatasetManifest) -> "BatchSource":
        """Same arrays under a manifest with different pairs (e.g. horizon)."""
        view = object.__new__(BatchSource)
        view.__dict__.update(self.__dict__)
        view.manifest = manifest
        return view

    def fields(self, timestamps) -> tuple[np.ndarray, np.ndarray]:
        idx = [self._index[t] for t in timestamps]
        return self.surface[idx], self.upper[idx]

    def oci(self, timestamps) -> np.ndarray:
        lags = self._lags
        cols = [t + lags - 1 for t in timestamps]
        return np.stack([self._oci_filled[:, c - lags + 1:c + 1] for c in cols])


def weighted_mse(pred_s: Tensor, pred_u: Tensor, tgt_s: Tensor, tgt_u: Tensor,
                 weights: np.ndarray) -> Tensor:
    """Latitude-weighted MSE, equal weight per variable (4 surface, 5 upper)."""
    w_s = Tensor(weights.reshape(1, 1, -1, 1))
    w_u = Tensor(weights.reshape(1, 1, 1, -1, 1))
    es = pred_s - tgt_s
    eu = pred_u - tgt_u
    m_s = (es * es * w_s).mean()
    m_u = (eu * eu * w_u).mean()
    return m_s * (4.0 / 9.0) + m_u * (5.0 / 9.0)


@dataclass
class TrainResult:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    best_checkpoint: Checkpoint | None = None
    steps: int = 0


def _validation_loss(model: ForecastModel, source: BatchSource, pairs,
                     weights: np.ndarray, batch_size: int) -> float:
    model.eval()
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            t_in = [p[0] for p in chunk]
            t_tgt = [p[1] for p in chunk]
            s_in, u_in = source.fields(t_in)
            s_tgt, u_tgt = source.fields(t_tgt)
            oci = source.oci(t_in)
            pred_s, pred_u = model(Tensor(s_in), Tensor(u_in), Tensor(oci))
            loss = weighted_mse(pred_s, pred_u, Tensor(s_tgt), Tensor(u_tgt), weights)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def train_model(model: ForecastModel, train_source: BatchSource, val_source: BatchSource,
                sched: SchedulerConfig, weight_decay: float, batch_size: int,
                max_pairs_per_epoch: int, seed: int, log: RunLog,
                config_hash: str = "", tag: str = "",
                val_max_pairs: int = 0, lr_scales: dict | None = None) -> TrainResult:
    """Generic loop: Adam over the trainable flag set, milestone LR schedule,
    best-validation checkpoint kept, NaN loss aborts with the last good state."""
    weights = lat_weights(train_source.manifest.grid)
    train_pairs = list(train_source.manifest.pairs)
    val_pairs = list(val_source.manifest.pairs)
    if val_max_pairs:
        stride = max(len(val_pairs) // val_max_pairs, 1)
        val_pairs = val_pairs[::stride][:val_max_pairs]
    trainables = trainable_named_parameters(model)
    if not trainables:
        raise TrainError("no trainable parameters for this mode")
    frozen_names = {n for n, _ in frozen_named_parameters(model)}
    opt = Adam(trainables, lr=sched.base_lr, weight_decay=weight_decay,
               lr_scales=lr_scales or {})
    rng = RngStream(seed, tag="train")
    result = TrainResult()
    last_good = checkpoint_from_model(model, epoch=-1, config_hash=config_hash, tag=tag)

    for epoch in range(sched.total_epochs):
        lr = lr_at(epoch, sched)
        if epoch > 0 and lr != lr_at(epoch - 1, sched):
            log(f"epoch {epoch}: lr decayed to {lr:.3g}")
        opt.lr = lr
        order = rng.child(epoch).permutation(len(train_pairs))
        if max_pairs_per_epoch:
            order = order[:max_pairs_per_epoch]
        model.train(True)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(order), batch_size):
            sel = [train_pairs[i] for i in order[start:start + batch_size]]
            t_in = [p[0] for p in sel]
            t_tgt = [p[1] for p in sel]
            s_in, u_in = train_source.fields(t_in)
            s_tgt, u_tgt = train_source.fields(t_tgt)
            oci = train_source.oci(t_in)
            model.set_dropout_rng(rng.child(result.steps).split("dropout"))
            pred_s, pred_u = model(Tensor(s_in), Tensor(u_in), Tensor(oci))
            loss = weighted_mse(pred_s, pred_u, Tensor(s_tgt), Tensor(u_tgt), weights)
            value = loss.item()
            if np.isnan(value):
                log(f"epoch {epoch}: NaN loss, aborting with last good checkpoint")
                result.best_checkpoint = result.best_checkpoint or last_good
                raise TrainError("NaN training loss")
            loss.backward(leaves=[p for _, p in trainables])
            # the updated set must equal the trainable flag set, every step
            now_trainable = {n for n, p in model.named_parameters() if p.requires_grad}
            assert opt.updated_names() == now_trainable, "trainable set drifted"
            assert not (now_trainable & frozen_names), "frozen tensor became trainable"
            opt.step()
            opt.zero_grad()
            result.steps += 1
            epoch_loss += value * len(sel)
            seen += len(sel)
        train_loss = epoch_loss / max(seen, 1)
        val_loss = _validation_loss(model, val_source, val_pairs, weights, batch_size)
        result.train_losses.append(train_loss)
        result.val_losses.append(val_loss)
        log(f"epoch {epoch}: lr {lr:.3g} train {train_loss:.6f} val {val_loss:.6f}")
        last_good = checkpoint_from_model(model, epoch=epoch, config_hash=config_hash,
                                          tag=tag, optimizer=opt)
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            result.best_checkpoint = last_good
    return result


# -- dataset plumbing shared by the commands ---------------------------------


def manifest_with_horizon(manifest: DatasetManifest, horizon: int) -> DatasetManifest:
    """Same split, same files, pairs recut at a different horizon."""
    steps = sorted(manifest.files)
    block = {manifest.split: (steps[0], steps[-1] + 1)}
    out = split_manifest(block, horizon, manifest.files, manifest.grid, manifest.seed,
                         manifest.season_steps, manifest.oci_lags)[manifest.split]
    out.root = manifest.root
    return out


@dataclass
class DataBundle:
    manifests: dict
    store: FieldStore
    stats: NormStats
    climatology: Climatology
    sources: dict

    @classmethod
    def open(cls, data_dir, horizon: int | None = None) -> "DataBundle":
        manifests = {name: DatasetManifest.load(f"{data_dir}/manifest_{name}.json")
                     for name in ("train", "val", "test")}
        if horizon is not None and horizon != manifests["train"].horizon_steps:
            manifests = {k: manifest_with_horizon(m, horizon) for k, m in manifests.items()}
        store = FieldStore(data_dir, manifests["train"])
        # loads may hit any split's steps; merge the file maps
        merged_files = {}
        for m in manifests.values():
            merged_files.update(m.files)
        store.manifest = DatasetManifest(
            split="all", grid=manifests["train"].grid,
            horizon_steps=manifests["train"].horizon_steps,
            seed=manifests["train"].seed, pairs=[], files=merged_files,
            season_steps=manifests["train"].season_steps,
            oci_lags=manifests["train"].oci_lags,
            oci_path=manifests["train"].oci_path,
            oci_mask_path=manifests["train"].oci_mask_path)
        stats = compute_norm_stats(store, manifests["train"])
        climatology = compute_climatology(store, manifests["train"],
                                          manifests["train"].season_steps)
        sources = {name: BatchSource(store, m, stats) for name, m in manifests.items()}
        return cls(manifests=manifests, store=store, stats=stats,
                   climatology=climatology, sources=sources)

    def horizon_view(self, horizon: int) -> "DataBundle":
        """Share the loaded arrays, stats and climatology; recut pairs only."""
        if horizon == self.manifests["train"].horizon_steps:
            return self
        manifests = {k: manifest_with_horizon(m, horizon)
                     for k, m in self.manifests.items()}
        sources = {k: self.sources[k].with_manifest(m) for k, m in manifests.items()}
        return DataBundle(manifests=manifests, store=self.store, stats=self.stats,
                          climatology=self.climatology, sources=sources)


# -- forecasters --------------------------------------------------------------


class ModelForecaster(Forecaster):
    """Normalizes raw samples, runs the model in eval mode, denormalizes."""

    def __init__(self, name: str, model: ForecastModel, stats: NormStats):
        self.name = name
        self.model = model
        self.stats = stats

    def predict_batch(self, samples) -> tuple[np.ndarray, np.ndarray]:
        st = self.stats
        s_in = st.normalize_surface(np.stack([s.surface for s in samples]))
        u_in = st.normalize_upper(np.stack([s.upper for s in samples]))
        oci = np.stack([st.normalize_oci(s.oci, s.oci_missing) for s in samples])
        self.model.eval()
        with no_grad():
            pred_s, pred_u = self.model(Tensor(s_in), Tensor(u_in), Tensor(oci))
        return (st.denormalize_surface(pred_s.data), st.denormalize_upper(pred_u.data))

    def predict(self, sample: GridSample):
        s, u = self.predict_batch([sample])
        return s[0], u[0]


class RolloutForecaster(Forecaster):
    """Applies a short-lead model iteratively, feeding outputs back as inputs.

    The ocean-index window advances along the stored true history each
    iteration (indices are observed, not forecast).
    """

    def __init__(self, name: str, model: ForecastModel, stats: NormStats,
                 store: FieldStore, model_step: int, horizon: int):
        if horizon % model_step:
            raise TrainError(f"horizon {horizon} is not a multiple of the model "
                             f"step {model_step}; fractional steps are not defined")
        self.name = name
        self.model = model
        self.stats = stats
        self.store = store
        self.model_step = model_step
        self.iterations = horizon // model_step

    def predict_batch(self, samples) -> tuple[np.ndarray, np.ndarray]:
        st = self.stats
        s_state = st.normalize_surface(np.stack([s.surface for s in samples]))
        u_state = st.normalize_upper(np.stack([s.upper for s in samples]))
        times = [s.timestamp for s in samples]
        self.model.eval()
        with no_grad():
            for j in range(self.iterations):
                oci = []
                for t in times:
                    window, mask = self.store.oci_window(t + j * self.model_step)
                    oci.append(st.normalize_oci(window, mask))
                pred_s, pred_u = self.model(Tensor(s_state), Tensor(u_state),
                                            Tensor(np.stack(oci)))
                s_state, u_state = pred_s.data, pred_u.data
        return st.denormalize_surface(s_state), st.denormalize_upper(u_state)


class ClimatologyForecaster(Forecaster):
    """Predicts the training climatology at the target's calendar phase."""

    def __init__(self, climatology: Climatology, horizon: int):
        self.name = "climatology"
        self.climatology = climatology
        self.horizon = horizon

    def predict(self, sample: GridSample):
        s, u = self.climatology.at(sample.timestamp + self.horizon)
        return s.copy(), u.copy()


# -- the pretraining proxy and adaptation entry points ------------------------


def mean_weighted_rmse_normalized(model_or_persistence, source: BatchSource, pairs,
                                  weights: np.ndarray, batch_size: int = 32) -> float:
    """Mean over variables and samples of weighted RMSE in normalized space;
    pass None to score persistence (input copied forward)."""
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            t_in = [p[0] for p in chunk]
            t_tgt = [p[1] for p in chunk]
            s_in, u_in = source.fields(t_in)
            s_tgt, u_tgt = source.fields(t_tgt)
            if model_or_persistence is None:
                ps, pu = s_in, u_in
            else:
                model_or_persistence.eval()
                o = source.oci(t_in)
                pred = model_or_persistence(Tensor(s_in), Tensor(u_in), Tensor(o))
                ps, pu = pred[0].data, pred[1].data
            w_s = weights.reshape(1, 1, -1, 1)
            w_u = weights.reshape(1, 1, 1, -1, 1)
            per_s = np.sqrt(np.mean(w_s * (ps - s_tgt) ** 2, axis=(2, 3)))
            per_u = np.sqrt(np.mean(w_u * (pu - u_tgt) ** 2, axis=(3, 4)))
            total += per_s.sum() + per_u.sum()
            count += per_s.size + per_u.size
    return total / max(count, 1)


def pretrain_proxy(cfg: RunConfig, bundle_short: DataBundle, seed: int, log: RunLog,
                   config_hash: str = "") -> tuple[ForecastModel, TrainResult]:
    """Train the bare backbone on the short-lead task to stand in for a
    pretrained trunk; it must beat persistence on validation to count."""
    rng = RngStream(seed, tag="pretrain")
    model = build_model(cfg.grid(), cfg.backbone_config(), "full_finetune", rng)
    sched = SchedulerConfig(base_lr=cfg.pretrain_lr, gamma=cfg.sched_gamma,
                            milestone_period=cfg.sched_period,
                            total_epochs=cfg.pretrain_epochs)
    result = train_model(model, bundle_short.sources["train"], bundle_short.sources["val"],
                         sched, cfg.weight_decay, cfg.batch_size,
                         cfg.pretrain_pairs_per_epoch, seed, log,
                         config_hash=config_hash, tag="pretrained-1day",
                         val_max_pairs=cfg.val_max_pairs)
    load_into_model(result.best_checkpoint, model)
    weights = lat_weights(cfg.grid())
    val_pairs = bundle_short.manifests["val"].pairs
    model_rmse = mean_weighted_rmse_normalized(model, bundle_short.sources["val"],
                                               val_pairs, weights)
    persist_rmse = mean_weighted_rmse_normalized(None, bundle_short.sources["val"],
                                                 val_pairs, weights)
    log(f"pretrain validation weighted RMSE {model_rmse:.6f} vs persistence "
        f"{persist_rmse:.6f}")
    if not model_rmse < persist_rmse:
        raise PretrainSkillError(
            f"pretraining proxy did not beat persistence "
            f"({model_rmse:.6f} >= {persist_rmse:.6f}); it is misconfigured")
    return model, result


def adapted_model_from_checkpoint(cfg: RunConfig, pretrained: Checkpoint, mode: str,
                                  seed: int):
    """Plain backbone restored from the pretrained checkpoint, then upgraded
    to the requested adaptation mode. Returns (model, ParamAccount)."""
    rng = RngStream(seed, tag="adapt")
    model = build_model(cfg.grid(), cfg.backbone_config(), "frozen", rng)
    load_into_model(pretrained, model)
    if mode in ("lora_oci", "lora_no_oci"):
        model.gate = OciGate(cfg.n_oci, cfg.oci_lags, cfg.embed_dim, rng.split("gate"),
                             width=cfg.gate_width)
        model.use_oci = (mode != "lora_no_oci")
        model.gate_mode = cfg.gate_mode
        inject_lora(model, cfg.lora_target_patterns(), rank=cfg.lora_rank,
                    alpha=cfg.lora_alpha, dropout_p=cfg.lora_dropout,
                    rng=rng.split("lora"))
    model.mode = mode
    account = apply_mode_flags(model, mode)
    return model, account


def adapt(cfg: RunConfig, bundle: DataBundle, pretrained: Checkpoint, seed: int,
          log: RunLog, config_hash: str = "") -> tuple[ForecastModel, TrainResult]:
    model, account = adapted_model_from_checkpoint(cfg, pretrained, cfg.mode, seed)
    frac = account.trainable_fraction()
    log(f"mode {cfg.mode}: {account.trainable_params} of {account.total_params} "
        f"parameters trainable ({100 * frac:.2f}%)")
    for group, f in account.group_fractions().items():
        tot, tr = account.groups[group]
        log(f"  group {group}: {tr}/{tot} trainable")
    before = {n: p.data.copy() for n, p in frozen_named_parameters(model)}
    sched = cfg.scheduler_config()
    result = train_model(model, bundle.sources["train"], bundle.sources["val"], sched,
                         cfg.weight_decay, cfg.batch_size, cfg.max_pairs_per_epoch,
                         seed, log, config_hash=config_hash, tag=f"adapted-{cfg.mode}",
                         val_max_pairs=cfg.val_max_pairs,
                         lr_scales={"gate.": cfg.gate_lr_scale}
                         if cfg.gate_lr_scale != 1.0 else None)
    drift = 0.0
    for n, p in frozen_named_parameters(model):
        drift = max(drift, float(np.max(np.abs(p.data - before[n]))) if p.size else 0.0)
    if drift != 0.0:
        raise TrainError(f"frozen tensors drifted during adaptation (max {drift})")
    log(f"frozen-parameter drift after {result.steps} steps: {drift}")
    load_into_model(result.best_checkpoint, model)
    return model, result
