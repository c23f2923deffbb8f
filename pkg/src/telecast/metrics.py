"""Latitude-weighted verification: weighted RMSE, weighted anomaly
correlation, the persistence reference, and report assembly.

Weights are normalized to mean one, so with equal latitudes both metrics
collapse to their unweighted forms. Scores are computed in physical units on
denormalized fields; an anomaly is a field minus the climatology at the
target's calendar phase.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .grids import (Climatology, DatasetManifest, FieldStore, GridSpec, GridSample,
                    NormStats, N_SURFACE, N_UPPER, level_labels, variable_labels,
                    SURFACE_VARS, UPPER_VARS)


class MetricError(ValueError):
    pass


def lat_weights(grid: GridSpec) -> np.ndarray:
    """L(i) = n_lat * cos(phi_i) / sum_j cos(phi_j); positive, mean exactly 1."""
    cos = np.cos(np.radians(grid.lat_degrees))
    if (cos <= 0).any():
        raise MetricError("latitude weights need cos(phi) > 0 everywhere (no poles)")
    return grid.n_lat * cos / cos.sum()


def wrmse(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """Latitude-weighted root-mean-square error over one (n_lat, n_lon) field."""
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise MetricError("wrmse inputs must be finite")
    err = pred - target
    return float(np.sqrt(np.mean(weights[:, None] * err * err)))


def wacc(pred: np.ndarray, target: np.ndarray, climatology: np.ndarray,
         weights: np.ndarray) -> float | None:
    """Weighted uncentered correlation of anomalies; None when undefined.

    Undefined means either anomaly has zero weighted norm; that is flagged
    rather than silently reported as zero.
    """
    if pred.shape != target.shape or pred.shape != climatology.shape:
        raise MetricError(f"shape mismatch: {pred.shape}, {target.shape}, "
                          f"{climatology.shape}")
    pa = pred - climatology
    ta = target - climatology
    w = weights[:, None]
    num = float(np.sum(w * pa * ta))
    pn = float(np.sum(w * pa * pa))
    tn = float(np.sum(w * ta * ta))
    if pn == 0.0 or tn == 0.0:
        return None
    value = num / np.sqrt(pn * tn)
    # clamp pure rounding spill beyond the mathematical range
    if 1.0 < abs(value) < 1.0 + 1e-12:
        value = float(np.sign(value))
    return float(value)


def persistence(sample: GridSample) -> tuple[np.ndarray, np.ndarray]:
    """The input state replicated forward, unchanged."""
    return sample.surface.copy(), sample.upper.copy()


@dataclass
class MetricRow:
    model: str
    variable: str
    horizon_steps: int
    wrmse: float
    wacc: float | None
    acc_defined: bool
    n_samples: int


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    split: str = ""
    seed: int = 0
    config_hash: str = ""

    CSV_COLUMNS = ("model", "variable", "horizon_steps", "wrmse", "wacc",
                   "acc_defined", "n_samples")

    def row_for(self, model: str, variable: str) -> MetricRow:
        for r in self.rows:
            if r.model == model and r.variable == variable:
                return r
        raise KeyError(f"no row for ({model!r}, {variable!r})")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.model, r.variable, r.horizon_steps, repr(r.wrmse),
                "" if r.wacc is None else repr(r.wacc),
                int(r.acc_defined), r.n_samples])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv_text())


def _field_views(surface: np.ndarray, upper: np.ndarray, grid: GridSpec):
    """Yield (label, (n_lat, n_lon) view) per variable, surface rows first."""
    for c, name in enumerate(SURFACE_VARS):
        yield name, surface[c]
    for v, name in enumerate(UPPER_VARS):
        for z, lev in enumerate(level_labels(grid.n_level)):
            yield f"{name}{lev}", upper[v, z]


class Forecaster:
    """One scored method: name plus a physical-units prediction per sample."""

    name = "base"

    def predict(self, sample: GridSample) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def predict_batch(self, samples) -> tuple[np.ndarray, np.ndarray]:
        preds = [self.predict(s) for s in samples]
        return (np.stack([p[0] for p in preds]), np.stack([p[1] for p in preds]))


class PersistenceForecaster(Forecaster):
    name = "persistence"

    def predict(self, sample: GridSample) -> tuple[np.ndarray, np.ndarray]:
        return persistence(sample)


def evaluate(forecasters, manifest: DatasetManifest, store: FieldStore,
             climatology: Climatology, stats: NormStats | None = None,
             max_pairs: int | None = None, include_persistence: bool = True,
             seed: int = 0, config_hash: str = "") -> MetricReport:
    """Score every forecaster per variable over the manifest's pairs.

    Rows are emitted in a fixed order (persistence first, then the given
    forecasters; surface variables before upper) so repeated runs produce
    identical reports.
    """
    if not manifest.pairs:
        raise MetricError(f"manifest for split {manifest.split!r} has no pairs")
    pairs = manifest.pairs[:max_pairs] if max_pairs else manifest.pairs
    grid = manifest.grid
    weights = lat_weights(grid)
    methods = list(forecasters)
    if include_persistence:
        methods = [PersistenceForecaster()] + methods

    labels = variable_labels(grid)
    acc: dict[tuple, dict] = {
        (m.name, v): {"rmse": [], "acc": [], "undefined": 0}
        for m in methods for v in labels}

    chunk_size = 16
    for start in range(0, len(pairs), chunk_size):
        chunk = pairs[start:start + chunk_size]
        samples = [store.sample(t_in) for t_in, _ in chunk]
        predictions = {m.name: m.predict_batch(samples) for m in methods}
        for b, (t_in, t_tgt) in enumerate(chunk):
            tgt_surface, tgt_upper = store.load_fields(t_tgt)
            clim_s, clim_u = climatology.at(t_tgt)
            for m in methods:
                pred_surface, pred_upper = predictions[m.name]
                preds = _field_views(pred_surface[b], pred_upper[b], grid)
                tgts = _field_views(tgt_surface, tgt_upper, grid)
                clims = _field_views(clim_s, clim_u, grid)
                for (label, p), (_, y), (_, c) in zip(preds, tgts, clims):
                    cell = acc[(m.name, label)]
                    cell["rmse"].append(wrmse(p, y, weights))
                    a = wacc(p, y, c, weights)
                    if a is None:
                        cell["undefined"] += 1
                    else:
                        cell["acc"].append(a)

    report = MetricReport(split=manifest.split, seed=seed, config_hash=config_hash)
    for m in methods:
        for label in labels:
            cell = acc[(m.name, label)]
            defined = cell["undefined"] == 0 and bool(cell["acc"])
            report.rows.append(MetricRow(
                model=m.name, variable=label, horizon_steps=manifest.horizon_steps,
                wrmse=float(np.mean(cell["rmse"])),
                wacc=float(np.mean(cell["acc"])) if cell["acc"] else None,
                acc_defined=defined, n_samples=len(pairs)))
    return report
