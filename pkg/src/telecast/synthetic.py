"""Synthetic teleconnection-driven dataset generator.

Each ocean index evolves as a noisy damped oscillator with its own period
(one near 12 steps, the annual analog). Every index couples to one grid
variable through a fixed, spatially localized bump pattern placed far from a
nominal source point, delayed by a per-index lag of 1..n_lags-1 steps:

    field(t) = seasonal climatology(phase)
             + sum_k  sign_k * amp * oci_k(t - lag_k) * pattern_k
             + AR(1) red noise

The generating patterns, lags and couplings are written to a truth sidecar
so tests can score models against the exact mechanism.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .grids import (DataError, GridSpec, N_SURFACE, N_UPPER, parse_variable_label,
                    split_manifest)
from .rng import RngStream
from .tensorfile import save_tensor

DEFAULT_COUPLED = ("t2m", "u10m", "v10m", "msl", "z500", "t850")
_OCI_BURN_IN = 300

# per-channel scale so variables live in visibly different physical units
_SURFACE_UNITS = (3.0, 1.5, 1.5, 12.0)
_UPPER_UNITS = (60.0, 0.4, 4.0, 2.0, 2.0)


@dataclass
class SyntheticConfig:
    grid: GridSpec = dc_field(default_factory=lambda: GridSpec(16, 32, 3))
    n_steps: int = 2000
    horizon: int = 28
    season_steps: int = 12
    n_indices: int = 16
    n_lags: int = 22
    train_frac: float = 0.70
    val_frac: float = 0.15
    coupling_amplitude: float = 1.2
    noise_amplitude: float = 0.25
    noise_phi: float = 0.8
    oci_damping: float = 0.985
    oci_noise: float = 0.15
    missing_fraction: float = 0.02
    seasonal_amplitude: float = 1.0
    coupled_variables: tuple = DEFAULT_COUPLED


def _oscillator_periods(n: int, horizon: int, season_steps: int = 12) -> np.ndarray:
    """Distinct periods at (near-)quarter-phase points of the horizon.

    With cos(2*pi*horizon/T) near zero, an index's value at the target lead
    is in quadrature with its value today, so a single input frame carries
    almost no usable anomaly persistence while the full lag history still
    pins the oscillator's phase. The first period is the annual analog
    (closest to 12 steps); after it, periods that couple cleanly (mid-range,
    off the calendar harmonics) are preferred.
    """
    candidates = []
    for k in range(40):
        for q in (0.25, 0.75, 0.2, 0.3, 0.7, 0.8):
            t = horizon / (k + q)
            if 5.0 <= t <= 4.0 * horizon:
                candidates.append(t)
    candidates = sorted(set(candidates), key=lambda t: abs(t - 12.0))
    annual = candidates[0]
    rest = candidates[1:]
    clean = [t for t in rest if _couples_cleanly(t, season_steps)]
    dirty = [t for t in rest if not _couples_cleanly(t, season_steps)]
    ladder = ([annual] + clean + dirty)[:n]
    return np.array(ladder)


def _simulate_oci(cfg: SyntheticConfig, rng: RngStream) -> np.ndarray:
    """(n_indices, lead + n_steps) rows rescaled to unit variance."""
    lead = cfg.n_lags - 1
    total = _OCI_BURN_IN + lead + cfg.n_steps
    periods = _oscillator_periods(cfg.n_indices, cfg.horizon, cfg.season_steps)
    rho = cfg.oci_damping
    eps = rng.normal((cfg.n_indices, total), 0.0, cfg.oci_noise)
    series = np.zeros((cfg.n_indices, total))
    coef1 = 2.0 * rho * np.cos(2.0 * math.pi / periods)
    coef2 = -rho * rho
    for t in range(2, total):
        series[:, t] = coef1 * series[:, t - 1] + coef2 * series[:, t - 2] + eps[:, t]
    series = series[:, _OCI_BURN_IN:]
    std = series.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    return series / std


def _aliases_calendar(period: float, season_steps: int) -> bool:
    """True when the oscillation sits within ~8% of a calendar harmonic."""
    for mult in (0.5, 1.0, 2.0):
        ref = season_steps * mult
        if abs(period - ref) < 0.08 * ref:
            return True
    return False


def _couples_cleanly(period: float, season_steps: int) -> bool:
    """Coupled indices need mid-range periods: long oscillations are too
    hard to extrapolate from the lag window, calendar-harmonic ones beat
    against the climatology buckets. The rest stay uncoupled distractors."""
    return 6.5 <= period <= 18.0 and not _aliases_calendar(period, season_steps)


def _bump_pattern(grid: GridSpec, center: tuple, width: float) -> np.ndarray:
    ci, cj = center
    i = np.arange(grid.n_lat)[:, None]
    j = np.arange(grid.n_lon)[None, :]
    dj = np.abs(j - cj)
    dj = np.minimum(dj, grid.n_lon - dj)   # longitude wraps
    d2 = (i - ci) ** 2 + dj ** 2
    return np.exp(-d2 / (2.0 * width * width))


def _sample_pattern_center(grid: GridSpec, rng: RngStream) -> tuple:
    """A center well away from the nominal source of the indices."""
    source = (grid.n_lat // 2, grid.n_lon // 4)
    min_dist = max(4.0, grid.n_lon / 4.0)
    while True:
        ci = int(rng.integers(1, grid.n_lat - 1))
        cj = int(rng.integers(0, grid.n_lon))
        dj = abs(cj - source[1])
        dj = min(dj, grid.n_lon - dj)
        if math.hypot(ci - source[0], dj) >= min_dist:
            return (ci, cj)


def _climatology_tables(cfg: SyntheticConfig, rng: RngStream):
    """Seasonal, latitude-shaped base state per channel (and level)."""
    g = cfg.grid
    cos_lat = np.cos(np.radians(g.lat_degrees))[:, None]
    lon_wave = np.cos(2.0 * math.pi * np.arange(g.n_lon)[None, :] / g.n_lon)
    phases = 2.0 * math.pi * np.arange(cfg.season_steps) / cfg.season_steps

    def channel_table(unit: float, stream: RngStream) -> np.ndarray:
        c = stream.normal((5,), 0.0, 1.0)
        psi = float(stream.uniform((), 0.0, 2.0 * math.pi))
        offset = 2.0 * c[0]
        static = 0.8 * c[1] * cos_lat + 0.3 * c[2] * lon_wave * cos_lat
        seasonal = (0.6 * c[3] + 0.4 * c[4] * cos_lat)
        table = np.empty((cfg.season_steps, g.n_lat, g.n_lon))
        for p, theta in enumerate(phases):
            table[p] = static + cfg.seasonal_amplitude * math.cos(theta + psi) * seasonal
        # fixed spread per channel so the coupled anomaly share does not
        # depend on the luck of the structure draws
        spread = table.std()
        if spread > 0:
            table /= spread
        return unit * (offset + table)

    surface = np.stack([channel_table(_SURFACE_UNITS[c], rng.split(f"s{c}"))
                        for c in range(N_SURFACE)], axis=1)
    upper = np.stack(
        [np.stack([channel_table(_UPPER_UNITS[v] * (1.0 + 0.25 * z), rng.split(f"u{v}l{z}"))
                   for z in range(g.n_level)], axis=1)
         for v in range(N_UPPER)], axis=1)
    return surface, upper   # (P, 4, H, W), (P, 5, Z, H, W)


def generate_synthetic(cfg: SyntheticConfig, seed: int, out_dir) -> dict:
    """Write the dataset plus truth sidecar; returns the split manifests."""
    if cfg.n_steps < cfg.n_lags + cfg.horizon:
        raise DataError(f"{cfg.n_steps} steps cannot support lag window {cfg.n_lags} "
                        f"plus horizon {cfg.horizon}")
    g = cfg.grid
    out = Path(out_dir)
    (out / "steps").mkdir(parents=True, exist_ok=True)
    (out / "truth_patterns").mkdir(exist_ok=True)
    root = RngStream(seed, tag="synthetic")

    series = _simulate_oci(cfg, root.split("oci"))
    missing = root.split("missing").uniform(series.shape) < cfg.missing_fraction
    save_tensor(out / "oci.tns1", series)
    save_tensor(out / "oci_mask.tns1", missing.astype(np.float64))

    lead = cfg.n_lags - 1
    lag_rng = root.split("lags")
    pat_rng = root.split("patterns")
    periods = _oscillator_periods(cfg.n_indices, cfg.horizon, cfg.season_steps)
    couplings = []
    next_var = 0
    for k in range(cfg.n_indices):
        if not _couples_cleanly(periods[k], cfg.season_steps):
            continue
        label = cfg.coupled_variables[next_var % len(cfg.coupled_variables)]
        next_var += 1
        kind, chan, level = parse_variable_label(label, g)
        # coupling strength rides on the variable's own unit scale so the
        # teleconnection term survives per-channel normalization uniformly
        if kind == "surface":
            unit = _SURFACE_UNITS[chan]
        else:
            unit = _UPPER_UNITS[chan] * (1.0 + 0.25 * level)
        lag = int(lag_rng.integers(1, cfg.n_lags))
        sign = 1.0 if float(pat_rng.uniform(())) < 0.5 else -1.0
        center = _sample_pattern_center(g, pat_rng)
        width = 2.0 + 2.0 * float(pat_rng.uniform(()))
        pattern = _bump_pattern(g, center, width)
        pattern_path = f"truth_patterns/pattern_{k:02d}.tns1"
        save_tensor(out / pattern_path, pattern)
        couplings.append({
            "index": k, "variable": label, "kind": kind, "channel": chan,
            "level": level, "lag": lag, "sign": sign, "unit": unit,
            "center": list(center), "width": width, "pattern": pattern_path,
            "_pattern_array": pattern,
        })

    clim_s, clim_u = _climatology_tables(cfg, root.split("clim"))
    noise_rng = root.split("noise")
    phi = cfg.noise_phi
    unit_s = np.asarray(_SURFACE_UNITS)[:, None, None]
    unit_u = (np.asarray(_UPPER_UNITS)[:, None]
              * (1.0 + 0.25 * np.arange(g.n_level))[None, :])[:, :, None, None]
    innov_scale = math.sqrt(max(1.0 - phi * phi, 0.0))
    noise_s = cfg.noise_amplitude * unit_s * noise_rng.normal((N_SURFACE, g.n_lat, g.n_lon))
    noise_u = cfg.noise_amplitude * unit_u * noise_rng.normal(
        (N_UPPER, g.n_level, g.n_lat, g.n_lon))

    files = {}
    amp = cfg.coupling_amplitude
    for t in range(cfg.n_steps):
        phase = t % cfg.season_steps
        surface = clim_s[phase].copy()
        upper = clim_u[phase].copy()
        for c in couplings:
            val = amp * c["unit"] * c["sign"] * series[c["index"], t + lead - c["lag"]]
            if c["kind"] == "surface":
                surface[c["channel"]] += val * c["_pattern_array"]
            else:
                upper[c["channel"], c["level"]] += val * c["_pattern_array"]
        if cfg.noise_amplitude > 0.0:
            surface += noise_s
            upper += noise_u
            noise_s = phi * noise_s + cfg.noise_amplitude * innov_scale * unit_s \
                * noise_rng.normal(noise_s.shape)
            noise_u = phi * noise_u + cfg.noise_amplitude * innov_scale * unit_u \
                * noise_rng.normal(noise_u.shape)
        stem = f"steps/step_{t:05d}"
        save_tensor(out / f"{stem}_surface.tns1", surface)
        save_tensor(out / f"{stem}_upper.tns1", upper)
        files[t] = stem

    truth = {
        "seed": seed,
        "coupling_amplitude": amp,
        "noise_amplitude": cfg.noise_amplitude,
        "noise_phi": phi,
        "season_steps": cfg.season_steps,
        "oci_lead": lead,
        "oci_damping": cfg.oci_damping,
        "oci_periods": list(_oscillator_periods(cfg.n_indices, cfg.horizon, cfg.season_steps)),
        "coupled_variables": sorted({c["variable"] for c in couplings}),
        "indices": [{k: v for k, v in c.items() if not k.startswith("_")}
                    for c in couplings],
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True))

    n_train = int(round(cfg.n_steps * cfg.train_frac))
    n_val = int(round(cfg.n_steps * cfg.val_frac))
    blocks = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, cfg.n_steps),
    }
    manifests = split_manifest(blocks, cfg.horizon, files, g, seed,
                               cfg.season_steps, cfg.n_lags)
    for name, manifest in manifests.items():
        manifest.root = out
        manifest.save(out / f"manifest_{name}.json")
    return manifests
