"""Gridded samples, normalization, climatology, dataset manifests and the
on-disk layout.

A dataset directory holds one surface and one upper tensor per step under
steps/, a single ocean-index series (with a lead-in of lag-window length so
every step has full history), and one manifest JSON per split. Manifest file
entries are path stems; the loader appends _surface / _upper suffixes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorfile import load_tensor

SURFACE_VARS = ("t2m", "u10m", "v10m", "msl")
UPPER_VARS = ("z", "q", "t", "u", "v")
N_SURFACE = len(SURFACE_VARS)
N_UPPER = len(UPPER_VARS)
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


def level_labels(n_level: int) -> tuple[str, ...]:
    """Pressure-style level names; the 3-level toy maps onto 850/500/200."""
    if n_level == 3:
        return ("850", "500", "200")
    return tuple(f"l{i}" for i in range(n_level))


@dataclass(frozen=True)
class GridSpec:
    n_lat: int
    n_lon: int
    n_level: int

    def __post_init__(self):
        if min(self.n_lat, self.n_lon, self.n_level) < 1:
            raise DataError(f"grid dimensions must be positive: {self}")

    @property
    def lat_degrees(self) -> np.ndarray:
        """Cell-centered latitudes, strictly inside (-90, 90) so no pole rows."""
        i = np.arange(self.n_lat)
        return -90.0 + (i + 0.5) * 180.0 / self.n_lat

    def to_json(self) -> dict:
        return {"n_lat": self.n_lat, "n_lon": self.n_lon, "n_level": self.n_level}

    @classmethod
    def from_json(cls, obj: dict) -> "GridSpec":
        return cls(int(obj["n_lat"]), int(obj["n_lon"]), int(obj["n_level"]))


def variable_labels(grid: GridSpec) -> list[str]:
    """Surface rows first, then upper variables per level (t850-style)."""
    labels = list(SURFACE_VARS)
    for v in UPPER_VARS:
        for lev in level_labels(grid.n_level):
            labels.append(f"{v}{lev}")
    return labels


def parse_variable_label(label: str, grid: GridSpec):
    """Inverse of variable_labels: label -> (kind, channel, level or None)."""
    if label in SURFACE_VARS:
        return ("surface", SURFACE_VARS.index(label), None)
    for v_idx, v in enumerate(UPPER_VARS):
        for z_idx, lev in enumerate(level_labels(grid.n_level)):
            if label == f"{v}{lev}":
                return ("upper", v_idx, z_idx)
    raise DataError(f"unknown variable label {label!r}")


@dataclass
class GridSample:
    surface: np.ndarray        # (4, n_lat, n_lon)
    upper: np.ndarray          # (5, Z, n_lat, n_lon)
    oci: np.ndarray            # (n_indices, n_lags), oldest lag first
    oci_missing: np.ndarray    # same shape, True where the entry is absent
    timestamp: int

    def validate(self) -> None:
        for name, arr in (("surface", self.surface), ("upper", self.upper), ("oci", self.oci)):
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite values in {name} at step {self.timestamp}")


# -- normalization -----------------------------------------------------------


@dataclass
class NormStats:
    surface_mean: np.ndarray   # (4,)
    surface_std: np.ndarray
    upper_mean: np.ndarray     # (5, Z)
    upper_std: np.ndarray
    oci_mean: np.ndarray       # (n_indices,)
    oci_std: np.ndarray

    def __post_init__(self):
        self.surface_std = np.maximum(self.surface_std, STD_FLOOR)
        self.upper_std = np.maximum(self.upper_std, STD_FLOOR)
        self.oci_std = np.maximum(self.oci_std, STD_FLOOR)

    def normalize_surface(self, x: np.ndarray) -> np.ndarray:
        return (x - self.surface_mean[:, None, None]) / self.surface_std[:, None, None]

    def denormalize_surface(self, x: np.ndarray) -> np.ndarray:
        return x * self.surface_std[:, None, None] + self.surface_mean[:, None, None]

    def normalize_upper(self, x: np.ndarray) -> np.ndarray:
        return (x - self.upper_mean[:, :, None, None]) / self.upper_std[:, :, None, None]

    def denormalize_upper(self, x: np.ndarray) -> np.ndarray:
        return x * self.upper_std[:, :, None, None] + self.upper_mean[:, :, None, None]

    def normalize_oci(self, oci: np.ndarray, missing: np.ndarray) -> np.ndarray:
        """Standardize with train-period stats of present entries, then
        zero-fill the gaps (zero = climatological mean in normalized space)."""
        z = (oci - self.oci_mean[:, None]) / self.oci_std[:, None]
        return zero_fill_oci(z, missing)


def zero_fill_oci(oci: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace missing entries with exact zeros; present entries unchanged."""
    if oci.shape != missing.shape:
        raise DataError(f"mask shape {missing.shape} does not match oci {oci.shape}")
    out = oci.copy()
    out[missing.astype(bool)] = 0.0
    return out


def normalize_sample(sample: GridSample, stats: NormStats) -> GridSample:
    if sample.surface.shape[0] != stats.surface_mean.shape[0]:
        raise DataError(f"surface channel mismatch: sample {sample.surface.shape[0]} "
                        f"vs stats {stats.surface_mean.shape[0]}")
    if sample.upper.shape[:2] != stats.upper_mean.shape:
        raise DataError(f"upper channel mismatch: sample {sample.upper.shape[:2]} "
                        f"vs stats {stats.upper_mean.shape}")
    return GridSample(
        surface=stats.normalize_surface(sample.surface),
        upper=stats.normalize_upper(sample.upper),
        oci=stats.normalize_oci(sample.oci, sample.oci_missing),
        oci_missing=sample.oci_missing.copy(),
        timestamp=sample.timestamp,
    )


def denormalize_sample(sample: GridSample, stats: NormStats) -> GridSample:
    return GridSample(
        surface=stats.denormalize_surface(sample.surface),
        upper=stats.denormalize_upper(sample.upper),
        oci=sample.oci.copy(),
        oci_missing=sample.oci_missing.copy(),
        timestamp=sample.timestamp,
    )


# -- climatology -------------------------------------------------------------


@dataclass
class Climatology:
    season_steps: int
    surface: np.ndarray   # (season_steps, 4, n_lat, n_lon)
    upper: np.ndarray     # (season_steps, 5, Z, n_lat, n_lon)

    def phase_of(self, timestamp: int) -> int:
        return timestamp % self.season_steps

    def at(self, timestamp: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.phase_of(timestamp)
        return self.surface[p], self.upper[p]


def compute_climatology(store: "FieldStore", manifest: "DatasetManifest",
                        season_steps: int) -> Climatology:
    """Per-phase per-cell mean over the given (training) split only."""
    steps = sorted(manifest.files)
    buckets: dict[int, list[int]] = {}
    for t in steps:
        buckets.setdefault(t % season_steps, []).append(t)
    missing = [p for p in range(season_steps) if p not in buckets]
    if missing:
        raise DataError(f"no training samples for calendar phase(s) {missing}")
    g = manifest.grid
    surface = np.zeros((season_steps, N_SURFACE, g.n_lat, g.n_lon))
    upper = np.zeros((season_steps, N_UPPER, g.n_level, g.n_lat, g.n_lon))
    for phase, ts in buckets.items():
        s_acc = np.zeros_like(surface[0])
        u_acc = np.zeros_like(upper[0])
        for t in ts:
            s, u = store.load_fields(t)
            s_acc += s
            u_acc += u
        surface[phase] = s_acc / len(ts)
        upper[phase] = u_acc / len(ts)
    return Climatology(season_steps=season_steps, surface=surface, upper=upper)


def compute_norm_stats(store: "FieldStore", manifest: "DatasetManifest") -> NormStats:
    """Channel-wise stats over every step of the (training) split."""
    steps = sorted(manifest.files)
    if not steps:
        raise DataError("cannot compute normalization stats from an empty split")
    s_stack = []
    u_stack = []
    for t in steps:
        s, u = store.load_fields(t)
        s_stack.append(s)
        u_stack.append(u)
    s_all = np.stack(s_stack)   # (N, 4, H, W)
    u_all = np.stack(u_stack)   # (N, 5, Z, H, W)
    series, mask = store.oci_series()
    cols = [store.oci_column(t) for t in steps]
    s_vals = series[:, cols]
    s_miss = mask[:, cols]
    oci_mean = np.empty(series.shape[0])
    oci_std = np.empty(series.shape[0])
    for i in range(series.shape[0]):
        present = s_vals[i][~s_miss[i]]
        if present.size == 0:
            oci_mean[i], oci_std[i] = 0.0, 1.0
        else:
            oci_mean[i] = present.mean()
            oci_std[i] = present.std()
    return NormStats(
        surface_mean=s_all.mean(axis=(0, 2, 3)),
        surface_std=s_all.std(axis=(0, 2, 3)),
        upper_mean=u_all.mean(axis=(0, 3, 4)),
        upper_std=u_all.std(axis=(0, 3, 4)),
        oci_mean=oci_mean,
        oci_std=oci_std,
    )


# -- manifests ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    split: str
    grid: GridSpec
    horizon_steps: int
    seed: int
    pairs: list            # [(t_input, t_target), ...]
    files: dict            # {timestamp: path stem relative to root}
    season_steps: int
    oci_lags: int
    oci_path: str = "oci.tns1"
    oci_mask_path: str = "oci_mask.tns1"
    root: Path | None = field(default=None, compare=False)

    def validate(self) -> None:
        for t_in, t_tgt in self.pairs:
            if t_tgt - t_in != self.horizon_steps:
                raise DataError(f"pair ({t_in}, {t_tgt}) does not span "
                                f"horizon {self.horizon_steps}")
            for t in (t_in, t_tgt):
                if t not in self.files:
                    raise DataError(f"pair references step {t} with no file entry")
        if self.root is not None:
            for t, stem in self.files.items():
                for suffix in ("_surface.tns1", "_upper.tns1"):
                    p = self.root / (stem + suffix)
                    if not p.exists():
                        raise DataError(f"missing file for step {t}: {p}")

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "grid": self.grid.to_json(),
            "horizon_steps": self.horizon_steps,
            "seed": self.seed,
            "pairs": [list(p) for p in self.pairs],
            "files": {str(t): stem for t, stem in sorted(self.files.items())},
            "season_steps": self.season_steps,
            "oci_lags": self.oci_lags,
            "oci_path": self.oci_path,
            "oci_mask_path": self.oci_mask_path,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        obj = json.loads(path.read_text())
        manifest = cls(
            split=obj["split"],
            grid=GridSpec.from_json(obj["grid"]),
            horizon_steps=int(obj["horizon_steps"]),
            seed=int(obj["seed"]),
            pairs=[tuple(p) for p in obj["pairs"]],
            files={int(t): stem for t, stem in obj["files"].items()},
            season_steps=int(obj["season_steps"]),
            oci_lags=int(obj["oci_lags"]),
            oci_path=obj["oci_path"],
            oci_mask_path=obj["oci_mask_path"],
            root=path.parent,
        )
        manifest.validate()
        return manifest


def split_manifest(blocks: dict, horizon: int, files: dict, grid: GridSpec, seed: int,
                   season_steps: int, oci_lags: int) -> dict:
    """Cut disjoint contiguous step blocks into per-split manifests.

    No (input, target) pair crosses a block boundary; inputs therefore stop
    horizon steps before each block's end.
    """
    spans = sorted(blocks.items(), key=lambda kv: kv[1][0])
    for (name_a, (sa, ea)), (name_b, (sb, eb)) in zip(spans, spans[1:]):
        if ea > sb:
            raise DataError(f"blocks {name_a} {sa, ea} and {name_b} {sb, eb} overlap")
    out = {}
    for name, (start, end) in blocks.items():
        if end <= start:
            raise DataError(f"block {name!r} is empty: [{start}, {end})")
        pairs = [(t, t + horizon) for t in range(start, end - horizon)]
        if not pairs:
            raise DataError(f"block {name!r} [{start}, {end}) yields no pairs "
                            f"at horizon {horizon}")
        block_files = {t: files[t] for t in range(start, end)}
        out[name] = DatasetManifest(
            split=name, grid=grid, horizon_steps=horizon, seed=seed,
            pairs=pairs, files=block_files, season_steps=season_steps,
            oci_lags=oci_lags)
    return out


# -- loading ------------------------------------------------------------------


class FieldStore:
    """Reads step tensors and the ocean-index series for one dataset dir.

    Loads are pure functions of (root, timestamp) and therefore safe to fan
    out across workers; this implementation memoizes in-process.
    """

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._oci: tuple[np.ndarray, np.ndarray] | None = None

    def load_fields(self, timestamp: int) -> tuple[np.ndarray, np.ndarray]:
        if timestamp not in self._cache:
            stem = self.manifest.files.get(timestamp)
            if stem is None:
                raise DataError(f"step {timestamp} is not in the {self.manifest.split} split")
            surface = load_tensor(self.root / f"{stem}_surface.tns1")
            upper = load_tensor(self.root / f"{stem}_upper.tns1")
            self._cache[timestamp] = (surface, upper)
        return self._cache[timestamp]

    def oci_series(self) -> tuple[np.ndarray, np.ndarray]:
        """Full raw series (n_indices, lead + n_steps) and its missing mask."""
        if self._oci is None:
            series = load_tensor(self.root / self.manifest.oci_path)
            mask = load_tensor(self.root / self.manifest.oci_mask_path).astype(bool)
            self._oci = (series, mask)
        return self._oci

    def oci_column(self, timestamp: int) -> int:
        # series columns start lag-window-minus-one steps before step 0
        return timestamp + self.manifest.oci_lags - 1

    def oci_window(self, timestamp: int) -> tuple[np.ndarray, np.ndarray]:
        """Lag matrix (n_indices, n_lags) ending at the given step, oldest first."""
        series, mask = self.oci_series()
        lags = self.manifest.oci_lags
        end = self.oci_column(timestamp) + 1
        if end - lags < 0 or end > series.shape[1]:
            raise DataError(f"step {timestamp} has incomplete ocean-index history")
        return series[:, end - lags:end], mask[:, end - lags:end]

    def sample(self, timestamp: int) -> GridSample:
        surface, upper = self.load_fields(timestamp)
        oci, missing = self.oci_window(timestamp)
        s = GridSample(surface=surface.copy(), upper=upper.copy(), oci=oci.copy(),
                       oci_missing=missing.copy(), timestamp=timestamp)
        s.validate()
        return s


def lat_profile(grid: GridSpec) -> np.ndarray:
    """cos(latitude) for each row, handy for building latitude-shaped fields."""
    return np.cos(np.radians(grid.lat_degrees))


def phase_angle(timestamp: int, season_steps: int) -> float:
    return 2.0 * math.pi * (timestamp % season_steps) / season_steps
