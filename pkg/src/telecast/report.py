"""Report bundle emission: metrics CSV, grayscale heatmap panels (input,
target, prediction, bias) and the run log.

Panels are written twice per variable: the raw field as a TNS1 tensor (the
bias tensor is exactly prediction minus target) and an 8-bit binary PGM
rendering scaled to the panel's own min/max, which is printed to the log.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grids import GridSpec, SURFACE_VARS, UPPER_VARS, level_labels
from .tensorfile import save_tensor


def write_pgm(path, field: np.ndarray) -> tuple[float, float]:
    """Binary (P5) grayscale image scaled to the field's range; returns it."""
    lo = float(field.min())
    hi = float(field.max())
    span = hi - lo
    if span == 0.0:
        pixels = np.zeros(field.shape, dtype=np.uint8)
    else:
        pixels = np.round((field - lo) / span * 255.0).astype(np.uint8)
    h, w = field.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())
    return lo, hi


PANEL_KINDS = ("input", "target", "prediction", "bias")


def emit_panels(out_dir, grid: GridSpec, variable: str,
                input_field: np.ndarray, target_field: np.ndarray,
                prediction_field: np.ndarray, log) -> None:
    """One figure row for a variable; bias = prediction - target exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = {
        "input": input_field,
        "target": target_field,
        "prediction": prediction_field,
        "bias": prediction_field - target_field,
    }
    for kind in PANEL_KINDS:
        field = panels[kind]
        save_tensor(out / f"{variable}_{kind}.tns1", field)
        lo, hi = write_pgm(out / f"{variable}_{kind}.pgm", field)
        log(f"panel {variable}/{kind}: min {lo:.6g} max {hi:.6g}")


def panel_variables(grid: GridSpec) -> list[tuple[str, str, int, int | None]]:
    """(label, kind, channel, level) for every panel-eligible variable."""
    out = [(name, "surface", c, None) for c, name in enumerate(SURFACE_VARS)]
    for v, name in enumerate(UPPER_VARS):
        for z, lev in enumerate(level_labels(grid.n_level)):
            out.append((f"{name}{lev}", "upper", v, z))
    return out
