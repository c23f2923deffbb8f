"""Miniature windowed transformer over joint surface + upper-air token slabs.

Surface fields become one token slab, upper-air levels fold into further
slabs; all slabs at a (lat, lon) window attend together. Attention logits get
a relative-position bias looked up from a per-latitude-band table, so the
model is aware of absolute latitude rather than translation-invariant.
Alternate blocks shift windows by half a window: cyclic along longitude
(physical wraparound), masked across the latitude seam (poles do not wrap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import GridSpec, N_SURFACE, N_UPPER
from .nn import LayerNorm, Linear, Module, ModuleList
from .optim import truncated_normal
from .rng import RngStream
from .temporal import apply_gate
from .tensor import Tensor, concat

MASK_VALUE = -1e4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    window: tuple = (2, 4)
    surface_patch: tuple = (2, 2)
    upper_patch: tuple = (1, 2, 2)
    mlp_ratio: int = 4


class TokenLayout:
    """Geometry of the token grid plus the token -> patch provenance map."""

    def __init__(self, grid: GridSpec, cfg: BackboneConfig):
        p_lat, p_lon = cfg.surface_patch
        p_z, up_lat, up_lon = cfg.upper_patch
        if (up_lat, up_lon) != (p_lat, p_lon):
            raise ConfigError("surface and upper lat/lon patch sizes must agree "
                              f"({cfg.surface_patch} vs {cfg.upper_patch[1:]})")
        if grid.n_lat % p_lat or grid.n_lon % p_lon:
            raise ConfigError(f"grid {grid.n_lat}x{grid.n_lon} not divisible by "
                              f"patch {p_lat}x{p_lon}")
        if grid.n_level % p_z:
            raise ConfigError(f"{grid.n_level} levels not divisible by slab depth {p_z}")
        self.grid = grid
        self.cfg = cfg
        self.rows = grid.n_lat // p_lat
        self.cols = grid.n_lon // p_lon
        self.upper_slabs = grid.n_level // p_z
        self.slabs = 1 + self.upper_slabs
        w_lat, w_lon = cfg.window
        if self.rows % w_lat or self.cols % w_lon:
            raise ConfigError(f"token grid {self.rows}x{self.cols} not divisible by "
                              f"window {w_lat}x{w_lon}")
        self.n_tokens = self.slabs * self.rows * self.cols
        self.surface_patch_dim = N_SURFACE * p_lat * p_lon
        self.upper_patch_dim = N_UPPER * p_z * p_lat * p_lon

    def provenance(self, token: int) -> tuple:
        """token index -> (field kind, level slab, lat patch, lon patch)."""
        if not 0 <= token < self.n_tokens:
            raise IndexError(f"token {token} outside 0..{self.n_tokens - 1}")
        per_slab = self.rows * self.cols
        slab, rest = divmod(token, per_slab)
        row, col = divmod(rest, self.cols)
        kind = "surface" if slab == 0 else "upper"
        return (kind, slab - 1 if slab else None, row, col)


class WindowGeometry:
    """Static index tables for one (layout, shift) configuration."""

    def __init__(self, layout: TokenLayout):
        self.layout = layout
        w_lat, w_lon = layout.cfg.window
        self.w_lat, self.w_lon = w_lat, w_lon
        self.shift = (w_lat // 2, w_lon // 2)
        self.n_rows = layout.rows // w_lat
        self.n_cols = layout.cols // w_lon
        self.n_windows = self.n_rows * self.n_cols
        self.window_tokens = layout.slabs * w_lat * w_lon
        self.n_rel = (2 * w_lat - 1) * (2 * w_lon - 1)
        self.n_bands = self.n_rows
        self.band_of_window = np.repeat(np.arange(self.n_rows), self.n_cols)
        self.rel_index = self._relative_index(layout.slabs, w_lat, w_lon)
        self.shift_mask = self._lat_seam_mask()

    @staticmethod
    def _relative_index(slabs: int, w_lat: int, w_lon: int) -> np.ndarray:
        lat = np.arange(w_lat).repeat(w_lon)
        lon = np.tile(np.arange(w_lon), w_lat)
        lat = np.tile(lat, slabs)
        lon = np.tile(lon, slabs)
        d_lat = lat[:, None] - lat[None, :] + (w_lat - 1)
        d_lon = lon[:, None] - lon[None, :] + (w_lon - 1)
        return (d_lat * (2 * w_lon - 1) + d_lon).reshape(-1)

    def _lat_seam_mask(self) -> np.ndarray:
        """Additive mask forbidding attention across the rolled pole seam.

        Labels are laid out in the rolled frame: only the bottom window mixes
        tokens from opposite latitude edges, and only there do labels differ.
        """
        rows = self.layout.rows
        s_lat = self.shift[0]
        labels = np.zeros(rows, dtype=int)
        if s_lat > 0:
            labels[rows - self.w_lat:rows - s_lat] = 1
            labels[rows - s_lat:] = 2
        slabs = self.layout.slabs
        per_window = []
        for r in range(self.n_rows):
            row_labels = labels[r * self.w_lat:(r + 1) * self.w_lat]
            tok = np.broadcast_to(row_labels[None, :, None],
                                  (slabs, self.w_lat, self.w_lon)).reshape(-1)
            per_window.append(np.where(tok[:, None] != tok[None, :], MASK_VALUE, 0.0))
        mask = np.stack([per_window[r] for r in self.band_of_window])
        return mask[:, None, :, :]   # broadcast over heads

    def partition(self, x: Tensor) -> Tensor:
        """(B, S, rows, cols, C) -> (B, n_windows, window_tokens, C)."""
        b, s, rows, cols, c = x.shape
        x = x.reshape((b, s, self.n_rows, self.w_lat, self.n_cols, self.w_lon, c))
        x = x.permute((0, 2, 4, 1, 3, 5, 6))
        return x.reshape((b, self.n_windows, self.window_tokens, c))

    def merge(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        c = x.shape[-1]
        s = self.layout.slabs
        x = x.reshape((b, self.n_rows, self.n_cols, s, self.w_lat, self.w_lon, c))
        x = x.permute((0, 3, 1, 4, 2, 5, 6))
        return x.reshape((b, s, self.layout.rows, self.layout.cols, c))


class PatchEmbed(Module):
    """Flatten patches to tokens with separate surface/upper projections plus
    a factorized additive position embedding (slab + row + column)."""

    def __init__(self, layout: TokenLayout, rng: RngStream):
        super().__init__()
        self.layout = layout
        c = layout.cfg.embed_dim
        self.surface_proj = Linear(layout.surface_patch_dim, c, rng.split("surface"))
        self.upper_proj = Linear(layout.upper_patch_dim, c, rng.split("upper"))
        self.slab_pos = Tensor(truncated_normal((layout.slabs, 1, 1, c), rng.split("slab")),
                               requires_grad=True)
        self.row_pos = Tensor(truncated_normal((layout.rows, 1, c), rng.split("row")),
                              requires_grad=True)
        self.col_pos = Tensor(truncated_normal((layout.cols, c), rng.split("col")),
                              requires_grad=True)

    def forward(self, surface: Tensor, upper: Tensor) -> Tensor:
        lo = self.layout
        p_lat, p_lon = lo.cfg.surface_patch
        p_z = lo.cfg.upper_patch[0]
        b = surface.shape[0]

        s = surface.reshape((b, N_SURFACE, lo.rows, p_lat, lo.cols, p_lon))
        s = s.permute((0, 2, 4, 1, 3, 5)).reshape((b, lo.rows, lo.cols, lo.surface_patch_dim))
        s_tok = self.surface_proj(s).reshape((b, 1, lo.rows, lo.cols, -1))

        u = upper.reshape((b, N_UPPER, lo.upper_slabs, p_z, lo.rows, p_lat, lo.cols, p_lon))
        u = u.permute((0, 2, 4, 6, 1, 3, 5, 7))
        u = u.reshape((b, lo.upper_slabs, lo.rows, lo.cols, lo.upper_patch_dim))
        u_tok = self.upper_proj(u)

        tokens = concat([s_tok, u_tok], axis=1)
        return tokens + self.slab_pos + self.row_pos + self.col_pos


class PatchRecover(Module):
    """Linear map from each token back to its patch's variable values."""

    def __init__(self, layout: TokenLayout, rng: RngStream):
        super().__init__()
        self.layout = layout
        c = layout.cfg.embed_dim
        self.surface_head = Linear(c, layout.surface_patch_dim, rng.split("surface"))
        self.upper_head = Linear(c, layout.upper_patch_dim, rng.split("upper"))

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        lo = self.layout
        p_lat, p_lon = lo.cfg.surface_patch
        p_z = lo.cfg.upper_patch[0]
        b = tokens.shape[0]
        g = lo.grid

        s = self.surface_head(tokens[:, 0])
        s = s.reshape((b, lo.rows, lo.cols, N_SURFACE, p_lat, p_lon))
        s = s.permute((0, 3, 1, 4, 2, 5)).reshape((b, N_SURFACE, g.n_lat, g.n_lon))

        u = self.upper_head(tokens[:, 1:])
        u = u.reshape((b, lo.upper_slabs, lo.rows, lo.cols, N_UPPER, p_z, p_lat, p_lon))
        u = u.permute((0, 4, 1, 5, 2, 6, 3, 7))
        u = u.reshape((b, N_UPPER, g.n_level, g.n_lat, g.n_lon))
        return s, u


class WindowAttention(Module):
    def __init__(self, layout: TokenLayout, geometry: WindowGeometry, rng: RngStream):
        super().__init__()
        cfg = layout.cfg
        c = cfg.embed_dim
        if c % cfg.heads:
            raise ConfigError(f"embed dim {c} not divisible by {cfg.heads} heads")
        self.geometry = geometry
        self.heads = cfg.heads
        self.head_dim = c // cfg.heads
        self.scale = self.head_dim ** -0.5
        self.q = Linear(c, c, rng.split("q"))
        self.k = Linear(c, c, rng.split("k"))
        self.v = Linear(c, c, rng.split("v"))
        self.out = Linear(c, c, rng.split("out"))
        self.bias_table = Tensor(
            truncated_normal((geometry.n_bands, geometry.n_rel, cfg.heads),
                             rng.split("bias")),
            requires_grad=True)

    def _bias(self) -> Tensor:
        geo = self.geometry
        nw, shape_tokens = geo.n_windows, geo.window_tokens
        per_window = self.bias_table.take(geo.band_of_window, axis=0)
        gathered = per_window.take(geo.rel_index, axis=1)
        bias = gathered.reshape((nw, shape_tokens, shape_tokens, self.heads))
        return bias.permute((0, 3, 1, 2))

    def forward(self, x: Tensor, shifted: bool) -> Tensor:
        geo = self.geometry
        s_lat, s_lon = geo.shift
        if shifted:
            x = x.roll(-s_lat, axis=2).roll(-s_lon, axis=3)
        windows = geo.partition(x)
        b, nw, n, c = windows.shape
        h, hd = self.heads, self.head_dim

        def heads_first(t: Tensor) -> Tensor:
            return t.reshape((b, nw, n, h, hd)).permute((0, 1, 3, 2, 4))

        q = heads_first(self.q(windows)) * self.scale
        k = heads_first(self.k(windows))
        v = heads_first(self.v(windows))
        logits = q @ k.permute((0, 1, 2, 4, 3))
        logits = logits + self._bias()
        if shifted:
            logits = logits + Tensor(geo.shift_mask)
        attn = logits.softmax(axis=-1)
        mixed = (attn @ v).permute((0, 1, 3, 2, 4)).reshape((b, nw, n, c))
        mixed = self.out(mixed)
        out = geo.merge(mixed)
        if shifted:
            out = out.roll(s_lat, axis=2).roll(s_lon, axis=3)
        return out


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: RngStream):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng.split("fc1"))
        self.fc2 = Linear(dim * ratio, dim, rng.split("fc2"))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class Block(Module):
    """Pre-norm transformer block over the token grid."""

    def __init__(self, layout: TokenLayout, geometry: WindowGeometry, shifted: bool,
                 rng: RngStream):
        super().__init__()
        dim = layout.cfg.embed_dim
        self.shifted = shifted
        self.ln1 = LayerNorm(dim)
        self.attn = WindowAttention(layout, geometry, rng.split("attn"))
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, layout.cfg.mlp_ratio, rng.split("mlp"))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), self.shifted)
        return x + self.mlp(self.ln2(x))


class GridTransformer(Module):
    """Patch embed -> (optional gate) -> windowed blocks -> patch recover."""

    def __init__(self, grid: GridSpec, cfg: BackboneConfig, rng: RngStream):
        super().__init__()
        self.grid = grid
        self.cfg = cfg
        self.layout = TokenLayout(grid, cfg)
        self.geometry = WindowGeometry(self.layout)
        self.embed = PatchEmbed(self.layout, rng.split("embed"))
        self.blocks = ModuleList(
            Block(self.layout, self.geometry, shifted=(i % 2 == 1), rng=rng.split(f"block{i}"))
            for i in range(cfg.depth))
        self.norm = LayerNorm(cfg.embed_dim)
        self.recover = PatchRecover(self.layout, rng.split("recover"))

    def forward(self, surface: Tensor, upper: Tensor, gate: Tensor | None = None,
                gate_mode: str = "residual") -> tuple[Tensor, Tensor]:
        tokens = self.embed(surface, upper)
        if gate is not None:
            tokens = apply_gate(tokens, gate, gate_mode)
        for block in self.blocks:
            tokens = block(tokens)
        return self.recover(self.norm(tokens))
