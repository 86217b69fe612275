"""Weight-to-conductance mapping onto tiled crossbars.

Three schemes are supported. For a weight ``w`` already scaled to [-1, 1]:

* two-column: ``(max(w, 0), max(-w, 0))``, read back as ``g_pos - g_neg``
* offset: a single cell ``(w + 1) / 2``, read back as ``2 g - 1``
* differential: ``g_a = 1`` for ``w >= 0`` else ``1 - |w|``;
  ``g_b = 1 - w`` for ``w > 0`` else ``1``; read back as ``g_a - g_b``.
  One of the two cells always sits at full conductance and a zero weight
  maps to ``(1, 1)``.

Conductances are normalized to [0, 1] and stored in binary64 so that a
fault-free round trip reproduces binary32 weights exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE

CELL_DTYPE = np.float64


class LayoutError(ValueError):
    pass


class MappingScheme(str, enum.Enum):
    TWO_COLUMN = "two_column"
    OFFSET = "offset"
    DIFFERENTIAL = "differential"

    @property
    def cells_per_weight(self):
        return 1 if self is MappingScheme.OFFSET else 2

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"twocolumn": "two_column", "two_col": "two_column", "tc": "two_column",
                   "diff": "differential"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown mapping scheme {value!r}") from None


def normalize_weights(W):
    """Scale ``W`` by its max magnitude; an all-zero ``W`` keeps scale 1."""
    W = np.asarray(W, dtype=DTYPE)
    scale = float(np.abs(W).max()) if W.size else 0.0
    if scale == 0.0:
        scale = 1.0
    return (W / DTYPE(scale)).astype(DTYPE), scale


def _check_range(w):
    if not -1.0 <= w <= 1.0:
        raise ValueError(f"weight {w} outside [-1, 1]")


def map_two_column(w):
    _check_range(w)
    return max(w, 0.0), max(-w, 0.0)


def map_offset(w):
    _check_range(w)
    return (w + 1.0) / 2.0


def map_differential(w):
    _check_range(w)
    g_a = 1.0 if w >= 0 else 1.0 - abs(w)
    g_b = 1.0 - w if w > 0 else 1.0
    return g_a, g_b


def encode(scheme, Wn):
    """Vectorized mapping: ``(R, C)`` normalized weights -> ``(R, C, cells)`` conductances."""
    scheme = MappingScheme.parse(scheme)
    w = np.asarray(Wn, dtype=CELL_DTYPE)
    if w.size and np.abs(w).max() > 1.0:
        raise ValueError("normalized weights must lie in [-1, 1]")
    if scheme is MappingScheme.TWO_COLUMN:
        return np.stack([np.maximum(w, 0.0), np.maximum(-w, 0.0)], axis=-1)
    if scheme is MappingScheme.OFFSET:
        return ((w + 1.0) / 2.0)[..., None]
    g_a = np.where(w >= 0, 1.0, 1.0 - np.abs(w))
    g_b = np.where(w > 0, 1.0 - w, 1.0)
    return np.stack([g_a, g_b], axis=-1)


def decode(scheme, cells):
    """Inverse of :func:`encode` applied to (possibly faulted) conductances."""
    scheme = MappingScheme.parse(scheme)
    if scheme is MappingScheme.OFFSET:
        return 2.0 * cells[..., 0] - 1.0
    return cells[..., 0] - cells[..., 1]


@dataclass(frozen=True)
class CrossbarTile:
    rows: int
    cols: int
    conductance: np.ndarray
    occupied: np.ndarray  # bool, False for padding cells

    def __post_init__(self):
        if self.conductance.shape != (self.rows, self.cols):
            raise LayoutError(f"tile conductance shape {self.conductance.shape} != ({self.rows}, {self.cols})")


@dataclass(frozen=True)
class MappedLayer:
    """A weight matrix laid out as crossbar tiles.

    Weight ``(r, c)`` lives in tile row-block ``r // tile_rows`` and column
    block ``c // weights_per_tile_row``; its cells occupy adjacent columns
    ``(c % weights_per_tile_row) * cells + role`` of that tile.
    """

    scheme: MappingScheme
    tiles: tuple
    scale: float
    weight_shape: tuple
    tile_rows: int
    tile_cols: int

    @property
    def cells_per_weight(self):
        return self.scheme.cells_per_weight

    @property
    def weights_per_tile_row(self):
        return self.tile_cols // self.cells_per_weight

    @property
    def grid(self):
        r, c = self.weight_shape
        return math.ceil(r / self.tile_rows), math.ceil(c / self.weights_per_tile_row)

    @property
    def num_cells(self):
        return self.weight_shape[0] * self.weight_shape[1] * self.cells_per_weight

    def locate(self, row, col, role=0):
        """``(tile_id, tile_row, tile_col)`` of one cell of weight ``(row, col)``."""
        r, c = self.weight_shape
        if not (0 <= row < r and 0 <= col < c and 0 <= role < self.cells_per_weight):
            raise IndexError(f"cell ({row}, {col}, {role}) outside layer {self.weight_shape}")
        wpt = self.weights_per_tile_row
        tile_id = (row // self.tile_rows) * self.grid[1] + col // wpt
        return tile_id, row % self.tile_rows, (col % wpt) * self.cells_per_weight + role

    def cell_matrix(self):
        """Occupied conductances gathered into one ``(R, C * cells)`` array."""
        r, c = self.weight_shape
        k = self.cells_per_weight
        gr, gc = self.grid
        if len(self.tiles) != gr * gc:
            raise LayoutError(f"expected {gr * gc} tiles, found {len(self.tiles)}")
        span = self.weights_per_tile_row * k
        out = np.empty((r, c * k), CELL_DTYPE)
        for t, tile in enumerate(self.tiles):
            if tile.conductance.shape != (self.tile_rows, self.tile_cols):
                raise LayoutError(f"tile {t} has shape {tile.conductance.shape}")
            bi, bj = divmod(t, gc)
            r0, c0 = bi * self.tile_rows, bj * span
            block = out[r0:r0 + self.tile_rows, c0:c0 + span]
            block[...] = tile.conductance[:block.shape[0], :block.shape[1]]
        return out

    def with_conductances(self, conductances):
        tiles = tuple(CrossbarTile(t.rows, t.cols, g, t.occupied) for t, g in zip(self.tiles, conductances))
        return MappedLayer(self.scheme, tiles, self.scale, self.weight_shape, self.tile_rows, self.tile_cols)


def map_layer(W, scheme, tile_rows=128, tile_cols=128):
    """Normalize a 2-D weight matrix and lay it out across crossbar tiles."""
    scheme = MappingScheme.parse(scheme)
    W = np.asarray(W, dtype=DTYPE)
    if W.ndim != 2:
        raise ValueError(f"map_layer needs a 2-D weight matrix, got shape {W.shape}")
    if tile_rows < 1 or tile_cols < 1:
        raise ValueError("tile dimensions must be >= 1")
    k = scheme.cells_per_weight
    if tile_cols < k:
        raise ValueError(f"tile_cols={tile_cols} cannot hold the {k} adjacent cells of one weight")
    _, scale = normalize_weights(W)
    Wn = W.astype(CELL_DTYPE) / scale
    r, c = W.shape
    cells = encode(scheme, Wn).reshape(r, c * k)
    wpt = tile_cols // k
    span = wpt * k
    tiles = []
    for r0 in range(0, r, tile_rows):
        for c0 in range(0, c * k, span):
            block = cells[r0:r0 + tile_rows, c0:c0 + span]
            g = np.zeros((tile_rows, tile_cols), CELL_DTYPE)
            occ = np.zeros((tile_rows, tile_cols), bool)
            g[:block.shape[0], :block.shape[1]] = block
            occ[:block.shape[0], :block.shape[1]] = True
            tiles.append(CrossbarTile(tile_rows, tile_cols, g, occ))
    return MappedLayer(scheme, tuple(tiles), scale, (r, c), tile_rows, tile_cols)


def reconstruct_normalized(mapped):
    """Effective weights in [-1, 1] units (before rescaling), binary64."""
    r, c = mapped.weight_shape
    cells = mapped.cell_matrix().reshape(r, c, mapped.cells_per_weight)
    return decode(mapped.scheme, cells)


def reconstruct_effective_weights(mapped):
    """Effective binary32 weights implied by the current cell conductances."""
    return (reconstruct_normalized(mapped) * mapped.scale).astype(DTYPE)
