"""Stuck-at fault model, mask sampling and application.

Randomness
----------
Every mask is drawn from a Philox4x64-10 counter-based generator
(``numpy.random.Philox``) whose 64-bit key is ``derive_seed(base_seed,
trial, layer)``. ``derive_seed`` folds each index into the running hash
with SplitMix64. A cell's uniform variate ``u`` is the standard 53-bit
double ``(x >> 11) * 2**-53`` of consecutive 64-bit outputs, and the cell is
stuck-off if ``u < p_off``, stuck-on if ``p_off <= u < p_off + p_on``.
Cells are visited tile by tile, row-major, occupied cells only unless
padding is included. The same seed therefore nests masks across rates: a
cell stuck at rate ``r`` stays faulted at any higher rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mapping import LayoutError, MappedLayer, decode

HEALTHY, STUCK_OFF, STUCK_ON = 0, 1, 2
DEFAULT_ON_OFF_RATIO = 5.2

_M64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def derive_seed(base_seed, *indices):
    h = splitmix64(int(base_seed) & _M64)
    for i in indices:
        h = splitmix64(h ^ (int(i) & _M64))
    return h


def generator(seed):
    return np.random.Generator(np.random.Philox(key=int(seed) & _M64))


@dataclass(frozen=True)
class FaultModel:
    p_off: float
    p_on: float
    on_off_ratio: float | None = None

    def __post_init__(self):
        if self.p_off < 0 or self.p_on < 0:
            raise ValueError("fault probabilities must be non-negative")
        if self.p_off + self.p_on > 1 + 1e-12:
            raise ValueError(f"p_off + p_on = {self.p_off + self.p_on} exceeds 1")

    @classmethod
    def from_rate(cls, rate, on_off_ratio=DEFAULT_ON_OFF_RATIO):
        """Split a total per-cell rate into stuck-off/stuck-on at ``1 : on_off_ratio``."""
        if rate < 0:
            raise ValueError("fault rate must be non-negative")
        if on_off_ratio <= 0:
            raise ValueError("on/off ratio must be positive")
        return cls(rate / (1 + on_off_ratio), rate * on_off_ratio / (1 + on_off_ratio), on_off_ratio)

    @property
    def rate(self):
        return self.p_off + self.p_on


@dataclass(frozen=True)
class FaultMask:
    states: tuple  # one uint8 array per tile
    seed: int
    model: FaultModel


def cell_states(n, model, seed):
    """Fault states of ``n`` cells drawn from the seeded stream."""
    u = generator(seed).random(n)
    states = np.zeros(n, np.uint8)
    states[u < model.p_off] = STUCK_OFF
    states[(u >= model.p_off) & (u < model.p_off + model.p_on)] = STUCK_ON
    return states


def _tiles_of(tiles):
    return tiles.tiles if isinstance(tiles, MappedLayer) else tuple(tiles)


def sample_fault_mask(tiles, model, seed, include_padding=False):
    """Independent per-cell stuck-at states for a tile set.

    ``tiles`` is a :class:`MappedLayer` or a sequence of tiles. Padding cells
    stay healthy unless ``include_padding`` is set.
    """
    tiles = _tiles_of(tiles)
    sel = [np.ones_like(t.occupied) if include_padding else t.occupied for t in tiles]
    counts = [int(s.sum()) for s in sel]
    flat = cell_states(sum(counts), model, seed)
    states, pos = [], 0
    for t, s, n in zip(tiles, sel, counts):
        st = np.zeros((t.rows, t.cols), np.uint8)
        st[s] = flat[pos:pos + n]
        pos += n
        states.append(st)
    return FaultMask(tuple(states), int(seed), model)


def apply_states(g, states):
    """Force stuck-on cells to 1.0 and stuck-off cells to 0.0."""
    return np.where(states == STUCK_ON, 1.0, np.where(states == STUCK_OFF, 0.0, g))


def apply_faults(mapped, mask):
    """Return a faulted copy of ``mapped``; the input is left untouched."""
    if len(mask.states) != len(mapped.tiles):
        raise LayoutError(f"mask covers {len(mask.states)} tiles, layer has {len(mapped.tiles)}")
    out = []
    for tile, st in zip(mapped.tiles, mask.states):
        if st.shape != tile.conductance.shape:
            raise LayoutError(f"mask tile shape {st.shape} != tile shape {tile.conductance.shape}")
        out.append(apply_states(tile.conductance, st))
    return mapped.with_conductances(out)


def _same_layout(a, b):
    if (a.scheme, a.weight_shape, a.tile_rows, a.tile_cols, len(a.tiles)) != \
            (b.scheme, b.weight_shape, b.tile_rows, b.tile_cols, len(b.tiles)):
        raise LayoutError("mapped layers have different layouts")


def mismatch_counts(original, faulted):
    """``(changed_cells, cells, changed_weights, weights)`` between two mappings of one layer."""
    _same_layout(original, faulted)
    a = original.cell_matrix()
    b = faulted.cell_matrix()
    r, c = original.weight_shape
    k = original.cells_per_weight
    changed_cells = int(np.count_nonzero(a != b))
    wa = decode(original.scheme, a.reshape(r, c, k))
    wb = decode(original.scheme, b.reshape(r, c, k))
    changed_weights = int(np.count_nonzero(wa != wb))
    return changed_cells, a.size, changed_weights, r * c


def mismatch_rate(original, faulted):
    """Fraction of occupied cells changed, and fraction of weights whose effective value changed."""
    cc, n_cells, cw, n_weights = mismatch_counts(original, faulted)
    return cc / n_cells, cw / n_weights
