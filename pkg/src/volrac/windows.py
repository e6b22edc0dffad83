"""Window-identifier maps, the global-to-local permutation, and context growth.

Three grouping schemes over the (M,)*D feature lattice are supported:

* ``w``   -- contiguous W-aligned blocks (plain window attention),
* ``sw``  -- the same blocks cyclically shifted by floor(W/2) per axis,
* ``g2l`` -- the global-to-local regrouping that places one cell from each
  W-aligned region into every window.

The global-to-local function is a pure spatial permutation: per axis, split
positions into (M/W, W), swap the two factors, and flatten back. Its inverse
is the same construction with block length M/W, so composing the two block
sizes restores the identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

SCHEME_ALIASES = {
    "w": "w",
    "w-msa": "w",
    "sw": "sw",
    "sw-msa": "sw",
    "g2l": "g2l",
    "g2l-msa": "g2l",
}


def _check_grid(m: int, w: int, d: int) -> None:
    if d not in (1, 2, 3):
        raise ValueError(f"dims must be 1, 2 or 3, got {d}")
    if w <= 0 or m <= 0 or m % w != 0:
        raise ValueError(f"window length W={w} must divide grid side M={m}")


@dataclass(frozen=True)
class WindowIdMap:
    """Assigns every lattice cell a 0-based window identifier."""

    dims: int
    grid_side: int
    window_len: int
    ids: np.ndarray  # (M,)*D integer lattice

    def __post_init__(self):
        _check_grid(self.grid_side, self.window_len, self.dims)
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if ids.shape != (self.grid_side,) * self.dims:
            raise ValueError(f"id lattice shape {ids.shape} inconsistent with map")
        counts = np.bincount(ids.reshape(-1), minlength=self.n_windows)
        if len(counts) != self.n_windows or not np.all(counts == self.cells_per_window):
            raise ValueError("ids do not partition the lattice into uniform windows")
        object.__setattr__(self, "ids", ids)

    @property
    def n_cells(self) -> int:
        return self.grid_side**self.dims

    @property
    def n_windows(self) -> int:
        return (self.grid_side // self.window_len) ** self.dims

    @property
    def cells_per_window(self) -> int:
        return self.window_len**self.dims


@dataclass(frozen=True)
class PermutationTable:
    """Materialized bijection on flat cell indices: forward[src] = dest."""

    size: int
    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        fwd = np.ascontiguousarray(self.forward, dtype=np.int64)
        inv = np.ascontiguousarray(self.inverse, dtype=np.int64)
        if fwd.shape != (self.size,) or inv.shape != (self.size,):
            raise ValueError("permutation arrays must be flat and of length size")
        occupancy = np.zeros(self.size, dtype=np.int64)
        np.add.at(occupancy, fwd, 1)
        if not np.all(occupancy == 1) or not np.array_equal(fwd[inv], np.arange(self.size)):
            raise ValueError("forward/inverse are not mutually inverse bijections")
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)


def w_msa_ids(m: int, w: int, d: int) -> WindowIdMap:
    """Contiguous block ids: the Kronecker product of a 0-based block-index
    lattice with an all-ones (W,)*D tensor."""
    _check_grid(m, w, d)
    blocks = np.arange((m // w) ** d, dtype=np.int64).reshape((m // w,) * d)
    ids = np.kron(blocks, np.ones((w,) * d, dtype=np.int64))
    return WindowIdMap(d, m, w, ids)


def sw_msa_ids(m: int, w: int, d: int) -> WindowIdMap:
    """Shifted-window ids: the W-block partition of the lattice cyclically
    shifted by floor(W/2) along every axis, wrap-around groups allowed."""
    _check_grid(m, w, d)
    if w < 2:
        raise ValueError(f"shifted windows need W >= 2, got W={w}")
    shift = w // 2
    base = w_msa_ids(m, w, d).ids
    ids = np.roll(base, shift=(-shift,) * d, axis=tuple(range(d)))
    return WindowIdMap(d, m, w, ids)


def g2l_permutation(m: int, w: int, d: int) -> PermutationTable:
    """The global-to-local relocation of flat cell indices for block length W.

    Per axis a position p = b*W + o moves to o*(M/W) + b: reshape to
    (M/W, W), swap the paired factors, flatten back.
    """
    _check_grid(m, w, d)
    blocks = m // w
    interleaved = (blocks, w) * d
    axes = [x for pair in zip(range(1, 2 * d, 2), range(0, 2 * d, 2)) for x in pair]
    src = np.arange(m**d, dtype=np.int64).reshape((m,) * d)
    # Applying the value transform to arange yields, at each destination,
    # the source index -- i.e. the inverse table.
    inverse = src.reshape(interleaved).transpose(axes).reshape(-1)
    forward = np.empty_like(inverse)
    forward[inverse] = np.arange(m**d, dtype=np.int64)
    return PermutationTable(m**d, forward, inverse)


def invert_g2l(m: int, w: int, d: int) -> PermutationTable:
    """Inverse of g2l_permutation(m, w, d), realized with block length M/W."""
    _check_grid(m, w, d)
    return g2l_permutation(m, m // w, d)


def g2l_ids(m: int, w: int, d: int) -> WindowIdMap:
    """Global-to-local window ids: the W-block ids pushed through the
    global-to-local permutation."""
    table = g2l_permutation(m, w, d)
    base = w_msa_ids(m, w, d).ids
    ids = base.reshape(-1)[table.inverse].reshape((m,) * d)
    return WindowIdMap(d, m, w, ids)


def window_ids(kind: str, m: int, w: int, d: int) -> WindowIdMap:
    """Build an id map by scheme name (``w``, ``sw`` or ``g2l``)."""
    key = SCHEME_ALIASES.get(kind.lower())
    if key is None:
        raise ValueError(f"unknown window scheme {kind!r}")
    if key == "w":
        return w_msa_ids(m, w, d)
    if key == "sw":
        return sw_msa_ids(m, w, d)
    return g2l_ids(m, w, d)


def permute_cells(data: np.ndarray, table: PermutationTable) -> np.ndarray:
    """Relocate leading-axis entries so out[forward[i]] = data[i]."""
    flat = data.reshape(table.size, -1)
    return flat[table.inverse].reshape(data.shape)


def gather_order(ids: WindowIdMap) -> tuple[np.ndarray, np.ndarray]:
    """Stable grouping of flat cell indices by window id: x[order] lists
    windows contiguously (cells in row-major order within each window) and
    y[inverse] scatters back."""
    order = np.argsort(ids.ids.reshape(-1), kind="stable")
    inverse = np.argsort(order, kind="stable")
    return order, inverse


def compactify(grid: "FeatureGrid", table: PermutationTable) -> "FeatureGrid":
    """Relocate whole feature vectors per the table (forward direction)."""
    from .model import FeatureGrid  # deferred: model imports this module at load time

    cells = grid.data.reshape(-1, grid.embed_dim)
    if cells.shape[0] != table.size:
        raise ValueError(f"table size {table.size} != cell count {cells.shape[0]}")
    moved = cells[table.inverse]
    return FeatureGrid(grid.dims, grid.grid_side, grid.embed_dim, moved.reshape(grid.data.shape))


def decompactify(grid: "FeatureGrid", table: PermutationTable) -> "FeatureGrid":
    """Inverse of :func:`compactify` with the same table."""
    from .model import FeatureGrid

    cells = grid.data.reshape(-1, grid.embed_dim)
    if cells.shape[0] != table.size:
        raise ValueError(f"table size {table.size} != cell count {cells.shape[0]}")
    moved = cells[table.forward]
    return FeatureGrid(grid.dims, grid.grid_side, grid.embed_dim, moved.reshape(grid.data.shape))


def reachability_matrices(
    m: int, w: int, d: int, schedule: Sequence[str]
) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (scheme, reach) per layer, where reach[c, z] says cell z is
    reachable from cell c using one window hop per already-applied layer."""
    n = m**d
    reach = np.eye(n, dtype=bool)
    for kind in schedule:
        ids = window_ids(kind, m, w, d).ids.reshape(-1)
        nxt = np.zeros_like(reach)
        for wid in range(int(ids.max()) + 1):
            cells = np.flatnonzero(ids == wid)
            hits = reach[:, cells].any(axis=1)
            nxt[np.ix_(hits, cells)] = True
        reach = nxt
        yield SCHEME_ALIASES[kind.lower()], reach


def context_reachability(
    m: int, w: int, d: int, schedule: Sequence[str]
) -> np.ndarray:
    """Layered reachability sizes: row l holds, for every cell, the number of
    cells reachable after layers 0..l of the schedule."""
    for kind in schedule:
        if SCHEME_ALIASES.get(kind.lower()) is None:
            raise ValueError(f"unknown window scheme {kind!r}")
    sizes = []
    for _, reach in reachability_matrices(m, w, d, schedule):
        sizes.append(reach.sum(axis=1))
    return np.asarray(sizes, dtype=np.int64)


def format_context_report(m: int, w: int, d: int, schedule: Sequence[str]) -> list[str]:
    """One plain-text line per layer: index, scheme, min/max/mean reachable
    set size and whether context has gone global."""
    n = m**d
    lines = []
    for layer, (kind, reach) in enumerate(reachability_matrices(m, w, d, schedule), start=1):
        sizes = reach.sum(axis=1)
        is_global = bool(sizes.min() == n)
        lines.append(
            f"layer={layer} scheme={kind} min={sizes.min()} max={sizes.max()} "
            f"mean={sizes.mean():.2f} global={'true' if is_global else 'false'}"
        )
    return lines
