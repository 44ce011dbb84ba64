"""Plane, column and dual token masks over a G^3 token grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError
from ..superpatch import token_coords

STRATEGIES = ("plane", "axis", "dual")
AXES = {"x": 0, "y": 1, "z": 2}


def axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ParameterError(f"unknown axis {axis!r}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ParameterError(f"axis must be 0, 1 or 2, got {axis}")
    return int(axis)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_budget(grid: int, ratio: float) -> int:
    """round(r * G^3), rounding halves up."""
    return _round_half_up(ratio * grid ** 3)


@dataclass(frozen=True)
class MaskSpec:
    grid: int
    visible: np.ndarray
    masked: np.ndarray
    strategy: str
    axis: int = 2
    planes: tuple = ()
    columns: tuple = ()
    plane_selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    axis_selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def n_tokens(self) -> int:
        return self.grid ** 3

    def is_masked(self) -> np.ndarray:
        flags = np.zeros(self.n_tokens, dtype=bool)
        flags[self.masked] = True
        return flags


def _in_plane_axes(axis: int) -> tuple[int, int]:
    return tuple(a for a in range(3) if a != axis)


def plane_tokens(grid: int, axis: int, level: int) -> np.ndarray:
    """Tokens of the plane orthogonal to ``axis`` at coordinate ``level``."""
    return np.flatnonzero(token_coords(grid)[:, axis] == level)


def column_tokens(grid: int, axis: int, column: tuple[int, int]) -> np.ndarray:
    """Tokens of the column parallel to ``axis`` at in-plane coordinates ``column``."""
    coords = token_coords(grid)
    a, b = _in_plane_axes(axis)
    return np.flatnonzero((coords[:, a] == column[0]) & (coords[:, b] == column[1]))


def _columns(grid: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(grid) for b in range(grid)]


def _adjust(flags: np.ndarray, budget: int, rng) -> None:
    """Top up or trim single tokens uniformly until exactly ``budget`` are set."""
    have = int(flags.sum())
    if have < budget:
        free = np.flatnonzero(~flags)
        flags[rng.choice(free, size=budget - have, replace=False)] = True
    elif have > budget:
        taken = np.flatnonzero(flags)
        flags[rng.choice(taken, size=have - budget, replace=False)] = False


def gen_mask(grid: int, ratio: float, strategy: str = "dual", axis="z", seed=0) -> MaskSpec:
    """Sample a token mask hiding exactly round(ratio * G^3) tokens.

    ``plane`` removes whole planes orthogonal to ``axis``; ``axis`` removes whole
    columns parallel to it; ``dual`` spends half the budget (rounded up) on
    planes and the rest on columns. Whenever whole planes or columns cannot
    hit the budget exactly, single tokens are added or dropped uniformly.
    """
    ax = axis_index(axis)
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown mask strategy {strategy!r}")
    if grid < 2:
        raise ParameterError(f"token grid must be >= 2, got {grid}")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in (0, 1), got {ratio}")
    n = grid ** 3
    budget = mask_budget(grid, ratio)
    if ratio * n < 1 or budget >= n:
        raise ParameterError(f"mask ratio {ratio} gives {budget} of {n} tokens; need 1..{n - 1}")
    rng = np.random.default_rng(seed)
    flags = np.zeros(n, dtype=bool)
    plane_flags = np.zeros(n, dtype=bool)
    col_flags = np.zeros(n, dtype=bool)
    planes, columns = (), ()
    all_cols = _columns(grid)

    if strategy == "plane":
        k = min(_round_half_up(ratio * grid), grid)
        planes = tuple(sorted(int(c) for c in rng.choice(grid, size=k, replace=False)))
    elif strategy == "axis":
        k = min(_round_half_up(ratio * grid * grid), grid * grid)
        picks = rng.choice(len(all_cols), size=k, replace=False)
        columns = tuple(sorted(all_cols[int(i)] for i in picks))
    else:
        plane_budget = -(-budget // 2)
        k = plane_budget // (grid * grid)
        if k == 0 and budget >= grid * grid + grid - 1:
            k = 1
        planes = tuple(sorted(int(c) for c in rng.choice(grid, size=k, replace=False)))
        fresh_per_column = grid - k
        rest = budget - k * grid * grid
        n_cols = rest // fresh_per_column if fresh_per_column else 0
        picks = rng.choice(len(all_cols), size=n_cols, replace=False)
        columns = tuple(sorted(all_cols[int(i)] for i in picks))

    for level in planes:
        plane_flags[plane_tokens(grid, ax, level)] = True
    for col in columns:
        col_flags[column_tokens(grid, ax, col)] = True
    flags |= plane_flags | col_flags
    _adjust(flags, budget, rng)

    masked = np.flatnonzero(flags)
    visible = np.flatnonzero(~flags)
    return MaskSpec(grid, visible, masked, strategy, ax, planes, columns,
                    np.flatnonzero(plane_flags & flags), np.flatnonzero(col_flags & flags & ~plane_flags))


def full_visible(grid: int, axis="z") -> MaskSpec:
    """Mask with nothing hidden, for feature extraction."""
    return MaskSpec(grid, np.arange(grid ** 3), np.zeros(0, dtype=np.intp), "none", axis_index(axis))


def stream_masks(coords: np.ndarray, axis: int, n_global: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Additive attention biases (0 allowed, -inf blocked) for the two MATB streams.

    Rows/columns follow ``coords`` (one row per patch token) followed by
    ``n_global`` unrestricted rows (NEMESIS tokens). Returns ``(axis_bias,
    plane_bias)``: the axis stream keeps pairs in the same column parallel to
    ``axis``, the plane stream keeps pairs in the same plane orthogonal to it.
    """
    coords = np.asarray(coords)
    a, b = _in_plane_axes(axis)
    same_plane = coords[:, axis][:, None] == coords[:, axis][None, :]
    same_column = ((coords[:, a][:, None] == coords[:, a][None, :])
                   & (coords[:, b][:, None] == coords[:, b][None, :]))
    n = coords.shape[0] + n_global

    def bias(allowed):
        full = np.ones((n, n), dtype=bool)
        full[: coords.shape[0], : coords.shape[0]] = allowed
        out = np.zeros((n, n))
        out[~full] = -np.inf
        return out

    return bias(same_column), bias(same_plane)
