"""Superpatch tiling, sampling, stitching and p^3 tokenization.

Index conventions, used everywhere else through the helpers here:

* superpatches are ordered lexicographically by their (i, j, k) grid index;
* tokens inside a superpatch are ordered x-major, then y, then z, so token
  ``j`` sits at grid coordinate ``token_coords(G)[j]``;
* each token row is the row-major flattening of its p^3 voxel block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssemblyError, GeometryError
from .volume import Volume


@dataclass(frozen=True)
class SuperpatchGrid:
    dims: tuple[int, int, int]
    side: int

    def __post_init__(self):
        if self.side <= 0:
            raise GeometryError(f"superpatch side must be positive, got {self.side}")
        for axis, n in enumerate(self.dims):
            if n % self.side:
                raise GeometryError(f"extent {n} along axis {axis} is not divisible by "
                                    f"superpatch side {self.side}")

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(n // self.side for n in self.dims)

    @property
    def total(self) -> int:
        a, b, c = self.counts
        return a * b * c

    def indices(self) -> list[tuple[int, int, int]]:
        a, b, c = self.counts
        return [(i, j, k) for i in range(a) for j in range(b) for k in range(c)]

    def linear(self, index) -> int:
        _, b, c = self.counts
        i, j, k = index
        return (i * b + j) * c + k

    def slices(self, index) -> tuple[slice, slice, slice]:
        s = self.side
        return tuple(slice(n * s, (n + 1) * s) for n in index)


def _array(v) -> np.ndarray:
    return v.voxels if isinstance(v, Volume) else np.asarray(v)


def partition_array(arr: np.ndarray, side: int) -> list:
    grid = SuperpatchGrid(tuple(int(n) for n in arr.shape), side)
    return [(idx, arr[grid.slices(idx)]) for idx in grid.indices()]


def partition(v: Volume, side: int) -> list[tuple[tuple[int, int, int], Volume]]:
    """Non-overlapping side^3 tiles in lexicographic index order."""
    return [(idx, Volume(block, v.intensity_unit)) for idx, block in partition_array(v.voxels, side)]


def sample_superpatch(v: Volume, side: int, seed) -> tuple[tuple[int, int, int], Volume]:
    """One tile drawn uniformly from the grid, reproducible from ``seed``."""
    grid = SuperpatchGrid(v.dims, side)
    rng = np.random.default_rng(seed)
    idx = grid.indices()[int(rng.integers(grid.total))]
    return idx, Volume(v.voxels[grid.slices(idx)], v.intensity_unit)


def stitch(parts, grid: SuperpatchGrid, intensity_unit: str | None = None) -> Volume:
    """Reassemble tiles by index; order of ``parts`` is irrelevant."""
    expected = set(grid.indices())
    out = None
    seen = set()
    for idx, sp in parts:
        idx = tuple(int(n) for n in idx)
        if idx not in expected:
            raise AssemblyError(f"superpatch index {idx} is outside the {grid.counts} grid")
        if idx in seen:
            raise AssemblyError(f"duplicate superpatch index {idx}")
        seen.add(idx)
        block = _array(sp)
        if block.shape != (grid.side,) * 3:
            raise AssemblyError(f"superpatch {idx} has shape {block.shape}, "
                                f"expected side {grid.side}")
        if out is None:
            out = np.empty(grid.dims, dtype=np.float32)
            if intensity_unit is None and isinstance(sp, Volume):
                intensity_unit = sp.intensity_unit
        out[grid.slices(idx)] = block
    missing = sorted(expected - seen)
    if missing:
        raise AssemblyError(f"missing superpatch index {missing[0]}"
                            + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return Volume(out, intensity_unit or "raw")


# -- tokens ------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchTokens:
    tokens: np.ndarray
    patch: int
    grid: int

    @property
    def count(self) -> int:
        return self.grid ** 3


def token_coords(grid: int) -> np.ndarray:
    """[G^3 x 3] integer (x, y, z) grid coordinates in token order."""
    return np.indices((grid,) * 3).reshape(3, -1).T.copy()


def token_index(x: int, y: int, z: int, grid: int) -> int:
    return (x * grid + y) * grid + z


def patchify(sp, p: int) -> PatchTokens:
    arr = _array(sp)
    s = arr.shape[0]
    if arr.shape != (s, s, s):
        raise GeometryError(f"superpatch must be cubic, got {arr.shape}")
    if p <= 0 or s % p:
        raise GeometryError(f"patch side {p} does not divide superpatch side {s}")
    g = s // p
    tokens = arr.reshape(g, p, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(g ** 3, p ** 3)
    return PatchTokens(np.ascontiguousarray(tokens), p, g)


def unpatchify(t: PatchTokens) -> np.ndarray:
    g, p = t.grid, t.patch
    if t.tokens.shape != (g ** 3, p ** 3):
        raise GeometryError(f"token matrix {t.tokens.shape} does not match G={g}, p={p}")
    arr = t.tokens.reshape(g, g, g, p, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(g * p, g * p, g * p)
    return np.ascontiguousarray(arr)


def voxel_token_mask(token_ids, p: int, grid: int) -> np.ndarray:
    """Boolean side^3 voxel mask covering the given tokens."""
    flags = np.zeros((grid ** 3, p ** 3), dtype=bool)
    flags[np.asarray(token_ids, dtype=np.intp)] = True
    return unpatchify(PatchTokens(flags, p, grid))


def token_count(dims, p: int) -> int:
    """Tokens a plain p^3 ViT sees for a whole volume."""
    for n in dims:
        if n % p:
            raise GeometryError(f"extent {n} is not divisible by patch side {p}")
    a, b, c = (n // p for n in dims)
    return a * b * c
