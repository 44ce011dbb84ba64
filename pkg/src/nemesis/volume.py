"""Volumes, label grids, their binary file format, and synthetic phantoms.

File layout (little-endian)::

    magic      4 bytes   b"NEMV" (volume) or b"NEML" (labels)
    version    u32       1
    H, W, D    u32 x 3
    dtype      u8        1 = float32 voxels, 2 = uint16 organ ids
    reserved   3 bytes   zero
    payload    H*W*D values, row-major (H outer, D inner)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, SpecError

VOLUME_MAGIC = b"NEMV"
LABEL_MAGIC = b"NEML"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_UINT16 = 2
HEADER = struct.Struct("<4sI3IB3s")
_MAX_EXTENT = 1 << 16

UNITS = ("raw", "hu", "normalized")

# BTCV target organs, in the order the benchmark lists them.
ORGAN_NAMES = ("aorta", "gallbladder", "spleen", "left_kidney", "right_kidney",
               "liver", "stomach", "pancreas")
BODY_ID = 9


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    intensity_unit: str = "raw"

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3:
            raise ParameterError(f"volume must be 3-d, got shape {arr.shape}")
        if self.intensity_unit not in UNITS:
            raise ParameterError(f"unknown intensity unit {self.intensity_unit!r}")
        arr.flags.writeable = False
        object.__setattr__(self, "voxels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)


@dataclass(frozen=True)
class LabelGrid:
    labels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.uint16, order="C", copy=True)
        if arr.ndim != 3:
            raise ParameterError(f"label grid must be 3-d, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)


# -- file format -------------------------------------------------------------------


def _encode(magic: bytes, dtype_code: int, arr: np.ndarray) -> bytes:
    h, w, d = arr.shape
    header = HEADER.pack(magic, FORMAT_VERSION, h, w, d, dtype_code, b"\0\0\0")
    np_dtype = "<f4" if dtype_code == DTYPE_FLOAT32 else "<u2"
    return header + arr.astype(np_dtype, copy=False).tobytes(order="C")


def _decode(buf: bytes, magic: bytes, dtype_code: int) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"header truncated: {len(buf)} of {HEADER.size} bytes", offset=len(buf))
    got_magic, version, h, w, d, code, reserved = HEADER.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    for i, n in enumerate((h, w, d)):
        if n == 0 or n > _MAX_EXTENT:
            raise FormatError(f"extent {n} out of range (1..{_MAX_EXTENT})", offset=8 + 4 * i)
    if code != dtype_code:
        raise FormatError(f"dtype code {code}, expected {dtype_code}", offset=20)
    if reserved != b"\0\0\0":
        raise FormatError("reserved bytes must be zero", offset=21)
    itemsize = 4 if dtype_code == DTYPE_FLOAT32 else 2
    count = h * w * d
    need = HEADER.size + count * itemsize
    if len(buf) < need:
        have = (len(buf) - HEADER.size) // itemsize
        raise FormatError(f"payload truncated: {have} of {count} values", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", offset=need)
    np_dtype = "<f4" if dtype_code == DTYPE_FLOAT32 else "<u2"
    arr = np.frombuffer(buf, dtype=np_dtype, count=count, offset=HEADER.size)
    return arr.reshape(h, w, d)


def volume_bytes(v: Volume) -> bytes:
    return _encode(VOLUME_MAGIC, DTYPE_FLOAT32, v.voxels)


def volume_from_bytes(buf: bytes, intensity_unit: str = "raw") -> Volume:
    return Volume(_decode(buf, VOLUME_MAGIC, DTYPE_FLOAT32).astype(np.float32), intensity_unit)


def save_volume(v: Volume, path) -> None:
    Path(path).write_bytes(volume_bytes(v))


def load_volume(path, intensity_unit: str = "raw") -> Volume:
    """Read a NEMV file.

    The format has no unit field, so the caller states what the payload holds.
    """
    return volume_from_bytes(Path(path).read_bytes(), intensity_unit)


def save_labels(lg: LabelGrid, path) -> None:
    Path(path).write_bytes(_encode(LABEL_MAGIC, DTYPE_UINT16, lg.labels))


def load_labels(path) -> LabelGrid:
    return LabelGrid(_decode(Path(path).read_bytes(), LABEL_MAGIC, DTYPE_UINT16).astype(np.uint16))


# -- intensity ---------------------------------------------------------------------


def normalize(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp to ``[lo, hi]`` and map affinely onto ``[0, 1]``."""
    if not lo < hi:
        raise ParameterError(f"window needs lo < hi, got [{lo}, {hi}]")
    x = np.clip(v.voxels.astype(np.float64), lo, hi)
    return Volume(((x - lo) / (hi - lo)).astype(np.float32), "normalized")


def corrupt_gaussian(v: Volume, sigma: float, seed) -> Volume:
    """Add i.i.d. N(0, sigma^2) noise per voxel. Values are not re-clamped."""
    if sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Volume(v.voxels.copy(), v.intensity_unit)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=v.voxels.shape)
    return Volume((v.voxels.astype(np.float64) + noise).astype(np.float32), v.intensity_unit)


# -- phantoms ----------------------------------------------------------------------


@dataclass(frozen=True)
class Organ:
    organ_id: int
    shape: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"organ {self.organ_id}"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    organs: tuple[Organ, ...] = ()
    background: float = -1000.0
    seed: int = 0
    texture_sigma: float = 0.0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(n) <= 0 for n in self.dims):
            raise SpecError(f"phantom dims must be three positive extents, got {self.dims}")
        seen = set()
        for o in self.organs:
            if o.organ_id <= 0 or o.organ_id > 0xFFFF:
                raise SpecError(f"{o.label}: organ id must be in 1..65535")
            if o.organ_id in seen:
                raise SpecError(f"{o.label}: duplicate organ id {o.organ_id}")
            seen.add(o.organ_id)
            if o.shape not in ("sphere", "ellipsoid", "box"):
                raise SpecError(f"{o.label}: unknown shape {o.shape!r}")
            if o.shape == "sphere" and len(set(o.radii)) != 1:
                raise SpecError(f"{o.label}: sphere needs equal radii")
            for axis, (c, r, n) in enumerate(zip(o.center, o.radii, self.dims)):
                if r <= 0:
                    raise SpecError(f"{o.label}: radius must be positive")
                if c - r < 0 or c + r > n - 1:
                    raise SpecError(f"{o.label}: extends outside the volume along axis {axis} "
                                    f"(center {c}, radius {r}, extent {n})")
        if self.texture_sigma < 0:
            raise SpecError("texture sigma must be >= 0")


def _solid(o: Organ, grids) -> np.ndarray:
    gx, gy, gz = grids
    cx, cy, cz = o.center
    rx, ry, rz = o.radii
    if o.shape == "box":
        return (np.abs(gx - cx) <= rx) & (np.abs(gy - cy) <= ry) & (np.abs(gz - cz) <= rz)
    return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 + ((gz - cz) / rz) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec) -> tuple[Volume, LabelGrid]:
    """Rasterize analytic solids at voxel centers; later organs overwrite earlier ones."""
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij",
                        sparse=True)
    vox = np.full(dims, spec.background, dtype=np.float64)
    lab = np.zeros(dims, dtype=np.uint16)
    for o in spec.organs:
        inside = _solid(o, grids)
        vox[inside] = o.intensity
        lab[inside] = o.organ_id
    if spec.texture_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        vox = vox + rng.normal(0.0, spec.texture_sigma, size=dims) * (lab > 0)
    return Volume(vox.astype(np.float32), "hu"), LabelGrid(lab)


# Canonical abdomen on a unit cube: (id, shape, center, radii, HU). Coordinates
# are fractions of each extent; z is the cranio-caudal axis.
_ANATOMY = (
    (BODY_ID, "ellipsoid", (0.50, 0.50, 0.50), (0.44, 0.36, 0.48), 20.0),
    (6, "ellipsoid", (0.30, 0.45, 0.66), (0.18, 0.16, 0.16), 90.0),     # liver
    (3, "ellipsoid", (0.74, 0.58, 0.64), (0.09, 0.08, 0.11), 130.0),    # spleen
    (7, "ellipsoid", (0.64, 0.34, 0.62), (0.11, 0.09, 0.10), -60.0),    # stomach
    (2, "sphere", (0.36, 0.30, 0.52), (0.07, 0.07, 0.07), 5.0),         # gallbladder
    (4, "ellipsoid", (0.68, 0.66, 0.38), (0.07, 0.06, 0.12), 190.0),    # left kidney
    (5, "ellipsoid", (0.32, 0.66, 0.36), (0.07, 0.06, 0.12), 240.0),    # right kidney
    (8, "box", (0.52, 0.46, 0.44), (0.12, 0.04, 0.05), 60.0),           # pancreas
    (1, "ellipsoid", (0.50, 0.60, 0.50), (0.04, 0.04, 0.34), 280.0),    # aorta
)


def default_phantom_spec(dims=(64, 64, 64), seed: int = 0, jitter: float = 0.05,
                         scale_jitter: float = 0.15, background: float = -1000.0,
                         texture_sigma: float = 0.0) -> PhantomSpec:
    """Eight-organ abdomen with seeded per-organ position and size jitter.

    ``jitter`` is a fraction of each extent, ``scale_jitter`` a relative
    change of each radius.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in dims)
    organs = []
    for oid, shape, c, r, hu in _ANATOMY:
        if oid == BODY_ID:
            center = tuple(ci * (n - 1) for ci, n in zip(c, dims))
            radii = tuple(ri * (n - 1) for ri, n in zip(r, dims))
        else:
            shift = rng.uniform(-jitter, jitter, size=3)
            grow = rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter, size=3)
            if shape == "sphere":
                grow[:] = grow[0]
            center = tuple((ci + si) * (n - 1) for ci, si, n in zip(c, shift, dims))
            radii = tuple(ri * gi * (n - 1) for ri, gi, n in zip(r, grow, dims))
            if shape == "sphere":
                radii = (min(radii),) * 3
        name = "body" if oid == BODY_ID else ORGAN_NAMES[oid - 1]
        organs.append(Organ(oid, shape, tuple(float(x) for x in center),
                            tuple(float(x) for x in radii), hu, name))
    return PhantomSpec(dims, tuple(organs), background, seed, texture_sigma)


@dataclass
class Corpus:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def make_corpus(n_train: int = 18, n_test: int = 12, dims=(64, 64, 64), seed: int = 0,
                **kwargs) -> Corpus:
    """Phantom (Volume, LabelGrid) pairs split into train and test lists."""
    pairs = [make_phantom(default_phantom_spec(dims, seed=int(s), **kwargs))
             for s in np.random.SeedSequence(seed).generate_state(n_train + n_test)]
    return Corpus(pairs[:n_train], pairs[n_train:])
