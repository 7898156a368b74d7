"""Label and intensity volumes: on-disk format, world/voxel transforms,
lung-membership gating and fixed-geometry patch extraction.

On-disk container: a small text header plus a raw little-endian voxel file.
Header grammar (one ``key = value`` per line, unknown keys rejected)::

    dims = nx ny nz
    spacing_mm = sx sy sz
    origin_mm = ox oy oz
    element_type = uint8 | int16 | float32
    data_file = <path relative to the header>

Voxels are stored x-fastest; in memory the array is indexed ``[ix, iy, iz]``.
Label lookups use the nearest voxel (labels are never interpolated); patch
resampling uses trilinear interpolation. Grid points outside the sample hull
of the source volume take the air value, -1000 HU, which normalizes to 0.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import LUNG_LOBE_LABELS, WorldPoint, require_positive
from .errors import InputError

ELEMENT_DTYPES = {"uint8": "<u1", "int16": "<i2", "float32": "<f4"}

PATCH_SHAPE = (64, 64, 64)
PATCH_SPACING_MM = (0.7, 0.7, 1.25)
HU_MIN = -1000.0
HU_MAX = 500.0

_HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "element_type", "data_file")


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: WorldPoint
    element_type: str

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InputError(f"dims must be three integers >= 1, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)
        spacing = tuple(require_positive("spacing_mm", s) for s in self.spacing_mm)
        if len(spacing) != 3:
            raise InputError(f"spacing_mm must have three components, got {self.spacing_mm!r}")
        object.__setattr__(self, "spacing_mm", spacing)
        if self.element_type not in ELEMENT_DTYPES:
            raise InputError(
                f"element_type must be one of {sorted(ELEMENT_DTYPES)}, got {self.element_type!r}"
            )

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


@dataclass(eq=False)
class Volume:
    """An immutable-by-convention voxel grid with world placement."""

    header: VolumeHeader
    values: np.ndarray

    def __post_init__(self):
        if tuple(self.values.shape) != self.header.dims:
            raise InputError(
                f"voxel array shape {self.values.shape} does not match dims {self.header.dims}"
            )

    @classmethod
    def from_array(
        cls,
        values: np.ndarray,
        spacing_mm: tuple[float, float, float],
        origin_mm: WorldPoint,
        element_type: str | None = None,
    ) -> "Volume":
        values = np.asarray(values)
        if values.ndim != 3:
            raise InputError(f"volume array must be 3-D, got shape {values.shape}")
        if element_type is None:
            element_type = _element_type_for(values.dtype)
        header = VolumeHeader(
            dims=tuple(values.shape),
            spacing_mm=spacing_mm,
            origin_mm=origin_mm,
            element_type=element_type,
        )
        return cls(header=header, values=values.astype(ELEMENT_DTYPES[element_type]))


@dataclass(eq=False)
class Patch:
    """A 64x64x64 resampled, windowed and normalized intensity cube."""

    values: np.ndarray
    center: WorldPoint
    spacing_mm: tuple[float, float, float] = PATCH_SPACING_MM

    def __post_init__(self):
        if tuple(self.values.shape) != PATCH_SHAPE:
            raise InputError(f"patch shape must be {PATCH_SHAPE}, got {self.values.shape}")


def _element_type_for(dtype: np.dtype) -> str:
    for name, code in ELEMENT_DTYPES.items():
        if np.dtype(code) == np.dtype(dtype).newbyteorder("<"):
            return name
    raise InputError(f"unsupported voxel dtype {dtype!r}; use one of {sorted(ELEMENT_DTYPES)}")


def world_to_voxel(p: WorldPoint, header: VolumeHeader) -> tuple[float, float, float]:
    """Continuous voxel coordinate of a world point. No bounds check."""
    sx, sy, sz = header.spacing_mm
    o = header.origin_mm
    return ((p.x - o.x) / sx, (p.y - o.y) / sy, (p.z - o.z) / sz)


def voxel_to_world(v: tuple[float, float, float], header: VolumeHeader) -> WorldPoint:
    sx, sy, sz = header.spacing_mm
    o = header.origin_mm
    return WorldPoint(o.x + v[0] * sx, o.y + v[1] * sy, o.z + v[2] * sz)


def nearest_voxel_index(p: WorldPoint, header: VolumeHeader) -> tuple[int, int, int] | None:
    """Nearest voxel index for a world point, or None when out of bounds.

    Half-way coordinates round toward +infinity.
    """
    cont = world_to_voxel(p, header)
    idx = tuple(int(math.floor(c + 0.5)) for c in cont)
    for i, n in zip(idx, header.dims):
        if i < 0 or i >= n:
            return None
    return idx


def label_at(p: WorldPoint, volume: Volume) -> int | None:
    """Nearest-voxel label at a world point; None when outside the volume."""
    idx = nearest_voxel_index(p, volume.header)
    if idx is None:
        return None
    return int(volume.values[idx])


def centroid_in_lung(p: WorldPoint, volume: Volume, lung_labels=LUNG_LOBE_LABELS) -> bool:
    """True iff the nearest voxel under the point carries a lung-lobe label."""
    label = label_at(p, volume)
    return label is not None and label in lung_labels


def _trilinear(values: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    ``coords`` has shape (N, 3). Points outside the sample hull
    [0, n-1] on any axis receive ``fill``.
    """
    nx, ny, nz = values.shape
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    inside = (
        (x >= 0.0) & (x <= nx - 1)
        & (y >= 0.0) & (y <= ny - 1)
        & (z >= 0.0) & (z <= nz - 1)
    )
    out = np.full(coords.shape[0], float(fill), dtype=np.float64)
    if not inside.any():
        return out

    xi, yi, zi = x[inside], y[inside], z[inside]
    x0 = np.clip(np.floor(xi).astype(np.int64), 0, nx - 1)
    y0 = np.clip(np.floor(yi).astype(np.int64), 0, ny - 1)
    z0 = np.clip(np.floor(zi).astype(np.int64), 0, nz - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = xi - x0
    fy = yi - y0
    fz = zi - z0

    v = values.astype(np.float64, copy=False)
    c000 = v[x0, y0, z0]
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def extract_patch(volume: Volume, center: WorldPoint) -> Patch:
    """Resample a 64^3 patch at (0.7, 0.7, 1.25) mm spacing around a point.

    Samples are trilinearly interpolated from the source volume, clipped to
    the [-1000, 500] HU window and normalized to [0, 1]. Grid points outside
    the source receive the normalized air value 0.0.
    """
    if volume.values.size == 0:
        raise InputError("cannot extract a patch from a degenerate (empty) volume")
    nxp, nyp, nzp = PATCH_SHAPE
    half = ((nxp - 1) / 2.0, (nyp - 1) / 2.0, (nzp - 1) / 2.0)
    axes_world = [
        center.as_tuple()[a] + (np.arange(PATCH_SHAPE[a]) - half[a]) * PATCH_SPACING_MM[a]
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes_world, indexing="ij")

    o = volume.header.origin_mm
    sx, sy, sz = volume.header.spacing_mm
    coords = np.stack(
        [
            (gx.ravel() - o.x) / sx,
            (gy.ravel() - o.y) / sy,
            (gz.ravel() - o.z) / sz,
        ],
        axis=1,
    )
    hu = _trilinear(volume.values, coords, fill=HU_MIN)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    normalized = (hu - HU_MIN) / (HU_MAX - HU_MIN)
    return Patch(values=normalized.reshape(PATCH_SHAPE), center=center)


def _parse_triple(value: str, key: str, caster):
    parts = value.split()
    if len(parts) != 3:
        raise InputError(f"header key {key!r} needs three values, got {value!r}")
    try:
        return tuple(caster(p) for p in parts)
    except ValueError:
        raise InputError(f"header key {key!r} has a malformed value: {value!r}") from None


def read_header(header_path: str | Path) -> tuple[VolumeHeader, Path]:
    """Parse a volume header file; returns the header and the data file path."""
    header_path = Path(header_path)
    fields: dict[str, str] = {}
    try:
        text = header_path.read_text(encoding="utf-8")
    except OSError as err:
        raise InputError(f"cannot read volume header {header_path}: {err}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{header_path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _HEADER_KEYS:
            raise InputError(f"{header_path}:{lineno}: unknown header key {key!r}")
        if key in fields:
            raise InputError(f"{header_path}:{lineno}: duplicate header key {key!r}")
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise InputError(f"{header_path}: missing header keys {missing}")

    dims = _parse_triple(fields["dims"], "dims", int)
    spacing = _parse_triple(fields["spacing_mm"], "spacing_mm", float)
    origin = _parse_triple(fields["origin_mm"], "origin_mm", float)
    header = VolumeHeader(
        dims=dims,
        spacing_mm=spacing,
        origin_mm=WorldPoint(*origin),
        element_type=fields["element_type"],
    )
    return header, header_path.parent / fields["data_file"]


def load_volume(header_path: str | Path) -> Volume:
    """Load a volume from its header file and raw data file."""
    header, data_path = read_header(header_path)
    try:
        raw = np.fromfile(data_path, dtype=ELEMENT_DTYPES[header.element_type])
    except OSError as err:
        raise InputError(f"cannot read voxel data {data_path}: {err}") from None
    if raw.size != header.voxel_count:
        raise InputError(
            f"{data_path}: expected {header.voxel_count} voxels, found {raw.size}"
        )
    nx, ny, nz = header.dims
    values = raw.reshape((nz, ny, nx)).T  # stored x-fastest
    return Volume(header=header, values=values)


def save_volume(volume: Volume, header_path: str | Path, data_file: str | None = None) -> Path:
    """Write a volume as header + raw pair; returns the header path."""
    header_path = Path(header_path)
    if data_file is None:
        data_file = header_path.stem + ".raw"
    h = volume.header
    dtype = ELEMENT_DTYPES[h.element_type]
    data_path = header_path.parent / data_file
    volume.values.astype(dtype).T.tofile(data_path)
    lines = [
        f"dims = {h.dims[0]} {h.dims[1]} {h.dims[2]}",
        f"spacing_mm = {h.spacing_mm[0]!r} {h.spacing_mm[1]!r} {h.spacing_mm[2]!r}",
        f"origin_mm = {h.origin_mm.x!r} {h.origin_mm.y!r} {h.origin_mm.z!r}",
        f"element_type = {h.element_type}",
        f"data_file = {data_file}",
    ]
    header_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return header_path


def save_patch(patch: Patch, header_path: str | Path) -> Path:
    """Persist a patch as a float32 volume pair (used to feed external scorers)."""
    origin = WorldPoint(
        patch.center.x - (PATCH_SHAPE[0] - 1) / 2.0 * patch.spacing_mm[0],
        patch.center.y - (PATCH_SHAPE[1] - 1) / 2.0 * patch.spacing_mm[1],
        patch.center.z - (PATCH_SHAPE[2] - 1) / 2.0 * patch.spacing_mm[2],
    )
    volume = Volume.from_array(
        patch.values.astype("<f4"), spacing_mm=patch.spacing_mm, origin_mm=origin,
        element_type="float32",
    )
    return save_volume(volume, header_path)
