"""
Axis-aligned 3D volumes with millimetre geometry.

A :class:`Volume` stores its samples as a numpy array indexed ``[x, y, z]``.
World coordinates follow ``world = origin + index * spacing``; there are no
direction cosines. Serialised payloads are written x-fastest (Fortran order).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, OutOfBoundsError

STANDARD_SPACING = (1.5, 1.5, 2.0)


class ElementKind(str, enum.Enum):
    HU_INT = "HU_INT"
    PROB_FLOAT = "PROB_FLOAT"
    LABEL_UINT = "LABEL_UINT"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self])

    @property
    def padding(self) -> float:
        """Value used for samples that fall outside the source field of view."""
        return -1024.0 if self is ElementKind.HU_INT else 0.0


_DTYPES = {
    ElementKind.HU_INT: np.int16,
    ElementKind.PROB_FLOAT: np.float32,
    ElementKind.LABEL_UINT: np.uint8,
}


class Interpolation(str, enum.Enum):
    TRILINEAR = "TRILINEAR"
    NEAREST = "NEAREST"


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid.

    ``data`` is converted to the element kind's storage dtype (int16, float32
    or uint8) and marked read-only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: ElementKind = ElementKind.HU_INT

    def __post_init__(self):
        kind = ElementKind(self.kind)
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3D, got {data.ndim}D")
        if any(d <= 0 for d in data.shape):
            raise InvalidArgumentError(f"dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise InvalidArgumentError("spacing and origin need 3 components")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidArgumentError(f"spacing components must be > 0, got {spacing}")
        if not all(math.isfinite(o) for o in origin):
            raise InvalidArgumentError(f"origin must be finite, got {origin}")

        if kind is ElementKind.PROB_FLOAT:
            if data.size and (np.nanmin(data) < 0 or np.nanmax(data) > 1 or np.isnan(data).any()):
                raise InvalidArgumentError("PROB_FLOAT values must lie in [0, 1]")
        elif kind is ElementKind.LABEL_UINT:
            if data.dtype.kind == "f" and not np.all(np.mod(data, 1) == 0):
                raise InvalidArgumentError("LABEL_UINT values must be integers")
            if data.size and (data.min() < 0 or data.max() > np.iinfo(np.uint8).max):
                raise InvalidArgumentError("LABEL_UINT values must be in [0, 255]")
        elif kind is ElementKind.HU_INT and data.size:
            info = np.iinfo(np.int16)
            if data.min() < info.min or data.max() > info.max:
                raise InvalidArgumentError("HU_INT values exceed the int16 range")

        if data.dtype != kind.dtype:
            if kind is ElementKind.HU_INT and data.dtype.kind == "f":
                data = np.rint(data)
            data = data.astype(kind.dtype)
        elif data.flags.writeable:
            data = data.copy()
        data.setflags(write=False)

        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size of the grid, counting each voxel as one spacing wide."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def with_data(self, data: np.ndarray, kind: ElementKind | None = None) -> Volume:
        return Volume(data, self.spacing, self.origin, kind or self.kind)

    def same_grid(self, other: Volume, tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def contains_world(self, p) -> bool:
        try:
            index_from_world(self, p)
        except OutOfBoundsError:
            return False
        return True

    def world_coords(self, indices: np.ndarray) -> np.ndarray:
        """Vectorised ``world_from_index`` for an ``(N, 3)`` index array."""
        return np.asarray(self.origin) + np.asarray(indices, dtype=float) * np.asarray(self.spacing)


def world_from_index(vol: Volume, index) -> np.ndarray:
    return np.asarray(vol.origin) + np.asarray(index, dtype=float) * np.asarray(vol.spacing)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def index_from_world(vol: Volume, point) -> tuple[int, int, int]:
    """Nearest voxel to a world point; ties round half away from zero."""
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidArgumentError(f"expected a finite 3-vector, got {point!r}")
    continuous = (p - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    idx = _round_half_away(continuous).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.asarray(vol.dims)):
        raise OutOfBoundsError(f"world point {tuple(p)} maps to index {tuple(idx)} outside grid {vol.dims}")
    return tuple(int(i) for i in idx)


def _axis_linear(data: np.ndarray, coords: np.ndarray, axis: int, pad: float) -> np.ndarray:
    n = data.shape[axis]
    outside = (coords < -1.0) | (coords > n)
    c = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    w = frac.reshape(shape)
    out = np.take(data, lo, axis=axis) * (1.0 - w) + np.take(data, hi, axis=axis) * w
    if outside.any():
        sl = [slice(None)] * 3
        sl[axis] = outside
        out[tuple(sl)] = pad
    return out


def _axis_nearest(data: np.ndarray, coords: np.ndarray, axis: int, pad: float) -> np.ndarray:
    n = data.shape[axis]
    outside = (coords < -1.0) | (coords > n)
    idx = np.clip(_round_half_away(coords).astype(int), 0, n - 1)
    out = np.take(data, idx, axis=axis)
    if outside.any():
        out = out.astype(np.float64)
        sl = [slice(None)] * 3
        sl[axis] = outside
        out[tuple(sl)] = pad
    return out


def resample(vol: Volume, target_spacing, mode: Interpolation | str, dims=None, origin=None) -> Volume:
    """Resample onto an axis-aligned grid with ``target_spacing``.

    Samples within one source voxel of the outermost voxel centres take the
    edge value; samples further out take the element kind's padding value.
    Without explicit ``dims`` the output covers the input's physical extent,
    ``ceil(dims * spacing / target_spacing)`` voxels per axis.
    """
    mode = Interpolation(mode.upper() if isinstance(mode, str) else mode)
    target = np.asarray(target_spacing, dtype=float)
    if target.shape != (3,) or not np.all(target > 0):
        raise InvalidArgumentError(f"target_spacing components must be > 0, got {target_spacing}")
    if vol.kind is ElementKind.LABEL_UINT and mode is not Interpolation.NEAREST:
        raise InvalidArgumentError("LABEL_UINT volumes require NEAREST interpolation")
    if vol.kind is not ElementKind.LABEL_UINT and mode is not Interpolation.TRILINEAR:
        raise InvalidArgumentError(f"{vol.kind.value} volumes require TRILINEAR interpolation")

    spacing = np.asarray(vol.spacing)
    if dims is None:
        ratio = np.asarray(vol.dims) * spacing / target
        dims = tuple(int(math.ceil(r - 1e-9)) for r in ratio)
    origin = tuple(vol.origin) if origin is None else tuple(float(o) for o in origin)

    if dims == vol.dims and np.array_equal(target, spacing) and origin == tuple(vol.origin):
        return vol

    pad = vol.kind.padding
    out = vol.data.astype(np.float64)
    for axis in range(3):
        coords = (origin[axis] + np.arange(dims[axis]) * target[axis] - vol.origin[axis]) / spacing[axis]
        if mode is Interpolation.TRILINEAR:
            out = _axis_linear(out, coords, axis, pad)
        else:
            out = _axis_nearest(out, coords, axis, pad)

    if vol.kind is ElementKind.PROB_FLOAT:
        out = np.clip(out, 0.0, 1.0)
    return Volume(out, tuple(target), origin, vol.kind)


def resample_to_standard(vol: Volume, target_spacing=STANDARD_SPACING, mode: Interpolation | str | None = None) -> Volume:
    if mode is None:
        mode = Interpolation.NEAREST if vol.kind is ElementKind.LABEL_UINT else Interpolation.TRILINEAR
    return resample(vol, target_spacing, mode)


def resample_like(vol: Volume, reference: Volume) -> Volume:
    """Resample ``vol`` onto exactly the grid of ``reference``."""
    mode = Interpolation.NEAREST if vol.kind is ElementKind.LABEL_UINT else Interpolation.TRILINEAR
    return resample(vol, reference.spacing, mode, dims=reference.dims, origin=reference.origin)
