"""
Volume file formats.

Two formats are supported:

* a NIfTI-1 single-file subset (``.nii`` / ``.nii.gz``): little-endian,
  int16 / float32 / uint8, geometry from ``pixdim[1..3]`` and the ``srow``
  translation. Rotated or flipped sform matrices are rejected.
* a raw payload with a JSON sidecar (``<name>.json`` + ``<name>.raw``).

NIfTI stores geometry as float32, so spacing and origin survive a round trip
at float32 precision. The JSON sidecar keeps full float64 precision.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError
from .volume import ElementKind, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"

# NIfTI datatype codes
DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_KIND_BY_DATATYPE = {DT_UINT8: ElementKind.LABEL_UINT, DT_INT16: ElementKind.HU_INT, DT_FLOAT32: ElementKind.PROB_FLOAT}
_DATATYPE_BY_KIND = {v: k for k, v in _KIND_BY_DATATYPE.items()}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}

_SIDECAR_DTYPES = {"int16": ElementKind.HU_INT, "float32": ElementKind.PROB_FLOAT, "uint8": ElementKind.LABEL_UINT}


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def load_volume(path) -> Volume:
    path = Path(path)
    if _is_nifti(path):
        return load_nifti(path)
    if path.suffix.lower() == ".json":
        return load_sidecar(path)
    raise VolumeFormatError("path", f"unsupported volume file extension: {path.name}")


def save_volume(vol: Volume, path) -> None:
    path = Path(path)
    if _is_nifti(path):
        save_nifti(vol, path)
    elif path.suffix.lower() == ".json":
        save_sidecar(vol, path)
    else:
        raise VolumeFormatError("path", f"unsupported volume file extension: {path.name}")


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------


def encode_nifti(vol: Volume) -> bytes:
    datatype = _DATATYPE_BY_KIND[vol.kind]
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, _BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = NIFTI_MAGIC
    payload = np.ascontiguousarray(vol.data.ravel(order="F"), dtype=vol.kind.dtype.newbyteorder("<")).tobytes()
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def decode_nifti(raw: bytes) -> Volume:
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError("sizeof_hdr", f"file is {len(raw)} bytes, shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError("sizeof_hdr", "big-endian NIfTI files are not supported")
        raise VolumeFormatError("sizeof_hdr", f"expected 348, got {sizeof_hdr}")
    magic = bytes(raw[344:348])
    if magic != NIFTI_MAGIC:
        raise VolumeFormatError("magic", f"expected {NIFTI_MAGIC!r}, got {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise VolumeFormatError("dim", f"only 3D volumes are supported, got dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d <= 0 for d in dims):
        raise VolumeFormatError("dim", f"non-positive dimension in {dims}")

    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in _KIND_BY_DATATYPE:
        raise VolumeFormatError("datatype", f"unsupported datatype code {datatype}")
    kind = _KIND_BY_DATATYPE[datatype]

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(s > 0 for s in spacing):
        raise VolumeFormatError("pixdim", f"spacing must be positive, got {spacing}")

    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise VolumeFormatError("vox_offset", f"{vox_offset} points inside the header")

    slope, inter = struct.unpack_from("<ff", raw, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise VolumeFormatError("scl_slope", f"intensity scaling ({slope}, {inter}) is not supported")

    (sform_code,) = struct.unpack_from("<h", raw, 254)
    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=float).reshape(3, 4)
        linear = srow[:, :3]
        off_diagonal = linear - np.diag(np.diag(linear))
        if np.any(np.abs(off_diagonal) > 1e-6 * max(spacing)):
            raise VolumeFormatError("srow", "non-axis-aligned sform is not supported")
        if not np.allclose(np.diag(linear), spacing, rtol=1e-5):
            raise VolumeFormatError("srow", f"sform diagonal {np.diag(linear)} disagrees with pixdim {spacing}")
        origin = tuple(float(v) for v in srow[:, 3])

    n = dims[0] * dims[1] * dims[2]
    dtype = kind.dtype.newbyteorder("<")
    expected = n * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise VolumeFormatError("data", f"payload has {len(payload)} bytes, expected {expected} for dims {dims}")
    flat = np.frombuffer(payload, dtype=dtype).astype(kind.dtype)
    data = flat.reshape(dims, order="F")
    try:
        return Volume(data, spacing, origin, kind)
    except ValueError as exc:
        raise VolumeFormatError("data", str(exc)) from exc


def save_nifti(vol: Volume, path) -> None:
    path = Path(path)
    blob = encode_nifti(vol)
    if path.name.lower().endswith(".gz"):
        # mtime=0 keeps the compressed bytes reproducible
        with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(blob)
    else:
        path.write_bytes(blob)


def load_nifti(path) -> Volume:
    return decode_nifti(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# raw + JSON sidecar
# ---------------------------------------------------------------------------


def save_sidecar(vol: Volume, path) -> None:
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "element_kind": vol.kind.value,
        "data_file": raw_path.name,
        "data_dtype": vol.kind.dtype.name,
        "byte_order": "LE",
    }
    raw_path.write_bytes(vol.data.ravel(order="F").astype(vol.kind.dtype.newbyteorder("<")).tobytes())
    path.write_text(json.dumps(meta, indent=2) + "\n")


def _field(meta: dict, name: str):
    if name not in meta:
        raise VolumeFormatError(name, "missing from sidecar")
    return meta[name]


def _triple(meta: dict, name: str, cast):
    value = _field(meta, name)
    if not isinstance(value, list) or len(value) != 3:
        raise VolumeFormatError(name, f"expected a list of 3 numbers, got {value!r}")
    try:
        return tuple(cast(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(name, str(exc)) from exc


def load_sidecar(path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError("json", f"sidecar is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise VolumeFormatError("json", "sidecar must be a JSON object")

    dims = _triple(meta, "dims", int)
    spacing = _triple(meta, "spacing", float)
    origin = _triple(meta, "origin", float)
    if any(d <= 0 for d in dims):
        raise VolumeFormatError("dims", f"non-positive dimension in {dims}")
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError("spacing", f"spacing must be positive, got {spacing}")
    try:
        kind = ElementKind(_field(meta, "element_kind"))
    except ValueError as exc:
        raise VolumeFormatError("element_kind", f"unknown element kind {meta['element_kind']!r}") from exc
    dtype_name = _field(meta, "data_dtype")
    if dtype_name not in _SIDECAR_DTYPES:
        raise VolumeFormatError("data_dtype", f"unsupported data dtype {dtype_name!r}")
    if _SIDECAR_DTYPES[dtype_name] is not kind:
        raise VolumeFormatError("data_dtype", f"{dtype_name} does not match element kind {kind.value}")
    if _field(meta, "byte_order") != "LE":
        raise VolumeFormatError("byte_order", f"only 'LE' is supported, got {meta['byte_order']!r}")

    raw_path = path.parent / _field(meta, "data_file")
    if not raw_path.is_file():
        raise VolumeFormatError("data_file", f"payload file {raw_path} not found")
    payload = raw_path.read_bytes()
    dtype = kind.dtype.newbyteorder("<")
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise VolumeFormatError(
            "dims", f"product of dims {dims} = {n} elements but payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(kind.dtype).reshape(dims, order="F")
    try:
        return Volume(data, spacing, origin, kind)
    except ValueError as exc:
        raise VolumeFormatError("data", str(exc)) from exc
