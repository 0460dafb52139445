"""
Guided / unguided segmenter backends and mask utilities.

A backend exposes ``unguided(scan)`` and ``guided(scan, clicks)``, both
returning a PROB_FLOAT volume on the scan's grid. Two backends ship here:

* :class:`OracleSegmenter`, a deterministic threshold-and-components stand-in
  for a trained network, used for phantoms and tests;
* :class:`ExternalSegmenter`, which runs a command over a file protocol so a
  real model can be plugged in.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import tempfile
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import BackendError, BackendGridMismatchError, InvalidArgumentError, OutOfBoundsError
from .io import load_nifti, save_nifti
from .volume import ElementKind, Volume, index_from_world

log = logging.getLogger(__name__)

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)
DEFAULT_BAND = (40.0, 120.0)
ORACLE_LEVEL = 0.9
SNAP_DISTANCE_MM = 10.0
GUIDANCE_SIGMA = 2.0


@dataclass(frozen=True)
class Click:
    position: tuple[float, float, float]
    scan_id: str = ""
    tumour_id: str = ""
    validity_prob: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if self.validity_prob is not None and not 0.0 <= self.validity_prob <= 1.0:
            raise InvalidArgumentError(f"validity_prob must be in [0, 1], got {self.validity_prob}")

    def with_prob(self, p: float) -> Click:
        return replace(self, validity_prob=float(p))

    def to_dict(self) -> dict:
        out = {"pos_mm": list(self.position), "scan_id": self.scan_id, "tumour_id": self.tumour_id}
        if self.validity_prob is not None:
            out["validity_prob"] = self.validity_prob
        return out


class SegmenterBackend(Protocol):
    def unguided(self, scan: Volume) -> Volume: ...

    def guided(self, scan: Volume, clicks: Sequence[Click]) -> Volume: ...


def volume_digest(vol: Volume) -> str:
    h = hashlib.sha1()
    h.update(repr((vol.dims, vol.spacing, vol.origin, vol.kind.value)).encode())
    h.update(vol.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# masks and components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Component:
    label: int
    voxel_count: int
    voxels: np.ndarray  # (N, 3) indices
    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]
    extent_mm: tuple[float, float, float]

    @property
    def max_extent_mm(self) -> float:
        return max(self.extent_mm)


def binarize(prob: Volume, threshold: float = 0.5) -> Volume:
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must be in (0, 1), got {threshold}")
    return prob.with_data((prob.data > threshold).astype(np.uint8), ElementKind.LABEL_UINT)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """26-connected labelling; labels are numbered in scan order."""
    labelled, n = ndimage.label(np.asarray(mask) > 0, structure=STRUCTURE_26)
    return labelled, int(n)


def connected_components(mask: Volume) -> list[Component]:
    labelled, n = label_components(mask.data)
    spacing = np.asarray(mask.spacing)
    comps = []
    for i, bbox in enumerate(ndimage.find_objects(labelled), start=1):
        if bbox is None:
            continue
        offset = np.array([s.start for s in bbox])
        vox = np.argwhere(labelled[bbox] == i) + offset
        lo = vox.min(axis=0)
        hi = vox.max(axis=0)
        extent = (hi - lo + 1) * spacing
        comps.append(Component(i, len(vox), vox, tuple(int(v) for v in lo), tuple(int(v) for v in hi),
                               tuple(float(e) for e in extent)))
    return comps


def click_voxel(scan: Volume, click: Click) -> tuple[int, int, int]:
    return index_from_world(scan, click.position)


def select_components(labelled: np.ndarray, n: int, grid: Volume, clicks: Sequence[Click],
                      snap_mm: float = SNAP_DISTANCE_MM) -> set[int]:
    """Component labels picked by a set of clicks.

    Each click selects the component containing it; a click inside no
    component selects the component whose nearest voxel lies within
    ``snap_mm`` of it (lowest label on ties). Clicks outside the grid are
    ignored. The selection is a union over clicks, so adding a click never
    removes a component.
    """
    chosen: set[int] = set()
    if n == 0 or not clicks:
        return chosen
    coords = None
    owners = None
    for click in clicks:
        try:
            idx = click_voxel(grid, click)
        except OutOfBoundsError:
            continue
        hit = int(labelled[idx])
        if hit:
            chosen.add(hit)
            continue
        if coords is None:
            vox = np.argwhere(labelled > 0)
            owners = labelled[tuple(vox.T)]
            coords = grid.world_coords(vox)
        dist = np.linalg.norm(coords - np.asarray(click.position), axis=1)
        best = dist.min()
        if best <= snap_mm:
            chosen.add(int(owners[dist == best].min()))
    return chosen


def restrict_to_clicked(mask: Volume, clicks: Sequence[Click], snap_mm: float = SNAP_DISTANCE_MM) -> tuple[Volume, int]:
    """Keep only the components of ``mask`` selected by ``clicks``.

    Returns the restricted mask and the number of components kept.
    """
    labelled, n = label_components(mask.data)
    chosen = select_components(labelled, n, mask, clicks, snap_mm)
    keep = np.isin(labelled, sorted(chosen)) if chosen else np.zeros(mask.dims, dtype=bool)
    return mask.with_data(keep.astype(np.uint8), ElementKind.LABEL_UINT), len(chosen)


# ---------------------------------------------------------------------------
# guidance encoding
# ---------------------------------------------------------------------------


def encode_guidance(clicks: Sequence[Click], grid: Volume, sigma: float = GUIDANCE_SIGMA) -> Volume:
    """Gaussian click heat-map: ``exp(-d^2 / 2 sigma^2)`` with ``d`` the voxel
    distance to the nearest click, zero beyond ``4 sigma``."""
    out = np.zeros(grid.dims, dtype=np.float64)
    radius = 4.0 * sigma
    r = int(np.floor(radius))
    dims = np.asarray(grid.dims)
    for click in clicks:
        centre = np.asarray(click_voxel(grid, click))
        lo = np.maximum(centre - r, 0)
        hi = np.minimum(centre + r + 1, dims)
        axes = [np.arange(lo[a], hi[a]) - centre[a] for a in range(3)]
        dx, dy, dz = np.meshgrid(*axes, indexing="ij")
        d2 = dx**2 + dy**2 + dz**2
        g = np.where(d2 <= radius**2, np.exp(-d2 / (2.0 * sigma**2)), 0.0)
        sl = tuple(slice(lo[a], hi[a]) for a in range(3))
        np.maximum(out[sl], g, out=out[sl])
    return grid.with_data(out.astype(np.float32), ElementKind.PROB_FLOAT)


# ---------------------------------------------------------------------------
# oracle backend
# ---------------------------------------------------------------------------


class OracleSegmenter:
    """Deterministic stand-in for a guided network on phantom-style scans.

    Unguided mode marks every voxel whose HU lies in the lesion band with
    probability ``level``. Guided mode keeps only the band components picked
    by the clicks (see :func:`select_components`).
    """

    def __init__(self, band: tuple[float, float] = DEFAULT_BAND, level: float = ORACLE_LEVEL,
                 snap_mm: float = SNAP_DISTANCE_MM, cache_size: int = 8):
        lo, hi = band
        if lo > hi:
            raise InvalidArgumentError(f"lesion band must have lo <= hi, got {band}")
        self.band = (float(lo), float(hi))
        self.level = float(level)
        self.snap_mm = float(snap_mm)
        self._cache: OrderedDict[str, tuple[np.ndarray, int]] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def _components(self, scan: Volume) -> tuple[np.ndarray, int]:
        key = volume_digest(scan)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        lo, hi = self.band
        in_band = (scan.data >= lo) & (scan.data <= hi)
        result = label_components(in_band)
        with self._lock:
            self._cache[key] = result
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return result

    def unguided(self, scan: Volume) -> Volume:
        labelled, _ = self._components(scan)
        prob = np.where(labelled > 0, self.level, 0.0).astype(np.float32)
        return scan.with_data(prob, ElementKind.PROB_FLOAT)

    def guided(self, scan: Volume, clicks: Sequence[Click]) -> Volume:
        if not clicks:
            return self.unguided(scan)
        labelled, n = self._components(scan)
        chosen = select_components(labelled, n, scan, clicks, self.snap_mm)
        keep = np.isin(labelled, sorted(chosen)) if chosen else np.zeros(scan.dims, dtype=bool)
        prob = np.where(keep, self.level, 0.0).astype(np.float32)
        return scan.with_data(prob, ElementKind.PROB_FLOAT)


# ---------------------------------------------------------------------------
# external process backend
# ---------------------------------------------------------------------------


class ExternalSegmenter:
    """Runs ``<cmd> --input scan.nii --clicks clicks.json --output prob.nii``.

    Each call gets its own temporary directory, so concurrent calls are safe.
    """

    def __init__(self, command: str | Sequence[str], timeout: float | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise InvalidArgumentError("external backend command is empty")
        self.timeout = timeout

    def unguided(self, scan: Volume) -> Volume:
        return self._run(scan, [], "unguided")

    def guided(self, scan: Volume, clicks: Sequence[Click]) -> Volume:
        if not clicks:
            return self.unguided(scan)
        return self._run(scan, clicks, "guided")

    def _run(self, scan: Volume, clicks: Sequence[Click], mode: str) -> Volume:
        if scan.kind is not ElementKind.HU_INT:
            raise InvalidArgumentError("external backend expects an HU_INT scan")
        with tempfile.TemporaryDirectory(prefix="linguine-backend-") as tmp:
            work = Path(tmp)
            scan_path = work / "scan.nii"
            clicks_path = work / "clicks.json"
            out_path = work / "prob.nii"
            save_nifti(scan, scan_path)
            payload = {"clicks": [{"pos_mm": list(c.position)} for c in clicks], "mode": mode}
            clicks_path.write_text(json.dumps(payload))
            argv = [*self.command, "--input", str(scan_path), "--clicks", str(clicks_path), "--output", str(out_path)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except FileNotFoundError as exc:
                raise BackendError(f"backend command not found: {self.command[0]}") from exc
            except subprocess.TimeoutExpired as exc:
                raise BackendError(f"backend timed out after {self.timeout}s", output=str(exc.output or "")) from exc
            output = (proc.stdout or "") + (proc.stderr or "")
            if proc.returncode != 0:
                raise BackendError("backend process failed", proc.returncode, output)
            if not out_path.is_file():
                raise BackendError(f"backend produced no output at {out_path.name}", proc.returncode, output)
            try:
                prob = load_nifti(out_path)
            except ValueError as exc:
                raise BackendError(f"backend output is not a valid NIfTI: {exc}", proc.returncode, output) from exc
        if prob.kind is not ElementKind.PROB_FLOAT:
            raise BackendError(f"backend output must be float32, got {prob.kind.value}", proc.returncode, output)
        if not prob.same_grid(scan, tol=1e-3):
            raise BackendGridMismatchError(
                f"backend output grid {prob.dims} spacing {prob.spacing} origin {prob.origin} does not match "
                f"scan grid {scan.dims} spacing {scan.spacing} origin {scan.origin}",
                proc.returncode,
                output,
            )
        return Volume(prob.data, scan.spacing, scan.origin, ElementKind.PROB_FLOAT)


def make_backend(name: str = "oracle", command: str | None = None, band=DEFAULT_BAND) -> SegmenterBackend:
    if name == "oracle":
        return OracleSegmenter(band=tuple(band))
    if name == "external":
        if not command:
            raise InvalidArgumentError("the external backend needs a command")
        return ExternalSegmenter(command)
    raise InvalidArgumentError(f"unknown backend {name!r}; choose 'oracle' or 'external'")
