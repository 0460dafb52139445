"""
Synthetic longitudinal thorax phantoms.

A phantom is a rigid assembly (soft-tissue body, a thoracic skeleton with all
46 landmark-bearing bones, tumours and distractor lesions) defined in a body
frame centred on the grid. Each time point places that assembly with its own
rigid body transform, rescales tumours by a per-time-point factor and adds
Gaussian noise.

Body-frame axes: +x patient right, +y posterior, +z superior (millimetres).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import PhantomError
from .landmarks import VERTEBRA_LEVELS, Landmark, compute_landmarks, default_label_map
from .registration import RigidTransform
from .study import ScanData, ScanEntry, StudyManifest, save_manifest
from .io import save_volume
from .volume import ElementKind, Volume

log = logging.getLogger(__name__)


@dataclass
class TumourSpec:
    center: tuple[float, float, float] = (15.0, 0.0, 10.0)
    radius_mm: float = 10.0
    scales: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    hu: float = 80.0
    drift_mm: tuple[tuple[float, float, float], ...] | None = None
    tumour_id: str = "k0"


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 80, 100)
    spacing: tuple[float, float, float] = (1.5, 1.5, 2.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_timepoints: int = 4
    max_rotation_deg: float = 3.0
    max_translation_mm: float = 6.0
    # optional explicit body transforms, one {"R": [...9], "t": [...3]} per time point
    body_transforms: list[dict] | None = None
    tumours: list[TumourSpec] = field(default_factory=lambda: [TumourSpec()])
    distractor_count: int = 3
    distractor_radius_mm: tuple[float, float] = (6.0, 8.0)
    distractor_hu: float = 70.0
    bone_hu: float = 700.0
    soft_tissue_hu: float = 0.0
    background_hu: float = -1000.0
    body_semi_axes_mm: tuple[float, float] = (62.0, 50.0)
    noise_sigma: float = 5.0
    lesion_band: tuple[float, float] = (40.0, 120.0)
    seed: int = 0
    patient_id: str = "phantom"

    def validate(self) -> None:
        lo, hi = self.lesion_band
        if self.n_timepoints < 1:
            raise PhantomError("n_timepoints must be >= 1")
        if any(d < 8 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise PhantomError("grid too small or spacing not positive")
        for t in self.tumours:
            if not lo <= t.hu <= hi:
                raise PhantomError(f"tumour {t.tumour_id} HU {t.hu} outside lesion band {self.lesion_band}")
            if len(t.scales) != self.n_timepoints:
                raise PhantomError(f"tumour {t.tumour_id} needs {self.n_timepoints} scale factors")
            if any(s < 0 for s in t.scales):
                raise PhantomError(f"tumour {t.tumour_id} has a negative scale factor")
            if t.drift_mm is not None and len(t.drift_mm) != self.n_timepoints:
                raise PhantomError(f"tumour {t.tumour_id} needs {self.n_timepoints} drift vectors")
        if self.distractor_count and not lo <= self.distractor_hu <= hi:
            raise PhantomError(f"distractor HU {self.distractor_hu} outside lesion band")
        if lo <= self.bone_hu <= hi or lo <= self.soft_tissue_hu <= hi:
            raise PhantomError("bone and soft tissue HU must lie outside the lesion band")
        if self.body_transforms is not None and len(self.body_transforms) != self.n_timepoints:
            raise PhantomError(f"need {self.n_timepoints} body transforms")
        ids = [t.tumour_id for t in self.tumours]
        if len(set(ids)) != len(ids):
            raise PhantomError(f"tumour ids must be unique, got {ids}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhantomConfig:
        d = dict(d)
        tumours = d.pop("tumours", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom config keys: {sorted(unknown)}")
        for key in ("dims", "spacing", "origin", "distractor_radius_mm", "body_semi_axes_mm", "lesion_band"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        if tumours is not None:
            specs = []
            for t in tumours:
                t = dict(t)
                if "scales" not in t:
                    t["scales"] = [1.0] * cfg.n_timepoints
                if t.get("drift_mm") is not None:
                    t["drift_mm"] = tuple(tuple(v) for v in t["drift_mm"])
                t["center"] = tuple(t.get("center", TumourSpec.center))
                t["scales"] = tuple(t["scales"])
                specs.append(TumourSpec(**t))
            cfg.tumours = specs
        else:
            cfg.tumours = [TumourSpec(scales=tuple([1.0] * cfg.n_timepoints))]
        return cfg


# ---------------------------------------------------------------------------
# primitives (body frame, mm)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray

    def bounds(self):
        return self.center - self.radii, self.center + self.radii

    def contains(self, q: np.ndarray) -> np.ndarray:
        return (((q - self.center) / self.radii) ** 2).sum(axis=-1) <= 1.0


@dataclass(frozen=True)
class Capsule:
    """Union of cylinders with hemispherical caps along a polyline."""

    points: np.ndarray
    radius: float

    def bounds(self):
        return self.points.min(axis=0) - self.radius, self.points.max(axis=0) + self.radius

    def contains(self, q: np.ndarray) -> np.ndarray:
        inside = np.zeros(q.shape[:-1], dtype=bool)
        for a, b in zip(self.points[:-1], self.points[1:]):
            ab = b - a
            t = np.clip(((q - a) @ ab) / (ab @ ab), 0.0, 1.0)
            closest = a + t[..., None] * ab
            inside |= ((q - closest) ** 2).sum(axis=-1) <= self.radius**2
        return inside


def skeleton_primitives() -> list[tuple[int, object]]:
    """``(label, primitive)`` for every bone, using :func:`default_label_map` labels."""
    label_map = default_label_map()
    by_bone = {(b.kind, b.qualifier): lab for lab, b in label_map.items()}
    prims: list[tuple[int, object]] = []
    z_levels = [58.0 - 8.0 * k for k in range(len(VERTEBRA_LEVELS))]
    for level, z in zip(VERTEBRA_LEVELS, z_levels):
        prims.append((by_bone[("VERTEBRA", level)], Ellipsoid(np.array([0.0, 30.0, z]), np.array([9.0, 7.0, 3.0]))))
    for i in range(1, 13):
        z = z_levels[i - 1]
        width = 24.0 + 2.0 * i
        for side, sign in (("R", 1.0), ("L", -1.0)):
            pts = np.array([[sign * 14.0, 30.0, z], [sign * width, 0.0, z], [sign * (width - 14.0), -30.0, z]])
            prims.append((by_bone[("RIB", f"{side}{i}")], Capsule(pts, 2.5)))
    for side, sign in (("R", 1.0), ("L", -1.0)):
        pts = np.array([[sign * 10.0, -36.0, 70.0], [sign * 44.0, -22.0, 70.0]])
        prims.append((by_bone[("CLAVICLE", side)], Capsule(pts, 3.0)))
    prims.append((by_bone[("STERNUM", None)], Capsule(np.array([[0.0, -34.0, 50.0], [0.0, -34.0, -2.0]]), 4.0)))
    return prims


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class PhantomStudy:
    config: PhantomConfig
    scans: list[ScanData]
    body_transforms: dict[str, RigidTransform]
    landmark_truth: dict[str, list[Landmark]]
    distractors: list[tuple[tuple[float, float, float], float]]

    def scan(self, scan_id: str) -> ScanData:
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise KeyError(scan_id)

    def true_transform(self, src_id: str, dst_id: str) -> RigidTransform:
        """World-to-world rigid map from scan ``src_id`` to scan ``dst_id``."""
        return self.body_transforms[dst_id].compose(self.body_transforms[src_id].inverse())


def _grid_center(cfg: PhantomConfig) -> np.ndarray:
    return np.asarray(cfg.origin) + (np.asarray(cfg.dims) - 1) / 2.0 * np.asarray(cfg.spacing)


def _body_transforms(cfg: PhantomConfig, rng: np.random.Generator) -> list[RigidTransform]:
    centre = _grid_center(cfg)
    out = []
    for t in range(cfg.n_timepoints):
        if cfg.body_transforms is not None:
            T = RigidTransform.from_dict(cfg.body_transforms[t])
            out.append(RigidTransform(T.R, T.t + centre))
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.uniform(0.0, cfg.max_rotation_deg))
        R = Rotation.from_rotvec(axis * angle).as_matrix()
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shift = direction * rng.uniform(0.0, cfg.max_translation_mm)
        out.append(RigidTransform(R, centre + shift))
    return out


def _body_coords(cfg: PhantomConfig, B: RigidTransform) -> np.ndarray:
    """Body-frame coordinates of every voxel centre, shape ``dims + (3,)``."""
    axes = [cfg.origin[a] + np.arange(cfg.dims[a]) * cfg.spacing[a] for a in range(3)]
    world = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return (world - B.t) @ B.R


def _paint(target: np.ndarray, q: np.ndarray, prim, B: RigidTransform, cfg: PhantomConfig, value) -> np.ndarray:
    """Write ``value`` where ``prim`` covers the grid; returns the boolean footprint."""
    lo, hi = prim.bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    world = B.apply(corners)
    spacing = np.asarray(cfg.spacing)
    i0 = np.maximum(np.floor((world.min(axis=0) - cfg.origin) / spacing).astype(int) - 1, 0)
    i1 = np.minimum(np.ceil((world.max(axis=0) - cfg.origin) / spacing).astype(int) + 2, cfg.dims)
    footprint = np.zeros(cfg.dims, dtype=bool)
    if np.any(i1 <= i0):
        return footprint
    sl = tuple(slice(a, b) for a, b in zip(i0, i1))
    inside = prim.contains(q[sl])
    target[sl][inside] = value
    footprint[sl] = inside
    return footprint


def _reference_bone_labels(cfg: PhantomConfig) -> tuple[np.ndarray, RigidTransform]:
    B = RigidTransform(np.eye(3), _grid_center(cfg))
    q = _body_coords(cfg, B)
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    for label, prim in skeleton_primitives():
        _paint(labels, q, prim, B, cfg, label)
    return labels, B


def _tumour_positions(spec: TumourSpec, n: int) -> list[np.ndarray]:
    drift = spec.drift_mm or [(0.0, 0.0, 0.0)] * n
    return [np.asarray(spec.center, dtype=float) + np.asarray(d, dtype=float) for d in drift]


def _place_distractors(cfg: PhantomConfig, rng: np.random.Generator, bone_distance: np.ndarray,
                       B_ref: RigidTransform) -> list[tuple[np.ndarray, float]]:
    placed: list[tuple[np.ndarray, float]] = []
    a, b = cfg.body_semi_axes_mm
    tumour_spots = [(p, t.radius_mm * max(t.scales, default=0.0))
                    for t in cfg.tumours for p in _tumour_positions(t, cfg.n_timepoints)]
    attempts = 0
    while len(placed) < cfg.distractor_count:
        attempts += 1
        if attempts > 2000:
            raise PhantomError(f"could not place {cfg.distractor_count} distractors without overlaps")
        r = rng.uniform(*cfg.distractor_radius_mm)
        c = np.array([rng.uniform(-34.0, 34.0), rng.uniform(-24.0, 18.0), rng.uniform(-62.0, 56.0)])
        if (abs(c[0]) + r + 4) ** 2 / a**2 + (abs(c[1]) + r + 4) ** 2 / b**2 > 1.0:
            continue
        idx = np.round((B_ref.apply(c) - np.asarray(cfg.origin)) / np.asarray(cfg.spacing)).astype(int)
        if np.any(idx < 0) or np.any(idx >= cfg.dims) or bone_distance[tuple(idx)] < r + 3.0:
            continue
        if any(np.linalg.norm(c - p) < r + rt + 15.0 for p, rt in tumour_spots):
            continue
        if any(np.linalg.norm(c - p) < r + rp + 4.0 for p, rp in placed):
            continue
        placed.append((c, r))
    return placed


def generate_study(cfg: PhantomConfig | None = None) -> PhantomStudy:
    cfg = cfg or PhantomConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))

    ref_labels, B_ref = _reference_bone_labels(cfg)
    bone_distance = ndimage.distance_transform_edt(ref_labels == 0, sampling=cfg.spacing)
    for t in cfg.tumours:
        for pos in _tumour_positions(t, cfg.n_timepoints):
            idx = np.round((B_ref.apply(pos) - np.asarray(cfg.origin)) / np.asarray(cfg.spacing)).astype(int)
            if np.any(idx < 0) or np.any(idx >= cfg.dims):
                raise PhantomError(f"tumour {t.tumour_id} centre lies outside the grid")
            if bone_distance[tuple(idx)] <= t.radius_mm * max(t.scales) + 1.0:
                raise PhantomError(f"tumour {t.tumour_id} overlaps a bone primitive")

    ref_landmarks = compute_landmarks(Volume(ref_labels, cfg.spacing, cfg.origin, ElementKind.LABEL_UINT))
    body_ref = {lm.id: np.asarray(lm.position) - B_ref.t for lm in ref_landmarks}

    transforms = _body_transforms(cfg, rng)
    distractors = _place_distractors(cfg, rng, bone_distance, B_ref)
    bones = skeleton_primitives()
    a, b = cfg.body_semi_axes_mm

    scans: list[ScanData] = []
    body_T: dict[str, RigidTransform] = {}
    truth: dict[str, list[Landmark]] = {}
    for t in range(cfg.n_timepoints):
        scan_id = f"t{t}"
        B = transforms[t]
        q = _body_coords(cfg, B)
        image = np.full(cfg.dims, cfg.background_hu, dtype=np.float64)
        image[(q[..., 0] / a) ** 2 + (q[..., 1] / b) ** 2 <= 1.0] = cfg.soft_tissue_hu
        labels = np.zeros(cfg.dims, dtype=np.uint8)
        bone_mask = np.zeros(cfg.dims, dtype=bool)
        for label, prim in bones:
            bone_mask |= _paint(labels, q, prim, B, cfg, label)
        image[bone_mask] = cfg.bone_hu

        lesion_mask = np.zeros(cfg.dims, dtype=bool)
        for centre, radius in distractors:
            fp = _paint(image, q, Ellipsoid(centre, np.full(3, radius)), B, cfg, cfg.distractor_hu)
            lesion_mask |= fp
        gt: dict[str, Volume] = {}
        for spec in cfg.tumours:
            scale = spec.scales[t]
            mask = np.zeros(cfg.dims, dtype=bool)
            if scale > 0:
                centre = _tumour_positions(spec, cfg.n_timepoints)[t]
                mask = _paint(image, q, Ellipsoid(centre, np.full(3, spec.radius_mm * scale)), B, cfg, spec.hu)
            if (mask & bone_mask).any() or (mask & lesion_mask).any():
                raise PhantomError(f"tumour {spec.tumour_id} overlaps another primitive at time point {t}")
            lesion_mask |= mask
            gt[spec.tumour_id] = Volume(mask.astype(np.uint8), cfg.spacing, cfg.origin, ElementKind.LABEL_UINT)

        if cfg.noise_sigma > 0:
            noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, t]))
            image += noise_rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
        image = np.clip(np.rint(image), -32768, 32767)

        scans.append(ScanData(
            scan_id, t,
            Volume(image, cfg.spacing, cfg.origin, ElementKind.HU_INT),
            Volume(labels, cfg.spacing, cfg.origin, ElementKind.LABEL_UINT),
            gt,
        ))
        body_T[scan_id] = B
        truth[scan_id] = [Landmark(lid, tuple(float(v) for v in B.apply(p))) for lid, p in body_ref.items()]

    return PhantomStudy(cfg, scans, body_T, truth, [(tuple(map(float, c)), float(r)) for c, r in distractors])


def write_study(study: PhantomStudy, out_dir, fmt: str = "nifti") -> Path:
    """Write volumes, ``manifest.json`` and ``truth.json``; returns the manifest path."""
    if fmt not in ("nifti", "raw"):
        raise PhantomError(f"unknown output format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if fmt == "nifti" else ".json"
    entries = []
    for s in study.scans:
        image_name = f"{s.scan_id}_image{ext}"
        labels_name = f"{s.scan_id}_labels{ext}"
        save_volume(s.image, out / image_name)
        save_volume(s.labels, out / labels_name)
        masks = {}
        for k, m in s.ground_truth.items():
            name = f"{s.scan_id}_gt_{k}{ext}"
            save_volume(m, out / name)
            masks[k] = name
        entries.append(ScanEntry(s.scan_id, s.time_index, image_name, labels_name, masks))
    manifest = StudyManifest(study.config.patient_id, tuple(entries), out)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    truth = {
        "config": study.config.to_dict(),
        "body_transforms": {k: T.to_dict() for k, T in study.body_transforms.items()},
        "landmarks": {k: [lm.to_dict() for lm in v] for k, v in study.landmark_truth.items()},
        "distractors": [{"center_mm": list(c), "radius_mm": r} for c, r in study.distractors],
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return manifest_path


def load_phantom_config(path) -> PhantomConfig:
    return PhantomConfig.from_dict(json.loads(Path(path).read_text()))
