"""Study manifests and in-memory scan bundles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError
from .io import load_volume
from .volume import ElementKind, Volume


@dataclass(frozen=True)
class ScanEntry:
    scan_id: str
    time_index: int
    image_path: str
    bone_labels_path: str
    ground_truth_masks: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"scan_id": self.scan_id, "time_index": self.time_index, "image_path": self.image_path,
               "bone_labels_path": self.bone_labels_path}
        if self.ground_truth_masks:
            out["ground_truth_masks"] = dict(self.ground_truth_masks)
        return out


@dataclass(frozen=True)
class StudyManifest:
    patient_id: str
    scans: tuple[ScanEntry, ...]
    base_dir: Path = Path(".")

    def __post_init__(self):
        ids = [s.scan_id for s in self.scans]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"scan ids must be unique, got {ids}")
        times = [s.time_index for s in self.scans]
        if len(set(times)) != len(times):
            raise ManifestError(f"time indices must be distinct, got {times}")
        object.__setattr__(self, "scans", tuple(sorted(self.scans, key=lambda s: s.time_index)))

    def entry(self, scan_id: str) -> ScanEntry:
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise ManifestError(f"scan {scan_id!r} is not in the manifest (have {[s.scan_id for s in self.scans]})")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "scans": [s.to_dict() for s in self.scans]}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> StudyManifest:
        try:
            scans = tuple(
                ScanEntry(str(s["scan_id"]), int(s["time_index"]), str(s["image_path"]), str(s["bone_labels_path"]),
                          {str(k): str(v) for k, v in (s.get("ground_truth_masks") or {}).items()})
                for s in d["scans"]
            )
            return cls(str(d["patient_id"]), scans, Path(base_dir))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"malformed manifest: {exc!r}") from exc


def load_manifest(path) -> StudyManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    return StudyManifest.from_dict(d, base_dir=path.parent)


def save_manifest(manifest: StudyManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class ScanData:
    """One time point held in memory: image, bone labels and optional truth masks."""

    scan_id: str
    time_index: int
    image: Volume
    labels: Volume
    ground_truth: dict[str, Volume] = field(default_factory=dict)


def load_scan(manifest: StudyManifest, entry: ScanEntry) -> ScanData:
    image = load_volume(manifest.resolve(entry.image_path))
    labels = load_volume(manifest.resolve(entry.bone_labels_path))
    if image.kind is not ElementKind.HU_INT:
        raise ManifestError(f"{entry.scan_id}: image must be HU_INT, got {image.kind.value}")
    if labels.kind is not ElementKind.LABEL_UINT:
        raise ManifestError(f"{entry.scan_id}: bone labels must be LABEL_UINT, got {labels.kind.value}")
    gt = {k: load_volume(manifest.resolve(p)) for k, p in entry.ground_truth_masks.items()}
    return ScanData(entry.scan_id, entry.time_index, image, labels, gt)
