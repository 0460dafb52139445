"""
Skeletal landmarks from a multi-label bone segmentation.

Each bone label yields a fixed set of landmarks:

* vertebra (T1-T12, L1-L5): centre of mass of the whole bone
* rib (L/R 1-12): centre of mass of its outermost sagittal slice
* clavicle (L/R): centres of mass of its innermost and outermost sagittal slices
* sternum: centre of mass of its most inferior axial slice

That gives 46 landmark ids in total. Side convention: patient right is +x,
so right-side bones reach outwards towards larger x and left-side bones
towards smaller x. Superior is +z. Positions are millimetres.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .volume import ElementKind, Volume

log = logging.getLogger(__name__)

VERTEBRA_LEVELS = [f"T{i}" for i in range(1, 13)] + [f"L{i}" for i in range(1, 6)]
SIDES = ("L", "R")
BONE_KINDS = ("VERTEBRA", "RIB", "CLAVICLE", "STERNUM")


def _vertebra_id(level: str) -> str:
    return f"VERTEBRA_COM_{level[0]}{int(level[1:]):02d}"


def _rib_id(side: str, index: int) -> str:
    return f"RIB_LATERAL_{side}_{index:02d}"


def _enumerate_ids() -> list[str]:
    ids = [_vertebra_id(level) for level in VERTEBRA_LEVELS]
    ids += [_rib_id(side, i) for side in SIDES for i in range(1, 13)]
    ids += [f"CLAVICLE_{which}_{side}" for side in SIDES for which in ("INNER", "OUTER")]
    ids.append("STERNUM_INFERIOR")
    return ids


ALL_LANDMARK_IDS: tuple[str, ...] = tuple(_enumerate_ids())
_ORDER = {lid: i for i, lid in enumerate(ALL_LANDMARK_IDS)}


def landmark_sort_key(landmark_id: str):
    return (_ORDER.get(landmark_id, len(_ORDER)), landmark_id)


@dataclass(frozen=True)
class Bone:
    kind: str
    qualifier: str | None = None

    def __post_init__(self):
        if self.kind not in BONE_KINDS:
            raise InvalidArgumentError(f"unknown bone kind {self.kind!r}")
        q = self.qualifier
        if self.kind == "VERTEBRA" and q not in VERTEBRA_LEVELS:
            raise InvalidArgumentError(f"vertebra qualifier must be one of T1-T12, L1-L5, got {q!r}")
        if self.kind == "RIB":
            ok = isinstance(q, str) and len(q) >= 2 and q[0] in SIDES and q[1:].isdigit() and 1 <= int(q[1:]) <= 12
            if not ok:
                raise InvalidArgumentError(f"rib qualifier must look like 'L7' or 'R12', got {q!r}")
        if self.kind == "CLAVICLE" and q not in SIDES:
            raise InvalidArgumentError(f"clavicle qualifier must be 'L' or 'R', got {q!r}")
        if self.kind == "STERNUM" and q is not None:
            raise InvalidArgumentError("sternum takes no qualifier")

    @property
    def side(self) -> str | None:
        if self.kind == "RIB":
            return self.qualifier[0]
        if self.kind == "CLAVICLE":
            return self.qualifier
        return None

    def landmark_ids(self) -> list[str]:
        if self.kind == "VERTEBRA":
            return [_vertebra_id(self.qualifier)]
        if self.kind == "RIB":
            return [_rib_id(self.qualifier[0], int(self.qualifier[1:]))]
        if self.kind == "CLAVICLE":
            return [f"CLAVICLE_INNER_{self.qualifier}", f"CLAVICLE_OUTER_{self.qualifier}"]
        return ["STERNUM_INFERIOR"]


@dataclass(frozen=True)
class Landmark:
    id: str
    position: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"id": self.id, "pos_mm": [float(v) for v in self.position]}


class BoneLabelMap(dict):
    """Mapping ``label value -> Bone``; injective over the declared labels."""

    def __init__(self, mapping: dict[int, Bone]):
        super().__init__({int(k): v for k, v in mapping.items()})
        bones = list(self.values())
        if len(set(bones)) != len(bones):
            raise InvalidArgumentError("bone label map assigns the same bone to two labels")

    def label_of(self, landmark_id: str) -> int | None:
        for label, bone in self.items():
            if landmark_id in bone.landmark_ids():
                return label
        return None

    def to_dict(self) -> dict:
        return {str(k): {"kind": b.kind, "qualifier": b.qualifier} for k, b in sorted(self.items())}

    @classmethod
    def from_dict(cls, d: dict) -> BoneLabelMap:
        try:
            return cls({int(k): Bone(v["kind"], v.get("qualifier")) for k, v in d.items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed bone label map: {exc}") from exc

    @classmethod
    def load(cls, path) -> BoneLabelMap:
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_label_map() -> BoneLabelMap:
    """Labels 1-17 vertebrae T1..L5, 18-29 left ribs, 30-41 right ribs,
    42/43 left/right clavicle, 44 sternum."""
    mapping: dict[int, Bone] = {}
    label = 1
    for level in VERTEBRA_LEVELS:
        mapping[label] = Bone("VERTEBRA", level)
        label += 1
    for side in SIDES:
        for i in range(1, 13):
            mapping[label] = Bone("RIB", f"{side}{i}")
            label += 1
    for side in SIDES:
        mapping[label] = Bone("CLAVICLE", side)
        label += 1
    mapping[label] = Bone("STERNUM")
    return BoneLabelMap(mapping)


def _com(indices: np.ndarray) -> np.ndarray:
    return indices.mean(axis=0)


def _slice_com(indices: np.ndarray, axis: int, pick_max: bool) -> np.ndarray:
    coord = indices[:, axis]
    target = coord.max() if pick_max else coord.min()
    return _com(indices[coord == target])


def _bone_landmarks(bone: Bone, idx: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Landmark positions in (continuous) voxel index space for one bone."""
    if bone.kind == "VERTEBRA":
        return [(bone.landmark_ids()[0], _com(idx))]
    if bone.kind == "RIB":
        outward_is_max = bone.side == "R"
        return [(bone.landmark_ids()[0], _slice_com(idx, 0, outward_is_max))]
    if bone.kind == "CLAVICLE":
        outward_is_max = bone.side == "R"
        inner_id, outer_id = bone.landmark_ids()
        return [
            (inner_id, _slice_com(idx, 0, not outward_is_max)),
            (outer_id, _slice_com(idx, 0, outward_is_max)),
        ]
    return [(bone.landmark_ids()[0], _slice_com(idx, 2, False))]


def compute_landmarks(labels: Volume, label_map: BoneLabelMap | None = None) -> list[Landmark]:
    """Landmarks of every bone present in ``labels``, in canonical id order."""
    if labels.kind is not ElementKind.LABEL_UINT:
        raise InvalidArgumentError("landmarks need a LABEL_UINT volume")
    label_map = default_label_map() if label_map is None else label_map
    data = labels.data
    origin = np.asarray(labels.origin)
    spacing = np.asarray(labels.spacing)

    present = np.unique(data)
    unknown = [int(v) for v in present if v != 0 and int(v) not in label_map]
    if unknown:
        log.info("ignoring label values without a bone mapping: %s", unknown)

    out: list[Landmark] = []
    objects = ndimage.find_objects(data.astype(np.int32))
    for value, bbox in enumerate(objects, start=1):
        if bbox is None or value not in label_map:
            continue
        local = np.argwhere(data[bbox] == value)
        idx = local + np.array([s.start for s in bbox])
        for lid, com in _bone_landmarks(label_map[value], idx):
            pos = origin + com * spacing
            out.append(Landmark(lid, tuple(float(v) for v in pos)))
    out.sort(key=lambda lm: landmark_sort_key(lm.id))
    return out


def touching_labels(labels: Volume) -> set[int]:
    """Label values with at least one voxel on a face of the grid."""
    d = labels.data
    faces = [d[0], d[-1], d[:, 0], d[:, -1], d[:, :, 0], d[:, :, -1]]
    touched: set[int] = set()
    for face in faces:
        touched.update(int(v) for v in np.unique(face))
    touched.discard(0)
    return touched


def visibility_filter(labels: Volume, landmarks, label_map: BoneLabelMap | None = None) -> list[Landmark]:
    """Drop landmarks whose source bone touches any face of the volume."""
    label_map = default_label_map() if label_map is None else label_map
    cut = touching_labels(labels)
    kept = []
    for lm in landmarks:
        label = label_map.label_of(lm.id)
        if label is not None and label in cut:
            log.debug("discarding %s: bone label %d is cut by the field of view", lm.id, label)
            continue
        kept.append(lm)
    return kept


def extract_landmarks(labels: Volume, label_map: BoneLabelMap | None = None) -> list[Landmark]:
    label_map = default_label_map() if label_map is None else label_map
    return visibility_filter(labels, compute_landmarks(labels, label_map), label_map)


def landmarks_to_json(landmarks) -> list[dict]:
    return [lm.to_dict() for lm in landmarks]


def landmarks_from_json(items) -> list[Landmark]:
    try:
        return [Landmark(str(it["id"]), tuple(float(v) for v in it["pos_mm"])) for it in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed landmark JSON: {exc}") from exc


def save_landmarks(landmarks, path) -> None:
    Path(path).write_text(json.dumps(landmarks_to_json(landmarks), indent=2) + "\n")


def load_landmarks(path) -> list[Landmark]:
    return landmarks_from_json(json.loads(Path(path).read_text()))
