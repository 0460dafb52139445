"""
Click validity classification: features and the forest that scores them.

Features describe the source tumour (HU and unguided-probability statistics
over its mask) and what the propagated click lands on in the destination
(HU and unguided probability at the click voxel).
"""

from __future__ import annotations

import json
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import EmptyMaskError, InvalidArgumentError
from .forest import ForestConfig, RandomForest, load_forest, save_forest, train_forest
from .segmenter import Click
from .volume import Volume, index_from_world

__all__ = [
    "CvcFeatures",
    "FEATURE_NAMES",
    "SourceStats",
    "extract_features",
    "source_statistics",
    "train",
    "predict_proba",
    "save_forest",
    "load_forest",
    "save_training_set",
    "load_training_set",
]


@dataclass(frozen=True)
class CvcFeatures:
    src_hu_mean: float
    src_hu_median: float
    src_hu_var: float
    src_hu_std: float
    src_hu_iqr: float
    src_prob_mean: float
    src_prob_var: float
    dst_hu_at_click: float
    dst_prob_at_click: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


FEATURE_NAMES = tuple(f.name for f in fields(CvcFeatures))


@dataclass(frozen=True)
class SourceStats:
    hu_mean: float
    hu_median: float
    hu_var: float
    hu_std: float
    hu_iqr: float
    prob_mean: float
    prob_var: float


def source_statistics(src_scan: Volume, src_mask: Volume, src_prob: Volume) -> SourceStats:
    """Statistics over the voxels where ``src_mask`` is set.

    Variances are population variances; median and IQR use linearly
    interpolated quantiles.
    """
    if not (src_scan.same_grid(src_mask) and src_scan.same_grid(src_prob)):
        raise InvalidArgumentError("source scan, mask and probability map must share a grid")
    inside = src_mask.data > 0
    if not inside.any():
        raise EmptyMaskError("source mask is empty")
    # sorted so that sums do not depend on voxel order, even in the last bit
    hu = np.sort(src_scan.data[inside].astype(np.float64))
    prob = np.sort(src_prob.data[inside].astype(np.float64))
    q1, median, q3 = np.percentile(hu, [25, 50, 75])
    var = hu.var()
    return SourceStats(
        hu_mean=float(hu.mean()),
        hu_median=float(median),
        hu_var=float(var),
        hu_std=float(np.sqrt(var)),
        hu_iqr=float(q3 - q1),
        prob_mean=float(prob.mean()),
        prob_var=float(prob.var()),
    )


def features_for_click(stats: SourceStats, dst_scan: Volume, dst_prob: Volume, click: Click) -> CvcFeatures:
    idx = index_from_world(dst_scan, click.position)
    return CvcFeatures(
        stats.hu_mean,
        stats.hu_median,
        stats.hu_var,
        stats.hu_std,
        stats.hu_iqr,
        stats.prob_mean,
        stats.prob_var,
        float(dst_scan.data[idx]),
        float(dst_prob.data[idx]),
    )


def extract_features(src_scan: Volume, src_mask: Volume, src_prob: Volume, dst_scan: Volume, dst_prob: Volume,
                     click: Click) -> CvcFeatures:
    return features_for_click(source_statistics(src_scan, src_mask, src_prob), dst_scan, dst_prob, click)


def _matrix(features) -> np.ndarray:
    rows = [f.as_array() if isinstance(f, CvcFeatures) else np.asarray(f, dtype=float) for f in features]
    return np.vstack(rows) if rows else np.zeros((0, len(FEATURE_NAMES)))


def train(dataset, config: ForestConfig | None = None, jobs: int = 1) -> RandomForest:
    """Train on ``(features, label)`` pairs."""
    dataset = list(dataset)
    X = _matrix([f for f, _ in dataset])
    y = np.array([int(label) for _, label in dataset])
    return train_forest(X, y, config, jobs=jobs)


def predict_proba(forest: RandomForest, features) -> float | np.ndarray:
    """Validity probability of one feature vector, or of each row of a list."""
    if isinstance(features, CvcFeatures):
        return forest.predict_proba(features.as_array())
    arr = np.asarray(features, dtype=float) if not isinstance(features, list) else _matrix(features)
    return forest.predict_proba(arr)


def save_training_set(dataset, path) -> None:
    """JSON lines of ``{"features": [9 reals], "label": 0|1}``."""
    with open(path, "w") as fh:
        for f, label in dataset:
            vec = f.as_array() if isinstance(f, CvcFeatures) else np.asarray(f, dtype=float)
            fh.write(json.dumps({"features": [float(v) for v in vec], "label": int(label)}) + "\n")


def load_training_set(path) -> list[tuple[CvcFeatures, int]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            vec = [float(v) for v in row["features"]]
            label = int(row["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: malformed training row: {exc}") from exc
        if len(vec) != len(FEATURE_NAMES) or label not in (0, 1):
            raise InvalidArgumentError(f"{path}:{lineno}: need {len(FEATURE_NAMES)} features and a 0/1 label")
        out.append((CvcFeatures(*vec), label))
    return out
