"""
Longitudinal guidance propagation.

For one annotated source scan and tumour, every other scan of the study is
segmented by:

1. resampling both scans to the standard spacing and extracting skeletal
   landmarks;
2. fitting a rigid transform between the landmark sets;
3. sampling ``m`` clicks uniformly from the source tumour mask and mapping
   them into the destination scan;
4. scoring each propagated click with the click-validity forest and keeping
   at most ``n`` clicks whose probability exceeds the threshold;
5. running the guided segmenter with the surviving clicks, or falling back
   to the unguided segmentation when none survive.
"""

from __future__ import annotations

import json
import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import __version__
from .cvc import features_for_click, source_statistics
from .errors import (
    DegenerateGeometryError,
    EmptyMaskError,
    GridMismatchError,
    InsufficientLandmarksError,
    InvalidArgumentError,
    LinguineError,
    NoTumourAtClickError,
)
from .forest import RandomForest
from .io import save_volume
from .landmarks import BoneLabelMap, Landmark, default_label_map, extract_landmarks
from .metrics import FP_MIN_DIAMETER_MM, count_false_positives, dice
from .registration import RigidTransform, register_landmarks
from .segmenter import (
    GUIDANCE_SIGMA,
    SNAP_DISTANCE_MM,
    Click,
    SegmenterBackend,
    binarize,
    make_backend,
    restrict_to_clicked,
    volume_digest,
)
from .study import ScanData, StudyManifest, load_scan
from .volume import STANDARD_SPACING, Volume, index_from_world, resample_like, resample_to_standard

log = logging.getLogger(__name__)

SourceInput = Union[Click, Volume]


@dataclass
class PipelineConfig:
    m_samples: int = 25
    n_clicks: int = 5
    cvc_threshold: float = 0.5
    seed: int = 0
    standard_spacing: tuple[float, float, float] = STANDARD_SPACING
    backend: str = "oracle"
    backend_command: str | None = None
    cvc_model_path: str | None = None
    use_cvc: bool = True
    lesion_band: tuple[float, float] = (40.0, 120.0)
    binarize_threshold: float = 0.5
    snap_distance_mm: float = SNAP_DISTANCE_MM
    guidance_sigma: float = GUIDANCE_SIGMA
    fp_min_diameter_mm: float = FP_MIN_DIAMETER_MM
    residual_warning_mm: float = 15.0
    label_map_path: str | None = None

    def __post_init__(self):
        self.standard_spacing = tuple(float(s) for s in self.standard_spacing)
        self.lesion_band = tuple(float(b) for b in self.lesion_band)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.n_clicks <= self.m_samples:
            raise InvalidArgumentError(f"need 1 <= n_clicks <= m_samples, got {self.n_clicks}, {self.m_samples}")
        if not 0.0 < self.cvc_threshold < 1.0:
            raise InvalidArgumentError(f"cvc_threshold must be in (0, 1), got {self.cvc_threshold}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise InvalidArgumentError(f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}")
        if len(self.standard_spacing) != 3 or any(s <= 0 for s in self.standard_spacing):
            raise InvalidArgumentError(f"standard_spacing must be 3 positive values, got {self.standard_spacing}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["standard_spacing"] = list(self.standard_spacing)
        d["lesion_band"] = list(self.lesion_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# individual steps
# ---------------------------------------------------------------------------


def _stable_seed(*parts) -> list[int]:
    out = []
    for p in parts:
        out.append(p if isinstance(p, int) else zlib.crc32(str(p).encode()))
    return out


def sample_clicks(mask: Volume, m: int, seed: int, scan_id: str = "", tumour_id: str = "") -> list[Click]:
    """Up to ``m`` distinct mask voxels drawn uniformly without replacement.

    Returned in canonical (C-order voxel index) order.
    """
    vox = np.argwhere(mask.data > 0)
    if len(vox) == 0:
        raise EmptyMaskError(f"cannot sample clicks from an empty mask ({scan_id}/{tumour_id})")
    if len(vox) <= m:
        chosen = np.arange(len(vox))
    else:
        rng = np.random.default_rng(np.random.SeedSequence(_stable_seed(seed, tumour_id)))
        chosen = np.sort(rng.choice(len(vox), size=m, replace=False))
    world = mask.world_coords(vox[chosen])
    return [Click(tuple(p), scan_id, tumour_id) for p in world]


def resolve_source_mask(scan: Volume, source: SourceInput, backend: SegmenterBackend,
                        threshold: float = 0.5, snap_mm: float = SNAP_DISTANCE_MM) -> Volume:
    """The source tumour mask: passed through, or segmented from a single click."""
    if isinstance(source, Volume):
        if not source.same_grid(scan):
            raise GridMismatchError("source mask is not on the source scan's grid")
        return source
    index_from_world(scan, source.position)
    prob = backend.guided(scan, [source])
    mask, _ = restrict_to_clicked(binarize(prob, threshold), [source], snap_mm)
    if not mask.data.any():
        raise NoTumourAtClickError(f"guided segmentation is empty at click {source.position}")
    return mask


def propagate_clicks(clicks: Sequence[Click], T: RigidTransform, dst: Volume, dst_scan_id: str = "") -> tuple[list[Click], int]:
    """Map clicks through ``T``; clicks landing outside ``dst`` are dropped.

    Returns the kept clicks and the number dropped.
    """
    kept = []
    dropped = 0
    for c in clicks:
        p = T.apply(c.position)
        if not dst.contains_world(p):
            dropped += 1
            continue
        kept.append(Click(tuple(p), dst_scan_id, c.tumour_id))
    if dropped:
        log.info("dropped %d of %d propagated clicks outside the destination grid", dropped, len(clicks))
    return kept, dropped


def filter_clicks(clicks: Sequence[Click], threshold: float, n: int) -> list[Click]:
    """Clicks with ``validity_prob > threshold``, best ``n`` first.

    Ties keep the input (canonical) order.
    """
    ranked = sorted(
        ((i, c) for i, c in enumerate(clicks) if c.validity_prob is not None and c.validity_prob > threshold),
        key=lambda ic: (-ic[1].validity_prob, ic[0]),
    )
    return [c for _, c in ranked[:n]]


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class PreparedScan:
    scan_id: str
    time_index: int
    image: Volume
    labels: Volume
    landmarks: list[Landmark]
    ground_truth: dict[str, Volume]


@dataclass
class PropagationResult:
    src_scan_id: str
    dst_scan_id: str
    tumour_id: str
    mask: Volume
    transform: RigidTransform
    clicks_sampled: int
    clicks_propagated: list[Click]
    clicks_used: list[Click]
    clicks_dropped: int
    fallback_unguided: bool
    tumour_absent: bool
    n_components: int
    warnings: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def report_row(self) -> dict:
        used = {id(c) for c in self.clicks_used}
        row = {
            "src": self.src_scan_id,
            "dst": self.dst_scan_id,
            "tumour_id": self.tumour_id,
            "transform": self.transform.to_dict(),
            "clicks_sampled": self.clicks_sampled,
            "clicks_dropped": self.clicks_dropped,
            "clicks": [
                {"pos_mm": [round(v, 6) for v in c.position], "validity_prob": c.validity_prob, "kept": id(c) in used}
                for c in self.clicks_propagated
            ],
            "fallback_unguided": self.fallback_unguided,
            "tumour_absent": self.tumour_absent,
            "n_components": self.n_components,
            "mask_voxels": int(np.count_nonzero(self.mask.data)),
            "warnings": list(self.warnings),
        }
        row.update(self.metrics)
        return row


class Linguine:
    """Pipeline state shared across pairs: config, backend, forest and caches."""

    def __init__(self, config: PipelineConfig | None = None, backend: SegmenterBackend | None = None,
                 forest: RandomForest | None = None, label_map: BoneLabelMap | None = None):
        self.config = config or PipelineConfig()
        self.backend = backend or make_backend(self.config.backend, self.config.backend_command,
                                               self.config.lesion_band)
        if forest is None and self.config.use_cvc:
            if self.config.cvc_model_path is None:
                raise InvalidArgumentError("a click-validity forest is required (or set use_cvc=False)")
            from .forest import load_forest

            forest = load_forest(self.config.cvc_model_path)
        self.forest = forest
        if label_map is None and self.config.label_map_path:
            label_map = BoneLabelMap.load(self.config.label_map_path)
        self.label_map = label_map or default_label_map()
        self._prepared: dict[tuple, PreparedScan] = {}
        self._unguided: dict[str, Volume] = {}
        self._lock = threading.Lock()

    # -- cached per-scan work -------------------------------------------------

    def prepare(self, scan: ScanData) -> PreparedScan:
        key = (scan.scan_id, volume_digest(scan.image), volume_digest(scan.labels))
        with self._lock:
            if key in self._prepared:
                return self._prepared[key]
        spacing = self.config.standard_spacing
        image = resample_to_standard(scan.image, spacing)
        labels = resample_to_standard(scan.labels, spacing)
        if not labels.same_grid(image):
            labels = resample_like(scan.labels, image)
        gt = {k: (m if m.same_grid(image) else resample_like(m, image)) for k, m in scan.ground_truth.items()}
        prepared = PreparedScan(scan.scan_id, scan.time_index, image, labels,
                                extract_landmarks(labels, self.label_map), gt)
        with self._lock:
            self._prepared[key] = prepared
        return prepared

    def unguided(self, image: Volume) -> Volume:
        key = volume_digest(image)
        with self._lock:
            if key in self._unguided:
                return self._unguided[key]
        prob = self.backend.unguided(image)
        with self._lock:
            self._unguided[key] = prob
        return prob

    def source_mask(self, src: PreparedScan, source: SourceInput) -> Volume:
        if isinstance(source, Volume) and not source.same_grid(src.image):
            source = resample_like(source, src.image)
        return resolve_source_mask(src.image, source, self.backend, self.config.binarize_threshold,
                                   self.config.snap_distance_mm)

    def register(self, src: PreparedScan, dst: PreparedScan) -> RigidTransform:
        try:
            return register_landmarks(src.landmarks, dst.landmarks)
        except (InsufficientLandmarksError, DegenerateGeometryError) as exc:
            raise type(exc)(f"registering {src.scan_id} -> {dst.scan_id}: {exc}") from exc

    # -- pairs and studies ----------------------------------------------------

    def run_pair(self, src_scan: ScanData, dst_scan: ScanData, source: SourceInput, tumour_id: str = "k0",
                 source_mask: Volume | None = None) -> PropagationResult:
        cfg = self.config
        src = self.prepare(src_scan)
        dst = self.prepare(dst_scan)
        T = self.register(src, dst)
        warnings = list(T.warnings)
        if T.rms_residual > cfg.residual_warning_mm:
            warnings.append(f"registration rms residual {T.rms_residual:.2f} mm exceeds {cfg.residual_warning_mm} mm")

        mask_src = source_mask if source_mask is not None else self.source_mask(src, source)
        sampled = sample_clicks(mask_src, cfg.m_samples, cfg.seed, src.scan_id, tumour_id)
        propagated, dropped = propagate_clicks(sampled, T, dst.image, dst.scan_id)

        dst_unguided = self.unguided(dst.image)
        if cfg.use_cvc:
            if propagated:
                stats = source_statistics(src.image, mask_src, self.unguided(src.image))
                feats = np.vstack([features_for_click(stats, dst.image, dst_unguided, c).as_array() for c in propagated])
                probs = np.atleast_1d(self.forest.predict_proba(feats))
                propagated = [c.with_prob(float(p)) for c, p in zip(propagated, probs)]
            used = filter_clicks(propagated, cfg.cvc_threshold, cfg.n_clicks)
        else:
            used = list(propagated[: cfg.n_clicks])

        if used:
            guided = binarize(self.backend.guided(dst.image, used), cfg.binarize_threshold)
            mask, n_comp = restrict_to_clicked(guided, used, cfg.snap_distance_mm)
            if n_comp > 1:
                warnings.append(f"surviving clicks selected {n_comp} components; merged into one mask")
            if n_comp == 0:
                warnings.append("guided segmentation produced no component at the surviving clicks")
            fallback = False
        else:
            mask = binarize(dst_unguided, cfg.binarize_threshold)
            n_comp = 0
            fallback = True

        metrics = {}
        gt = dst.ground_truth.get(tumour_id)
        if gt is not None:
            unguided_mask = binarize(dst_unguided, cfg.binarize_threshold)
            metrics = {
                "dice": dice(mask, gt),
                "dice_unguided": dice(unguided_mask, gt),
                "fp": count_false_positives(mask, gt, cfg.fp_min_diameter_mm),
                "fp_unguided": count_false_positives(unguided_mask, gt, cfg.fp_min_diameter_mm),
                "gt_voxels": int(np.count_nonzero(gt.data)),
            }

        return PropagationResult(
            src_scan_id=src.scan_id,
            dst_scan_id=dst.scan_id,
            tumour_id=tumour_id,
            mask=mask,
            transform=T,
            clicks_sampled=len(sampled),
            clicks_propagated=propagated,
            clicks_used=used,
            clicks_dropped=dropped,
            fallback_unguided=fallback,
            tumour_absent=fallback,
            n_components=n_comp,
            warnings=warnings,
            metrics=metrics,
        )

    def run_study(self, scans: Sequence[ScanData | Exception], source_scan_id: str,
                  sources: dict[str, SourceInput], jobs: int = 1) -> StudyResult:
        """Propagate every tumour in ``sources`` from the source scan to all others.

        ``scans`` may contain exceptions standing in for scans that failed to
        load; those pairs are recorded as failures.
        """
        by_id = {}
        for s in scans:
            if isinstance(s, ScanData):
                by_id[s.scan_id] = s
        if source_scan_id not in by_id:
            raise InvalidArgumentError(f"source scan {source_scan_id!r} is not available")
        src = by_id[source_scan_id]
        prepared_src = self.prepare(src)
        masks = {k: self.source_mask(prepared_src, v) for k, v in sorted(sources.items())}

        jobs_list = []
        for s in scans:
            if isinstance(s, ScanData) and s.scan_id == source_scan_id:
                continue
            for k in sorted(sources):
                jobs_list.append((s, k))

        def work(item):
            s, k = item
            if not isinstance(s, ScanData):
                return _failure(source_scan_id, getattr(s, "scan_id", "?"), k, s)
            try:
                return self.run_pair(src, s, sources[k], k, source_mask=masks[k])
            except (LinguineError, ValueError, OSError) as exc:
                log.error("pair %s -> %s (%s) failed: %s", source_scan_id, s.scan_id, k, exc)
                return _failure(source_scan_id, s.scan_id, k, exc)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(work, jobs_list))
        else:
            outcomes = [work(item) for item in jobs_list]
        results = [o for o in outcomes if isinstance(o, PropagationResult)]
        failures = [o for o in outcomes if isinstance(o, dict)]
        return StudyResult(source_scan_id, results, failures, masks)

    def run_manifest(self, manifest: StudyManifest, source_scan_id: str, sources: dict[str, SourceInput],
                     jobs: int = 1) -> StudyResult:
        manifest.entry(source_scan_id)
        scans: list = []
        for entry in manifest.scans:
            try:
                scans.append(load_scan(manifest, entry))
            except (LinguineError, ValueError, OSError) as exc:
                if entry.scan_id == source_scan_id:
                    raise
                log.error("could not load scan %s: %s", entry.scan_id, exc)
                exc.scan_id = entry.scan_id
                scans.append(exc)
        result = self.run_study(scans, source_scan_id, sources, jobs)
        result.patient_id = manifest.patient_id
        return result


def _failure(src: str, dst: str, tumour_id: str, exc: BaseException) -> dict:
    return {"src": src, "dst": dst, "tumour_id": tumour_id, "error_type": type(exc).__name__, "message": str(exc)}


@dataclass
class StudyResult:
    source_scan_id: str
    results: list[PropagationResult]
    failures: list[dict]
    source_masks: dict[str, Volume]
    patient_id: str = ""

    def by_scan(self) -> dict[str, list[PropagationResult]]:
        out: dict[str, list[PropagationResult]] = {}
        for r in self.results:
            out.setdefault(r.dst_scan_id, []).append(r)
        return out

    def summary(self) -> dict:
        out = {
            "n_pairs": len(self.results),
            "n_failures": len(self.failures),
            "n_fallback_unguided": sum(r.fallback_unguided for r in self.results),
        }
        scored = [r for r in self.results if "dice" in r.metrics]
        if scored:
            out["mean_dice"] = float(np.mean([r.metrics["dice"] for r in scored]))
            out["mean_dice_unguided"] = float(np.mean([r.metrics["dice_unguided"] for r in scored]))
            out["total_fp"] = int(sum(r.metrics["fp"] for r in scored))
            out["total_fp_unguided"] = int(sum(r.metrics["fp_unguided"] for r in scored))
        return out

    def report(self, config: PipelineConfig | None = None, mask_paths: dict | None = None) -> dict:
        pairs = []
        for r in self.results:
            row = r.report_row()
            if mask_paths and (r.dst_scan_id, r.tumour_id) in mask_paths:
                row["mask_path"] = mask_paths[(r.dst_scan_id, r.tumour_id)]
            pairs.append(row)
        return {
            "tool": "linguine",
            "version": __version__,
            "config": config.to_dict() if config else None,
            "patient_id": self.patient_id,
            "source_scan_id": self.source_scan_id,
            "pairs": pairs,
            "failures": self.failures,
            "summary": self.summary(),
        }

    def write(self, out_dir, config: PipelineConfig | None = None, run_config: dict | None = None) -> Path:
        """Write ``report.json`` and one NIfTI mask per result; returns the report path."""
        out = Path(out_dir)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        paths = {}
        for r in self.results:
            name = f"masks/{r.dst_scan_id}_{r.tumour_id}.nii.gz"
            save_volume(r.mask, out / name)
            paths[(r.dst_scan_id, r.tumour_id)] = name
        report = self.report(config, paths)
        if run_config is not None:
            report["run_config"] = run_config
        path = out / "report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# CVC training data
# ---------------------------------------------------------------------------


def collect_training_data(studies: Sequence[Sequence[ScanData]], config: PipelineConfig | None = None,
                          backend: SegmenterBackend | None = None) -> list[tuple]:
    """Label propagated clicks against destination ground truth.

    For every ordered scan pair of every study and every tumour with a
    non-empty source mask, sampled clicks are propagated with the landmark
    fit; a click is labelled 1 iff its voxel lies inside the destination
    tumour mask (absent masks count as empty).
    """
    config = config or PipelineConfig(use_cvc=False)
    runner = Linguine(PipelineConfig.from_dict({**config.to_dict(), "use_cvc": False}), backend)
    data = []
    for study in studies:
        prepared = [runner.prepare(s) for s in study]
        for src in prepared:
            for dst in prepared:
                if src is dst:
                    continue
                try:
                    T = runner.register(src, dst)
                except (InsufficientLandmarksError, DegenerateGeometryError) as exc:
                    log.warning("skipping pair for training: %s", exc)
                    continue
                for k, mask in sorted(src.ground_truth.items()):
                    if not mask.data.any():
                        continue
                    sampled = sample_clicks(mask, config.m_samples, config.seed, src.scan_id, k)
                    propagated, _ = propagate_clicks(sampled, T, dst.image, dst.scan_id)
                    if not propagated:
                        continue
                    stats = source_statistics(src.image, mask, runner.unguided(src.image))
                    dst_prob = runner.unguided(dst.image)
                    gt = dst.ground_truth.get(k)
                    for c in propagated:
                        f = features_for_click(stats, dst.image, dst_prob, c)
                        idx = index_from_world(dst.image, c.position)
                        label = int(gt is not None and gt.data[idx] > 0)
                        data.append((f, label))
    return data


def balance(dataset: Sequence[tuple], seed: int = 0) -> list[tuple]:
    """Subsample the majority class so both labels are equally frequent."""
    pos = [d for d in dataset if d[1] == 1]
    neg = [d for d in dataset if d[1] == 0]
    n = min(len(pos), len(neg))
    rng = np.random.default_rng(seed)
    pick = lambda rows: [rows[i] for i in sorted(rng.choice(len(rows), size=n, replace=False))]
    return pick(pos) + pick(neg)
