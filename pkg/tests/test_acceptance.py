"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (printed at the end of the session and
immediately with ``-s``) before asserting.
"""

import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from linguine import segmenter, volume
from linguine.forest import ForestConfig, RandomForest, Tree
from linguine.landmarks import default_label_map, extract_landmarks
from linguine.metrics import FP_MIN_DIAMETER_MM, roc_auc
from linguine.pipeline import Linguine, PipelineConfig
from linguine.registration import fit_rigid, rotation_error_deg
from linguine.segmenter import OracleSegmenter, binarize
from linguine.volume import Volume

import conftest
from _suite import HELDOUT_SEEDS, click_dataset, suite_study, training_data, tumour_click

SUITE_SEEDS = range(3000, 3020)
DISAPPEAR_SEEDS = range(4000, 4020)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


def random_rigid(rng, max_deg=15.0, max_t=50.0):
    axis = rng.normal(size=3)
    R = Rotation.from_rotvec(axis / np.linalg.norm(axis) * np.radians(rng.uniform(0, max_deg))).as_matrix()
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0, max_t)
    return R, t


# 1 -------------------------------------------------------------------------------------------


def test_1_registration_recovery():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_deg = worst_mm = worst_clean = 0.0
    for _ in range(200):
        R, t = random_rigid(rng)
        P = rng.uniform(-100, 100, size=(int(rng.integers(20, 47)), 3))
        Q = P @ R.T + t
        clean = fit_rigid(P, Q)
        worst_clean = max(worst_clean, np.abs(clean.R - R).max(), np.abs(clean.t - t).max())
        T = fit_rigid(P, Q + rng.normal(0, 1.0, size=Q.shape))
        worst_deg = max(worst_deg, rotation_error_deg(T.R, R))
        worst_mm = max(worst_mm, float(np.linalg.norm(T.t - t)))
    elapsed = time.perf_counter() - start
    ok = worst_deg <= 2.0 and worst_mm <= 3.0 and worst_clean <= 1e-6 and elapsed < 5.0
    record(1, ok, f"worst {worst_deg:.3f} deg, {worst_mm:.3f} mm; noise-free {worst_clean:.1e}; {elapsed:.2f}s")
    assert ok


# 2 -------------------------------------------------------------------------------------------


def sse(R, t, P, Q):
    return float(((P @ R.T + t - Q) ** 2).sum())


def test_2_optimality_against_brute_force():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    failures = 0
    margin = np.inf
    for _ in range(50):
        P = rng.uniform(-100, 100, size=(int(rng.integers(4, 6)), 3))
        R0, t0 = random_rigid(rng, 180.0, 50.0)
        Q = P @ R0.T + t0 + rng.normal(0, 5.0, size=P.shape)
        T = fit_rigid(P, Q)
        fitted = sse(T.R, T.t, P, Q)
        Rs = Rotation.random(1000, random_state=rng).as_matrix()
        ts = rng.uniform(-150, 150, size=(1000, 3))
        # give each random rotation its best translation too, which makes the oracle stronger
        best = min(min(sse(R, t, P, Q), sse(R, Q.mean(0) - P.mean(0) @ R.T, P, Q)) for R, t in zip(Rs, ts))
        failures += fitted > best + 1e-9
        margin = min(margin, best - fitted)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 10.0
    record(2, ok, f"{failures}/50 beaten by brute force; smallest margin {margin:.3g} mm^2; {elapsed:.2f}s")
    assert ok


# 3 -------------------------------------------------------------------------------------------


def test_3_landmark_completeness(identity_study):
    labels = identity_study.scans[0].labels
    full = extract_landmarks(labels)
    lmap = default_label_map()
    rib12 = {lmap.label_of("RIB_LATERAL_L_12"), lmap.label_of("RIB_LATERAL_R_12")}
    xs = np.nonzero(np.isin(labels.data, [v for v in np.unique(labels.data) if v and v not in rib12]))[0]
    lo, hi = int(xs.min()) - 1, int(xs.max()) + 2
    origin = (labels.origin[0] + lo * labels.spacing[0],) + tuple(labels.origin[1:])
    cropped = extract_landmarks(Volume(labels.data[lo:hi], labels.spacing, origin, labels.kind))
    ok = len(full) == 46 and len(full) - len(cropped) == 2
    record(3, ok, f"{len(full)} landmarks, {len(cropped)} after cropping rib pair 12")
    assert ok


# 4, 5, 10: the phantom suite -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def suite():
    return [suite_study(s) for s in SUITE_SEEDS]


@pytest.fixture(scope="module")
def suite_results(suite, trained_forest):
    runner = Linguine(PipelineConfig(), forest=trained_forest)
    start = time.perf_counter()
    results = []
    for study in suite:
        res = runner.run_study(study.scans, "t0", {"k0": tumour_click(study, "t0")})
        assert not res.failures
        results.extend(res.results)
    return results, time.perf_counter() - start


def test_4_dice_uplift(suite_results):
    results, elapsed = suite_results
    ours = float(np.mean([r.metrics["dice"] for r in results]))
    unguided = float(np.mean([r.metrics["dice_unguided"] for r in results]))
    ok = ours > unguided and ours >= 1.2 * unguided and elapsed < 120.0
    record(4, ok, f"mean Dice {ours:.3f} vs unguided {unguided:.3f} "
                  f"({100 * (ours / unguided - 1):.0f}% relative) over {len(results)} pairs; {elapsed:.1f}s")
    assert ok


def test_5_false_positive_reduction(suite_results):
    results, _ = suite_results
    ours = sum(r.metrics["fp"] for r in results)
    unguided = sum(r.metrics["fp_unguided"] for r in results)
    ok = unguided > 0 and ours <= 0.2 * unguided
    record(5, ok, f"{ours} false positives vs {unguided} unguided")
    assert ok


def test_10_unguided_equivalence(suite):
    zero = Tree(feature=[-1], threshold=[0.0], left=[-1], right=[-1], value=[0.0], n_samples=[1], impurity=[0.0])
    runner = Linguine(PipelineConfig(), forest=RandomForest([zero], ForestConfig(n_trees=1), 9))
    oracle = OracleSegmenter()
    pairs = identical = 0
    for study in suite:
        for src in study.scans:
            res = runner.run_study(study.scans, src.scan_id, {"k0": tumour_click(study, src.scan_id)})
            for r in res.results:
                expected = binarize(oracle.unguided(study.scan(r.dst_scan_id).image))
                pairs += 1
                identical += r.fallback_unguided and r.mask.data.tobytes() == expected.data.tobytes()
    ok = identical == pairs > 0
    record(10, ok, f"{identical}/{pairs} pairs bit-identical to binarized unguided output")
    assert ok


# 6 -------------------------------------------------------------------------------------------


def test_6_disappearing_lesions(trained_forest):
    runner = Linguine(PipelineConfig(), forest=trained_forest)
    vanished = absent = 0
    for i, seed in enumerate(DISAPPEAR_SEEDS):
        study = suite_study(seed, distractors=0, disappear_at=2 + i % 2)
        res = runner.run_study(study.scans, "t0", {"k0": tumour_click(study, "t0")})
        for r in res.results:
            if not study.scan(r.dst_scan_id).ground_truth["k0"].data.any():
                vanished += 1
                absent += r.tumour_absent and not r.mask.data.any()
    ok = vanished > 0 and absent >= 0.5 * vanished
    record(6, ok, f"{absent}/{vanished} disappeared-tumour scans flagged absent with an empty mask")
    assert ok


# 7 -------------------------------------------------------------------------------------------


def test_7_time_point_agnosticity(suite, trained_forest):
    runner = Linguine(PipelineConfig(), forest=trained_forest)
    spreads = []
    complete = True
    for study in suite:
        ids = [s.scan_id for s in study.scans]
        means = []
        for src in (ids[0], ids[len(ids) // 2], ids[-1]):
            res = runner.run_study(study.scans, src, {"k0": tumour_click(study, src)})
            complete &= sorted(res.by_scan()) == sorted(set(ids) - {src})
            means.append(np.mean([r.metrics["dice"] for r in res.results]))
        spreads.append(max(means) - min(means))
    ok = complete and max(spreads) <= 0.1
    record(7, ok, f"worst per-study spread {max(spreads):.4f} over {len(spreads)} studies; "
                  f"all other scans covered: {complete}")
    assert ok


# 8 -------------------------------------------------------------------------------------------


def test_8_cvc_sanity(trained_forest):
    held = click_dataset(HELDOUT_SEEDS)
    X = np.array([f.as_array() for f, _ in held])
    y = np.array([label for _, label in held])
    auc = roc_auc(trained_forest.predict_proba(X), y)
    from _suite import training_forest

    again = training_forest()
    same = again.dumps() == trained_forest.dumps()
    balanced = 2 * int(y.sum()) == len(y)
    ok = len(held) >= 500 and balanced and auc >= 0.9 and same
    record(8, ok, f"AUC {auc:.4f} on {len(held)} held-out clicks (balanced: {balanced}); "
                  f"retrain byte-identical: {same}; trained on {len(training_data())}")
    assert ok


# 9 -------------------------------------------------------------------------------------------


def test_9_config_snapshot():
    cfg = PipelineConfig()
    snapshot = {
        "m_samples": cfg.m_samples,
        "n_clicks": cfg.n_clicks,
        "cvc_threshold": cfg.cvc_threshold,
        "standard_spacing": cfg.standard_spacing,
        "guidance_sigma": cfg.guidance_sigma,
        "fp_min_diameter_mm": cfg.fp_min_diameter_mm,
    }
    expected = {
        "m_samples": 25,
        "n_clicks": 5,
        "cvc_threshold": 0.5,
        "standard_spacing": (1.5, 1.5, 2.0),
        "guidance_sigma": 2.0,
        "fp_min_diameter_mm": 10.0,
    }
    module_defaults = (volume.STANDARD_SPACING == (1.5, 1.5, 2.0) and segmenter.GUIDANCE_SIGMA == 2.0
                       and FP_MIN_DIAMETER_MM == 10.0)
    ok = snapshot == expected and module_defaults
    record(9, ok, ", ".join(f"{k}={v}" for k, v in snapshot.items()))
    assert ok
