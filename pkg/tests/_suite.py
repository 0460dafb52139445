"""Phantom suites shared by the pipeline and acceptance tests."""

from __future__ import annotations

import functools

import numpy as np

from linguine.cvc import train
from linguine.errors import PhantomError
from linguine.forest import ForestConfig
from linguine.phantom import PhantomConfig, TumourSpec, generate_study
from linguine.pipeline import PipelineConfig, balance, collect_training_data

N_TIMEPOINTS = 4
TRAIN_SEEDS = range(1000, 1008)
HELDOUT_SEEDS = range(2000, 2006)


def suite_config(seed: int, distractors: int | None = None, disappear_at: int | None = None,
                 shrink=(0.6, 1.0)) -> PhantomConfig:
    """One random study: rigid body motion, a shrinking tumour and distractors.

    Scale factors start at 1 and decrease monotonically within ``shrink``;
    ``disappear_at`` zeroes the tumour from that time point on.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    later = np.sort(rng.uniform(*shrink, size=N_TIMEPOINTS - 1))[::-1]
    scales = [1.0] + [float(s) for s in later]
    if disappear_at is not None:
        scales = [0.0 if t >= disappear_at else s for t, s in enumerate(scales)]
    n_distractors = int(rng.integers(2, 5)) if distractors is None else distractors
    centre = (15.0 + rng.uniform(-4, 4), rng.uniform(-4, 4), 10.0 + rng.uniform(-4, 4))
    tumour = TumourSpec(center=centre, radius_mm=float(rng.uniform(9.0, 11.0)), scales=tuple(scales))
    return PhantomConfig(tumours=[tumour], distractor_count=n_distractors, seed=seed)


@functools.lru_cache(maxsize=None)
def suite_study(seed: int, distractors: int | None = None, disappear_at: int | None = None):
    for attempt in range(20):
        try:
            # later attempts re-draw the whole study, tumour placement included
            return generate_study(suite_config(seed + 10_000 * attempt, distractors, disappear_at))
        except PhantomError:
            pass
    raise RuntimeError(f"could not build suite study {seed}")


def training_studies(seeds=TRAIN_SEEDS):
    """Alternate plain shrinking studies with studies whose tumour vanishes."""
    out = []
    for i, s in enumerate(seeds):
        out.append(suite_study(s, disappear_at=(2 + i % 2) if i % 2 else None))
    return out


def click_dataset(seeds, seed: int = 0):
    studies = [st.scans for st in training_studies(seeds)]
    return balance(collect_training_data(studies, PipelineConfig(use_cvc=False)), seed=seed)


@functools.lru_cache(maxsize=None)
def training_data():
    return click_dataset(TRAIN_SEEDS)


def training_forest(config: ForestConfig | None = None):
    return train(training_data(), config or ForestConfig(seed=0))


def tumour_click(study, scan_id: str, tumour_id: str = "k0"):
    """World-space click at the tumour centre of ``scan_id``."""
    from linguine.segmenter import Click

    spec = next(t for t in study.config.tumours if t.tumour_id == tumour_id)
    t = study.scan(scan_id).time_index
    drift = spec.drift_mm[t] if spec.drift_mm else (0.0, 0.0, 0.0)
    body = np.asarray(spec.center) + np.asarray(drift)
    return Click(tuple(study.body_transforms[scan_id].apply(body)), scan_id, tumour_id)
