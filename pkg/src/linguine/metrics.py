"""Dice, the >10 mm false-positive rule, paired t statistics and summaries."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import GridMismatchError, InvalidArgumentError
from .segmenter import connected_components
from .volume import Volume

FP_MIN_DIAMETER_MM = 10.0


@dataclass(frozen=True)
class EvalRow:
    scan_id: str
    tumour_id: str
    dice: float
    fp_count: int
    method: str


def _check_grid(a: Volume, b: Volume) -> None:
    if not a.same_grid(b):
        raise GridMismatchError(f"masks are on different grids: {a.dims}/{a.spacing}/{a.origin} vs "
                                f"{b.dims}/{b.spacing}/{b.origin}")


def dice(a: Volume, b: Volume) -> float:
    """``2|A∩B| / (|A|+|B|)``; two empty masks score 1.0."""
    _check_grid(a, b)
    A = a.data > 0
    B = b.data > 0
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def count_false_positives(pred: Volume, gt: Volume, min_diameter_mm: float = FP_MIN_DIAMETER_MM) -> int:
    """Predicted components wider than ``min_diameter_mm`` that miss ``gt`` entirely.

    Width is the largest axis-aligned bounding-box extent in millimetres.
    """
    _check_grid(pred, gt)
    truth = gt.data > 0
    count = 0
    for comp in connected_components(pred):
        if comp.max_extent_mm <= min_diameter_mm:
            continue
        if not truth[tuple(comp.voxels.T)].any():
            count += 1
    return count


def paired_t_statistic(x, y) -> tuple[float, int]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgumentError(f"paired samples need equal 1-D lengths, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise InvalidArgumentError("paired t statistic needs at least 2 pairs")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0:
        raise InvalidArgumentError("differences have zero variance")
    return float(d.mean() / (sd / math.sqrt(n))), n - 1


def mean_and_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum identity (ties count half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise InvalidArgumentError("AUC needs both positive and negative samples")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def summarize(rows: list[EvalRow]) -> dict:
    """Per-method mean Dice with standard error, FP totals and, when two
    methods share rows, the paired t statistic between them."""
    methods = sorted({r.method for r in rows})
    summary: dict = {"methods": {}}
    for m in methods:
        sel = [r for r in rows if r.method == m]
        mean, se = mean_and_se([r.dice for r in sel])
        summary["methods"][m] = {"n": len(sel), "mean_dice": mean, "se_dice": se,
                                 "total_fp": int(sum(r.fp_count for r in sel))}
    if "linguine" in methods and "unguided" in methods:
        a = {(r.scan_id, r.tumour_id): r.dice for r in rows if r.method == "linguine"}
        b = {(r.scan_id, r.tumour_id): r.dice for r in rows if r.method == "unguided"}
        keys = sorted(set(a) & set(b))
        ours = summary["methods"]["linguine"]["mean_dice"]
        base = summary["methods"]["unguided"]["mean_dice"]
        summary["relative_improvement"] = (ours - base) / base if base else None
        try:
            t, df = paired_t_statistic([a[k] for k in keys], [b[k] for k in keys])
            summary["paired_t"] = {"t": t, "df": df}
        except InvalidArgumentError as exc:
            summary["paired_t"] = {"error": str(exc)}
    return summary


def write_eval(rows: list[EvalRow], out_dir) -> dict:
    """Write ``eval.csv`` and ``eval.json`` (rows plus summary); returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scan_id", "tumour_id", "method", "dice", "fp_count"])
        writer.writeheader()
        for r in rows:
            writer.writerow({"scan_id": r.scan_id, "tumour_id": r.tumour_id, "method": r.method,
                             "dice": f"{r.dice:.6f}", "fp_count": r.fp_count})
    summary = summarize(rows)
    (out / "eval.json").write_text(json.dumps({"rows": [asdict(r) for r in rows], "summary": summary},
                                              indent=2, sort_keys=True) + "\n")
    return summary
