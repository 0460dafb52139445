"""
Command-line interface.

Exit codes: 0 success, 1 operation failure (a JSON error object is printed to
stderr), 2 usage error. Logs go to stderr; machine-readable output is only
ever written to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import InvalidArgumentError, LinguineError

log = logging.getLogger("linguine")


def _triple(text: str, cast=float) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _tagged(text: str, cast=float) -> tuple[str | None, tuple]:
    """``x,y,z`` or ``TUMOUR=x,y,z``."""
    tag, _, rest = text.rpartition("=")
    return (tag or None), _triple(rest, cast)


def _tagged_int(text: str):
    return _tagged(text, int)


def _mask_arg(text: str) -> tuple[str | None, str]:
    tag, sep, path = text.partition("=")
    return (tag, path) if sep else (None, text)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: not valid JSON: {exc}") from exc


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _pipeline_config(args):
    """Merge the JSON config file (if any) with command-line overrides."""
    from .pipeline import PipelineConfig

    base = _read_json(args.config) if getattr(args, "config", None) else {}
    base = dict(base.get("pipeline", base))
    overrides = {
        "seed": getattr(args, "seed", None),
        "backend": getattr(args, "backend", None),
        "backend_command": getattr(args, "backend_cmd", None),
        "cvc_model_path": getattr(args, "cvc", None),
        "m_samples": getattr(args, "m_samples", None),
        "n_clicks": getattr(args, "n_clicks", None),
        "cvc_threshold": getattr(args, "cvc_threshold", None),
        "label_map_path": getattr(args, "label_map", None),
    }
    if getattr(args, "no_cvc", False):
        overrides["use_cvc"] = False
    base.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(base)


def _source_inputs(args, manifest, src_entry, linguine) -> dict:
    from .io import load_volume
    from .segmenter import Click
    from .study import load_scan
    from .volume import world_from_index

    sources: dict = {}

    def tag(t):
        return t or f"k{len(sources)}"

    for t, xyz in args.click or []:
        sources[tag(t)] = Click(xyz, src_entry.scan_id)
    if args.click_voxel:
        scan = load_scan(manifest, src_entry).image
        for t, ijk in args.click_voxel:
            sources[tag(t)] = Click(tuple(world_from_index(scan, ijk)), src_entry.scan_id)
    for t, path in args.mask or []:
        sources[tag(t)] = load_volume(path)
    if not sources:
        raise InvalidArgumentError("give at least one --click, --click-voxel or --mask for the source scan")
    return sources


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; command-line flags override it")
    p.add_argument("--seed", type=int, help="seed for click sampling")
    p.add_argument("--backend", choices=["oracle", "external"], help="segmenter backend")
    p.add_argument("--backend-cmd", help="command for the external backend")
    p.add_argument("--cvc", help="trained click-validity forest (JSON)")
    p.add_argument("--no-cvc", action="store_true", help="skip click filtering; use the first n clicks")
    p.add_argument("--m-samples", type=int, help="clicks sampled from the source mask (default 25)")
    p.add_argument("--n-clicks", type=int, help="maximum clicks passed to the segmenter (default 5)")
    p.add_argument("--cvc-threshold", type=float, help="minimum validity probability (default 0.5)")
    p.add_argument("--label-map", help="bone label map JSON (default: built-in map)")


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="study manifest JSON")
    p.add_argument("--source", required=True, help="scan id of the annotated source scan")
    p.add_argument("--click", action="append", type=_tagged, metavar="[ID=]X,Y,Z",
                   help="source click in world mm; repeat for several tumours")
    p.add_argument("--click-voxel", action="append", type=_tagged_int, metavar="[ID=]I,J,K",
                   help="source click as a voxel index of the source scan")
    p.add_argument("--mask", action="append", type=_mask_arg, metavar="[ID=]PATH",
                   help="source tumour mask volume instead of a click")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_phantom(args) -> None:
    from .phantom import PhantomConfig, generate_study, write_study

    cfg = PhantomConfig.from_dict(_read_json(args.config)) if args.config else PhantomConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    study = generate_study(cfg)
    path = write_study(study, args.out, args.format)
    log.info("wrote %d scans and %s", len(study.scans), path)


def cmd_landmarks(args) -> None:
    from .io import load_volume
    from .landmarks import BoneLabelMap, compute_landmarks, default_label_map, save_landmarks, visibility_filter
    from .volume import resample_to_standard

    labels = load_volume(args.labels)
    if not args.keep_spacing:
        labels = resample_to_standard(labels, args.standard_spacing)
    label_map = BoneLabelMap.load(args.label_map) if args.label_map else default_label_map()
    lms = compute_landmarks(labels, label_map)
    if not args.no_visibility_filter:
        lms = visibility_filter(labels, lms, label_map)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_landmarks(lms, args.out)
    log.info("wrote %d landmarks to %s", len(lms), args.out)


def cmd_register(args) -> None:
    from .landmarks import load_landmarks
    from .registration import register_landmarks

    T = register_landmarks(load_landmarks(args.src), load_landmarks(args.dst))
    _write_json(args.out, T.to_dict())
    log.info("rms residual %.3f mm over %d pairs", T.rms_residual, T.n_pairs)


def _run(args, only_dest: str | None):
    from .pipeline import Linguine
    from .study import load_manifest

    config = _pipeline_config(args)
    manifest = load_manifest(args.manifest)
    src_entry = manifest.entry(args.source)
    runner = Linguine(config)
    sources = _source_inputs(args, manifest, src_entry, runner)
    if only_dest is not None:
        manifest.entry(only_dest)
        from .study import StudyManifest

        keep = tuple(e for e in manifest.scans if e.scan_id in (args.source, only_dest))
        manifest = StudyManifest(manifest.patient_id, keep, manifest.base_dir)
    result = runner.run_manifest(manifest, args.source, sources, jobs=getattr(args, "jobs", 1))
    run_config = {
        "command": args.command,
        "manifest": str(args.manifest),
        "source": args.source,
        "dest": only_dest,
        "sources": {k: (list(v.position) if hasattr(v, "position") else "mask") for k, v in sources.items()},
        "jobs": getattr(args, "jobs", 1),
    }
    path = result.write(args.out, config, run_config)
    log.info("wrote %s (%d results, %d failures)", path, len(result.results), len(result.failures))
    if only_dest is not None and result.failures:
        f = result.failures[0]
        raise LinguineError(f"{f['error_type']}: {f['message']}")
    return result


def cmd_propagate(args) -> None:
    _run(args, args.dest)


def cmd_run_study(args) -> None:
    _run(args, None)


def cmd_train_cvc(args) -> None:
    from . import cvc
    from .forest import ForestConfig, save_forest

    data = []
    for path in args.data or []:
        data.extend(cvc.load_training_set(path))
    if args.manifest:
        from .pipeline import collect_training_data
        from .study import load_manifest, load_scan

        config = _pipeline_config(args)
        studies = []
        for m in args.manifest:
            manifest = load_manifest(m)
            studies.append([load_scan(manifest, e) for e in manifest.scans])
        data.extend(collect_training_data(studies, config))
    if not data:
        raise InvalidArgumentError("no training data: give --data and/or --manifest")
    if args.dump_data:
        cvc.save_training_set(data, args.dump_data)
    fc = ForestConfig(
        n_trees=args.n_trees, max_depth=args.max_depth, min_leaf=args.min_leaf,
        features_per_split=args.features_per_split, seed=args.seed if args.seed is not None else 0,
    )
    forest = cvc.train(data, fc)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_forest(forest, args.out)
    log.info("trained %d trees on %d clicks (%d valid)", fc.n_trees, len(data), sum(l for _, l in data))


def cmd_eval(args) -> None:
    from .metrics import EvalRow, write_eval

    rows = []
    probs, kept = [], []
    threshold = 0.5
    for path in args.report:
        report = _read_json(path)
        if "pairs" not in report:
            raise InvalidArgumentError(f"{path}: not a study report (missing 'pairs')")
        threshold = (report.get("config") or {}).get("cvc_threshold", threshold)
        patient = report.get("patient_id", "")
        for pair in report["pairs"]:
            scan = f"{patient}/{pair['dst']}" if patient else pair["dst"]
            for c in pair.get("clicks", []):
                if c.get("validity_prob") is not None:
                    probs.append(c["validity_prob"])
                    kept.append(c["kept"])
            if "dice" not in pair:
                continue
            rows.append(EvalRow(scan, pair["tumour_id"], pair["dice"], pair["fp"], "linguine"))
            rows.append(EvalRow(scan, pair["tumour_id"], pair["dice_unguided"], pair["fp_unguided"], "unguided"))
    if not rows:
        raise InvalidArgumentError("no report rows carry ground-truth metrics")
    summary = write_eval(rows, args.out)
    if not args.no_figures:
        from .plotting import plot_click_probabilities, plot_eval

        plot_eval(rows, Path(args.out) / "eval_dice.png")
        if probs:
            plot_click_probabilities(probs, kept, threshold, Path(args.out) / "click_validity.png")
    log.info("evaluated %d rows: %s", len(rows), json.dumps(summary["methods"]))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linguine", description="Longitudinal guidance propagation for tumour segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-phantom", help="generate a synthetic longitudinal study")
    p.add_argument("--config", help="phantom config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--format", choices=["nifti", "raw"], default="nifti", help="volume file format")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("landmarks", help="compute skeletal landmarks from a bone label volume")
    p.add_argument("--labels", required=True, help="bone label volume")
    p.add_argument("--label-map", help="bone label map JSON (default: built-in map)")
    p.add_argument("--out", default="landmarks.json", help="output landmark JSON")
    p.add_argument("--standard-spacing", type=_triple, default=(1.5, 1.5, 2.0), metavar="SX,SY,SZ",
                   help="resampling spacing in mm (default 1.5,1.5,2.0)")
    p.add_argument("--keep-spacing", action="store_true", help="do not resample before extraction")
    p.add_argument("--no-visibility-filter", action="store_true", help="keep landmarks of cut bones")
    p.set_defaults(func=cmd_landmarks)

    p = sub.add_parser("register", help="fit a rigid transform between two landmark files")
    p.add_argument("--src", required=True, help="source landmark JSON")
    p.add_argument("--dst", required=True, help="destination landmark JSON")
    p.add_argument("--out", default="transform.json", help="output transform JSON")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("propagate", help="segment one destination scan from an annotated source scan")
    _add_source_flags(p)
    p.add_argument("--dest", required=True, help="destination scan id")
    p.add_argument("--out", default="linguine_out", help="output directory for report and masks")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("run-study", help="segment every scan of a study from one annotated scan")
    _add_source_flags(p)
    p.add_argument("--out", default="linguine_out", help="output directory for report and masks")
    p.add_argument("--jobs", type=int, default=1, help="destination scans processed in parallel")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser("train-cvc", help="train the click-validity forest")
    p.add_argument("--manifest", action="append", help="study manifest with ground-truth masks (repeatable)")
    p.add_argument("--data", action="append", help="training set as JSON lines (repeatable)")
    p.add_argument("--out", default="forest.json", help="output forest JSON")
    p.add_argument("--dump-data", help="also write the assembled training set as JSON lines")
    p.add_argument("--config", help="JSON run configuration for click sampling")
    p.add_argument("--seed", type=int, help="forest seed (also used for click sampling)")
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--min-leaf", type=int, default=2)
    p.add_argument("--features-per-split", type=int, default=3)
    p.set_defaults(func=cmd_train_cvc)

    p = sub.add_parser("eval", help="tabulate Dice / false positives from study reports")
    p.add_argument("--report", action="append", required=True, help="study report JSON (repeatable)")
    p.add_argument("--out", default="eval_out", help="output directory for eval.csv, eval.json and figures")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (LinguineError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
