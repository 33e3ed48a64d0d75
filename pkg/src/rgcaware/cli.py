"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 a stage failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .engine.network import load_network
from .grading import SvmModel, ThresholdGrader, svm_predict, threshold_grade
from .preprocess import TracingError, extract_retina_full
from .profiles import ProfileError, grade_features, read_features, thickness, write_features, write_profile
from .scan import FormatError, GradeLabel, LayerMask, read_mask, read_scan, write_boundaries, write_mask, write_scan
from .augment import enforce_layer_order
from .train import predict

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("rgcaware")


def _config(args) -> P.RunConfig:
    return P.load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. train.epochs=5 (repeatable)")


def cmd_synth(args) -> int:
    path = P.write_synthetic_dataset(args.out, args.n, args.seed, args.scale, args.noise, args.clinicians)
    print(path)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    if args.tau is not None or args.sigma is not None:
        cfg = dataclasses.replace(cfg, preprocess=dataclasses.replace(
            cfg.preprocess,
            tau_px=cfg.preprocess.tau_px if args.tau is None else args.tau,
            smoothing_sigma=cfg.preprocess.smoothing_sigma if args.sigma is None else args.sigma))
        cfg.validate()
    args.out.mkdir(parents=True, exist_ok=True)
    for sp in args.scans:
        scan = read_scan(sp, cfg.axial_scale_um_per_px)
        ex = extract_retina_full(scan, cfg.preprocess)
        write_scan(ex.retina, args.out / f"{sp.stem}.png")
        write_mask(LayerMask(ex.mask), args.out / f"{sp.stem}_mask.png")
        write_boundaries(ex.boundaries(), args.out / f"{sp.stem}_boundaries.csv")
        log.info("%s: coherent component %s", sp, ex.component)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    m = P.load_manifest(args.manifest)
    tr, te = m.split(cfg.seed, cfg.train.stratified)
    args.out.mkdir(parents=True, exist_ok=True)
    P.stage_preprocess(m, cfg, args.out)
    P.stage_train(m, cfg, args.out, tr)
    if cfg.grading.method == "svm":
        P.fit_grader(m, cfg, tr).save(args.out / "svm.json")
    print(args.out / "model.rgcn")
    return EXIT_OK


def cmd_segment(args) -> int:
    net, _ = load_network(args.model)
    args.out.mkdir(parents=True, exist_ok=True)
    scans = [read_scan(p) for p in args.scans]
    labels, probs = predict(net, [s.pixels for s in scans])
    screen = {}
    for p, lab, pr in zip(args.scans, labels, probs):
        write_mask(LayerMask(enforce_layer_order(lab)), args.out / f"{p.stem}.png")
        screen[p.stem] = float(pr)
    (args.out / "screening.json").write_text(json.dumps(screen, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_profile(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    for mp in args.masks:
        scale = args.scale
        if scale is None:
            scale = read_scan(args.scan_dir / f"{mp.stem}.png").axial_scale_um_per_px if args.scan_dir else None
        if scale is None:
            raise ValueError("give --scale or --scan-dir so the axial pixel scale is known")
        prof = thickness(read_mask(mp), scale)
        write_profile(prof, args.out / f"{mp.stem}.csv")
        write_features(grade_features(prof), args.out / f"{mp.stem}.json")
    return EXIT_OK


def cmd_grade(args) -> int:
    out = {}
    if args.fit:
        cfg = _config(args)
        m = P.load_manifest(args.fit)
        tr, _ = m.split(cfg.seed, cfg.train.stratified)
        model = P.fit_grader(m, cfg, tr)
        model.save(args.model)
        print(args.model)
    for fp in args.features:
        f = read_features(fp)
        if args.threshold is not None:
            out[fp.stem] = {"grade": threshold_grade(f, ThresholdGrader(args.threshold)).value}
        else:
            g, margin = svm_predict(SvmModel.load(args.model), f)
            out[fp.stem] = {"grade": g.value, "margin": margin}
    if out:
        print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = P.load_config(args.run / "config.json") if (args.run / "config.json").exists() else _config(args)
    report = P.evaluate_run(P.load_manifest(args.manifest), cfg, args.run)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    report = P.pipeline_run(P.load_manifest(args.manifest), cfg, args.out, args.model)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_agreement(args) -> int:
    m = P.load_manifest(args.manifest)
    preds = json.loads(Path(args.predictions).read_text())
    grades = {k: (v["grade"] if isinstance(v, dict) else v) for k, v in preds.items()}
    grades = {k: (None if v is None else GradeLabel.parse(v)) for k, v in grades.items()}
    rows = P.clinician_agreement(m, grades)
    if args.csv:
        P.write_agreement_csv(rows, args.csv)
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgcaware", description="RGC-aware glaucoma analysis on OCT B-scans")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scan cohort with masks and a manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=3.0, help="axial scale, um per pixel")
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--clinicians", type=int, default=4, choices=range(0, 5))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="extract the retina from scans")
    p.add_argument("scans", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tau", type=int, help="boundary distance gate in rows")
    p.add_argument("--sigma", type=float, help="structure-tensor smoothing sigma in px")
    _add_config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the network (and SVM grader) on a manifest's training split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment preprocessed scans and screen them")
    p.add_argument("scans", nargs="+", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("profile", help="thickness profiles and mean features from layer masks")
    p.add_argument("masks", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scale", type=float, help="axial scale, um per pixel")
    p.add_argument("--scan-dir", type=Path, help="read the scale from scans with matching names")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("grade", help="grade glaucoma severity from feature files")
    p.add_argument("--features", nargs="+", type=Path, default=[])
    p.add_argument("--model", type=Path, default=Path("svm.json"), help="SVM model to read (or write with --fit)")
    p.add_argument("--fit", type=Path, metavar="MANIFEST", help="fit the SVM on this manifest's training split")
    p.add_argument("--threshold", type=float, help="use the RNFL threshold grader instead (um)")
    _add_config_args(p)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("evaluate", help="recompute the metric report from a run directory")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--run", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="run the whole pipeline and write the metric report")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", type=Path, help="use a trained network instead of training one")
    _add_config_args(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("agreement", help="Pearson agreement between predictions and clinician grades")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_agreement)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (P.StageError, TracingError, ProfileError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, FormatError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
