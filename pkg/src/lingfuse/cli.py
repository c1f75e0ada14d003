"""Command-line entry point: ``lingfuse <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import calibration, features, gradcheck, pipeline
from .errors import LingfuseError, ValidationError

log = logging.getLogger("lingfuse")


def _add_experiment_flags(p):
    p.add_argument("--config", required=True, help="experiment JSON config")
    p.add_argument("--seed", type=int, help="overrides both split and training seeds")
    p.add_argument("--alpha", type=float, help="label-smoothing parameter")
    p.add_argument("--beta", type=float, help="fusion displacement cap")
    p.add_argument("--bins", type=int, help="ECE bins M")
    p.add_argument("--ranges", type=int, help="ACE ranges R")
    p.add_argument("--dict", dest="dictionary", help="category dictionary file")
    p.add_argument("--features", help="dense-vector or topic-matrix CSV")
    p.add_argument("--out", help="output directory")


def _experiment_config(args, force_mode=None) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig.load(args.config)
    changes = {}
    for key in ("alpha", "beta", "dictionary", "features", "out"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    if args.seed is not None:
        changes["train"] = replace(cfg.train, seed=args.seed)
        changes["split"] = replace(cfg.split, seed=args.seed)
    if args.bins is not None or args.ranges is not None:
        changes["calibration"] = calibration.CalibrationConfig(
            args.bins if args.bins is not None else cfg.calibration.num_bins,
            args.ranges if args.ranges is not None else cfg.calibration.num_ranges,
        )
    if force_mode is not None:
        changes["split"] = replace(changes.get("split", cfg.split), mode=force_mode)
    return replace(cfg, **changes) if changes else cfg


def cmd_train(args, force_mode=None):
    cfg = _experiment_config(args, force_mode)
    report = pipeline.run_experiment(cfg)
    summary = {"mean": report["mean"], "out": cfg.out}
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_crossval(args):
    cmd_train(args, force_mode="stratified-5-fold")


def cmd_features(args):
    corpus = pipeline.load_corpus(args.corpus)
    if args.kind in ("lexicon", "dictionary"):
        d = features.load_dictionary(args.dictionary) if args.dictionary else features.demo_dictionary()
        matrix, names = features.lexicon_matrix(corpus.texts, d), list(d.categories)
        if args.normalize:
            matrix = features.normalize_sum_to_one(matrix)
    elif args.kind == "goss":
        if not args.features:
            raise ValidationError("--features (topic-matrix CSV) is required for goss")
        topics = features.load_topic_matrix(args.features, corpus.ids)
        matrix, names = features.goss(topics), [f"goss{j}" for j in range(topics.shape[1])]
    else:
        if not args.features:
            raise ValidationError("--features (dense-vector CSV) is required for dense")
        matrix = features.load_dense_features(args.features, corpus.ids)
        names = [f"f{j}" for j in range(matrix.shape[1])]
    features.write_matrix_csv(args.out, corpus.ids, matrix, "f")
    Path(str(args.out) + ".columns.json").write_text(json.dumps(names, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} {args.kind} features to {args.out}")


def cmd_calibrate(args):
    _, preds = calibration.read_predictions_csv(args.predictions)
    cfg = calibration.CalibrationConfig(args.bins, args.ranges)
    summary = calibration.summary(preds, cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        calibration.write_reliability_csv(out / "reliability.csv", calibration.reliability_table(preds, cfg))
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_analyze(args):
    corpus = pipeline.load_corpus(args.corpus)
    d = features.load_dictionary(args.dictionary) if args.dictionary else features.demo_dictionary()
    report = pipeline.run_linguistic_analysis(corpus, d, args.q, args.out)
    for row in report.rows:
        flag = "*" if row.significant else " "
        print(f"{flag} {row.direction:15s} {row.feature:20s} r={row.r_pb:+.4f} p={row.p_value:.3g}")
    for name in report.undefined:
        print(f"  {'undefined':15s} {name}")


def cmd_gradcheck(args):
    tol = args.tolerance if args.tolerance is not None else (1e-6 if args.op == "smoothed_ce" else 1e-5)
    report = gradcheck.gradient_check(args.op, args.seed, args.step, tol)
    print(report.line())
    return 0 if report.passed else 2


def cmd_synth(args):
    spec = pipeline.SyntheticSpec(n=args.n, feature_dim=args.feature_dim, label_noise=args.label_noise,
                                  feature_noise=args.feature_noise, seed=args.seed)
    corpus, feats = pipeline.write_synthetic(args.out, spec)
    print(f"wrote {corpus} and {feats}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lingfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract per-text feature vectors to CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", choices=["lexicon", "dictionary", "goss", "dense"], required=True)
    p.add_argument("--dict", dest="dictionary")
    p.add_argument("--features", help="topic-matrix or dense-vector CSV")
    p.add_argument("--normalize", action="store_true", help="scale lexicon rows to sum to 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train and evaluate per the config's split plan")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="stratified 5-fold cross-validation")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("calibrate", help="ECE/ACE from a prediction CSV")
    p.add_argument("--predictions", required=True, help="CSV with id,true_label,p0..p{K-1}")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--ranges", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="correlate dictionary categories with a binary label")
    p.add_argument("--corpus", required=True)
    p.add_argument("--dict", dest="dictionary")
    p.add_argument("--q", type=float, default=0.05, help="false discovery rate")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--op", choices=sorted(gradcheck.CHECKS), default="fusion")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic feature-informative corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--label-noise", type=float, default=0.05)
    p.add_argument("--feature-noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LingfuseError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
