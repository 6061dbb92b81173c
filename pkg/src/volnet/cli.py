"""Command-line front end: ``volnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import metrics
from .cohort import SynthSpec, load_manifest, preprocess_cohort, synth_generate
from .errors import VolnetError
from .nn.gradcheck import audit
from .nn.model import config_from_name, config_scratch3d
from .nn.weights import read_tensors, weights_load
from .train import MODEL_NAMES, TrainConfig, VolumeStore, predict, read_scores, train_repeated, write_scores

log = logging.getLogger("volnet")

GRADCHECK_TOLERANCE = 1e-4


def _ints(text, sep=","):
    try:
        return tuple(int(v) for v in text.split(sep))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {sep}-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_synth(args):
    spec = SynthSpec(args.n_pos, args.n_neg, args.dims, args.spacing)
    m = synth_generate(spec, args.seed, args.out)
    print(f"wrote {len(m)} synthetic patients to {args.out}")


def cmd_preprocess(args):
    m = preprocess_cohort(load_manifest(args.manifest), args.out, args.target_mm)
    print(f"preprocessed {len(m)} volumes into {args.out}")


def _model_config(args):
    custom = any(v is not None for v in (args.conv, args.dense, args.input_shape)) or args.scale_input
    if not custom:
        return None
    if args.model != "scratch3d":
        raise VolnetError("--conv/--dense/--input-shape/--scale-input only apply to --model scratch3d")
    kwargs = {"scale_input": args.scale_input}
    if args.conv:
        kwargs["convs"] = args.conv
    if args.dense:
        kwargs["dense"] = args.dense
    if args.input_shape:
        kwargs["input_shape"] = (1, *args.input_shape)
    return config_scratch3d(**kwargs)


def cmd_train(args):
    cfg = TrainConfig(
        model_name=args.model, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, runs=args.runs,
        root_seed=args.seed, augment=not args.no_augment, weights=args.weights, model_config=_model_config(args),
    )
    if args.model != "scratch3d" and not args.weights:
        print(f"warning: {args.model} without --weights trains on a randomly initialised frozen base",
              file=sys.stderr)
    manifest = load_manifest(args.manifest)
    out = Path(args.out) / args.model
    results = train_repeated(cfg, manifest, out, args.parallel_runs)
    for r in results:
        test = r.scores.get("test")
        extra = f", test AUC {metrics.auc(test.scores, test.labels):.3f}" if test is not None and len(set(test.labels)) == 2 else ""
        print(f"run {r.run_index}: best epoch {r.best_epoch}, val loss {r.val_loss[r.best_epoch]:.4f}{extra}")


def _write_metrics(path: Path, m: metrics.RunMetrics):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, label in metrics.METRIC_ROWS:
            value = getattr(m, key)
            w.writerow([label, "" if value is None else repr(float(value))])


def run_metrics(scores, labels, threshold) -> metrics.RunMetrics:
    base = metrics.threshold_metrics(metrics.confusion_at(scores, labels, threshold))
    auc = metrics.auc(scores, labels) if len(set(labels.tolist())) == 2 else None
    return metrics.RunMetrics(auc, base.sensitivity, base.specificity, base.ppv, base.npv, base.f1)


def cmd_evaluate(args):
    run_dir = Path(args.run_dir)
    scores_path = run_dir / f"scores_{args.split}.csv"
    if args.manifest:
        config_name, _ = read_tensors(run_dir / "best.nnw1")
        model = weights_load(run_dir / "best.nnw1", config_from_name(config_name))
        manifest = load_manifest(args.manifest)
        scores = predict(model, manifest.split(args.split), VolumeStore(manifest))
        write_scores(scores_path, scores)
    else:
        scores = read_scores(scores_path)
    m = run_metrics(scores.scores, scores.labels, args.threshold)
    _write_metrics(run_dir / f"metrics_{args.split}.csv", m)
    for key, label in metrics.METRIC_ROWS:
        value = getattr(m, key)
        print(f"{label}: {'undefined' if value is None else f'{value:.4f}'}")


def _run_dirs(model_dir: Path):
    return sorted((d for d in model_dir.iterdir() if d.is_dir() and d.name.isdigit()), key=lambda d: int(d.name))


def cmd_report(args):
    runs_dir, out = Path(args.runs_dir), Path(args.out)
    aggregates = {}
    out.mkdir(parents=True, exist_ok=True)
    models = [m for m in MODEL_NAMES if (runs_dir / m).is_dir()]
    models += sorted(d.name for d in runs_dir.iterdir() if d.is_dir() and d.name not in MODEL_NAMES and _run_dirs(d))
    for model in models:
        per_run, curves = [], []
        for run in _run_dirs(runs_dir / model):
            path = run / f"scores_{args.split}.csv"
            if not path.exists():
                continue
            s = read_scores(path)
            per_run.append(run_metrics(s.scores, s.labels, args.threshold))
            if len(set(s.labels.tolist())) == 2:
                curves.append(metrics.roc_curve(s.scores, s.labels))
        if not per_run:
            continue
        aggregates[model] = metrics.aggregate_runs(per_run)
        if curves:
            metrics.emit_roc(metrics.roc_envelope(curves), out / f"roc_{model}", title=model)
    if not aggregates:
        raise VolnetError(f"no scores_{args.split}.csv files under {runs_dir}/<model>/<run>/")
    text = metrics.emit_report(aggregates, "text")
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(metrics.emit_report(aggregates, "csv"))
    print(text, end="")


def cmd_gradcheck(args):
    report = audit(args.instances, args.seed, args.config)
    worst = max(report.values())
    for name, err in report.items():
        print(f"{name:16s} max rel. error {err:.3e}")
    print(f"max relative error {worst:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        raise VolnetError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pos", type=int, default=5)
    p.add_argument("--n-neg", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_ints, default=(96, 96, 32))
    p.add_argument("--spacing", type=_floats, default=(1.0, 1.0, 2.0))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample to 1 mm and window to 8 bit")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-mm", type=float, default=1.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model several times")
    p.add_argument("--model", choices=MODEL_NAMES, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="NNW1 file with pre-trained (conv base) weights")
    p.add_argument("--parallel-runs", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--conv", type=_ints, help="scratch3d conv channels, e.g. 8,16,16,32")
    p.add_argument("--dense", type=_ints, help="scratch3d hidden dense sizes, e.g. 64,32")
    p.add_argument("--input-shape", type=lambda t: _ints(t, "x"), help="scratch3d patch extent, e.g. 64x64x24")
    p.add_argument("--scale-input", action="store_true", help="divide 8-bit inputs by 255")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="threshold metrics for one run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=metrics.THRESHOLD)
    p.add_argument("--manifest", help="re-score the split from best.nnw1 instead of reading scores_<split>.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="results table and ROC envelopes over runs")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=metrics.THRESHOLD)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all layers")
    p.add_argument("--config", default="tiny3d", choices=("tiny3d", "tiny2d"))
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (VolnetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
