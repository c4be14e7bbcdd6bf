"""Command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
Reports carry no timestamps unless ``--stamp`` is given, and ``--workers``
never changes an output byte.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, PredFilterError
from .filtering import Fallback, FilterConfig, SoftFilterConfig
from .metrics import (
    DEFAULT_SIZE_BRACKETS,
    ConfusionMatrix,
    Grouping,
    iou_from_confusion,
    multilabel_metrics,
    subgroup_from_confusions,
    sweep_confusions,
)
from .pipeline import Mode, PredictSettings, run_compare, run_eval, run_mnet, run_predict
from .reports import (
    write_confusion_csv,
    write_iou_csv,
    write_json,
    write_mnet_csv,
    write_subgroup_csv,
    write_sweep_csv,
    write_table_csv,
)
from .synth import ScenarioConfig, generate_scenario
from .tensor_io import load_manifest

log = logging.getLogger("predfilter")

DEFAULT_TAU_GRID = (-5.0, 1.0, 0.25)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument helpers

def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {v}")
    return v


def _float_list(text: str) -> list[float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return [_float(p) for p in parts]


def _class_list(text: str) -> frozenset:
    try:
        return frozenset(int(p) for p in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of class ids: {text!r}") from None


def tau_grid(tau_min: float, tau_max: float, step: float) -> list[float]:
    """Inclusive arithmetic grid; each point rounded to 10 decimals."""
    if not step > 0:
        raise UsageError(f"--tau-step must be positive, got {step}")
    if tau_max < tau_min:
        return []
    n = int(math.floor((tau_max - tau_min) / step + 1e-9)) + 1
    return [round(tau_min + i * step, 10) for i in range(n)]


def _add_filter_flags(p: argparse.ArgumentParser, tau_default=0.0, with_tau=True):
    if with_tau:
        p.add_argument("--tau", type=_float, default=tau_default,
                       help="classifier logit threshold (default: %(default)s)")
    p.add_argument("--always-allow", type=_class_list, default=None, metavar="IDS",
                   help="classes never filtered out (default: the background class)")
    p.add_argument("--non-strict", action="store_true", help="keep classes with score >= tau instead of > tau")
    p.add_argument("--fallback", choices=[f.value for f in Fallback], default=Fallback.UNFILTERED.value,
                   help="policy when no class survives (default: %(default)s)")


def _filter_config(args, tau=None) -> FilterConfig:
    return FilterConfig(
        tau=args.tau if tau is None else tau,
        always_allow=args.always_allow,
        strict=not args.non_strict,
        fallback=Fallback(args.fallback),
    )


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--workers", type=_positive_int, default=1, help="worker processes (default: 1)")
    p.add_argument("--skip-bad", action="store_true", help="skip records that fail instead of aborting")
    p.add_argument("--stamp", action="store_true", help="add a generation timestamp to JSON reports")


def _skipped(skipped) -> list[dict]:
    for image_id, err in skipped:
        log.warning("skipped %s: %s", image_id, err)
    return [{"image_id": iid, "error": f"{type(err).__name__}: {err}"} for iid, err in skipped]


def _manifest(path, args):
    manifest = load_manifest(path)
    if args.workers > 1:
        log.debug("using %d workers", args.workers)
    return manifest


def _validate_always_allow(args, manifest):
    if getattr(args, "always_allow", None) is not None:
        _filter_config(args, tau=0.0).resolved_always_allow(manifest.num_classes, manifest.background_class)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    config = ScenarioConfig.from_json(args.config)
    manifest = generate_scenario(config, args.out_dir, workers=args.workers)
    print(Path(args.out_dir) / "manifest.json")
    log.info("wrote %d images", len(manifest.records))
    return 0


def cmd_predict(args) -> int:
    manifest = _manifest(args.manifest, args)
    _validate_always_allow(args, manifest)
    settings = PredictSettings(
        mode=Mode(args.mode),
        filter=_filter_config(args),
        soft=SoftFilterConfig(temperature=args.temperature, shift=args.shift),
    )
    entries, skipped = run_predict(manifest, settings, args.out_dir, args.workers, args.skip_bad)
    summary = {
        "settings": settings.to_dict(),
        "num_records": len(manifest.records),
        "num_predicted": len(entries),
        "records": entries,
        "skipped": _skipped(skipped),
    }
    write_json(summary, Path(args.out_dir) / "predict_summary.json", stamp=args.stamp)
    return 0


def _brackets(text: str) -> list[float]:
    edges = _float_list(text)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise UsageError(f"--size-brackets needs at least two strictly increasing edges, got {text!r}")
    return edges


def cmd_eval(args) -> int:
    manifest = _manifest(args.manifest, args)
    brackets = _brackets(args.size_brackets) if args.size_brackets else None
    total, per_image, skipped = run_eval(manifest, args.pred_dir, args.workers, args.skip_bad)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = iou_from_confusion(total)
    doc = {"num_images": len(per_image), **report.to_dict()}
    cms = [counts for _, counts in per_image]
    if args.by_class_count:
        sub = subgroup_from_confusions(cms, Grouping.BY_CLASS_COUNT, manifest.background_class)
        doc["by_class_count"] = sub.to_dict()
        write_subgroup_csv(sub, out / "subgroups_class_count.csv")
    if brackets is not None:
        sub = subgroup_from_confusions(cms, Grouping.BY_CLASS_SIZE, manifest.background_class, brackets)
        doc["by_class_size"] = sub.to_dict()
        write_subgroup_csv(sub, out / "subgroups_class_size.csv")
    doc["skipped"] = _skipped(skipped)
    write_json(doc, out / "eval.json", stamp=args.stamp)
    write_iou_csv(report, out / "iou.csv")
    write_confusion_csv(total, out / "confusion.csv")
    print(f"mIoU {report.miou!r}")
    return 0


def cmd_mnet(args) -> int:
    manifest = _manifest(args.manifest, args)
    report, skipped = run_mnet(manifest, args.pred_dir, args.workers, args.skip_bad)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json({**report.to_dict(), "skipped": _skipped(skipped)}, out / "mnet.json", stamp=args.stamp)
    write_mnet_csv(report, out / "mnet.csv")
    print(f"mNet {report.mnet!r}")
    return 0


def _taus_from_args(args) -> list[float]:
    if args.taus is not None:
        taus = sorted(set(_float_list(args.taus)))
    else:
        taus = tau_grid(args.tau_min, args.tau_max, args.tau_step)
    if not taus:
        raise UsageError("empty threshold grid")
    return taus


def cmd_sweep(args) -> int:
    manifest = _manifest(args.manifest, args)
    _validate_always_allow(args, manifest)
    taus = _taus_from_args(args)
    cfg = _filter_config(args, tau=0.0)
    totals, skipped = sweep_confusions(manifest, taus, cfg, args.workers, args.skip_bad)
    _skipped(skipped)
    k = manifest.num_classes
    rows = [{"tau": t, "miou": iou_from_confusion(ConfusionMatrix(k, totals[i])).miou}
            for i, t in enumerate(taus)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out)
    if args.figure:
        from .plotting import plot_sweep

        plot_sweep(rows, args.figure)
    return 0


def cmd_report(args) -> int:
    """Baseline / filter / oracle (/ soft) comparison with figures."""
    manifest = _manifest(args.manifest, args)
    _validate_always_allow(args, manifest)
    cfg = _filter_config(args)
    k = manifest.num_classes
    has_scores = all(r.classifier_scores is not None for r in manifest.records)
    modes = [PredictSettings(Mode.BASELINE)]
    if has_scores:
        modes.append(PredictSettings(Mode.FILTER, filter=cfg))
        if args.temperature is not None:
            modes.append(PredictSettings(Mode.SOFT, soft=SoftFilterConfig(args.temperature, args.shift)))
    modes.append(PredictSettings(Mode.ORACLE))
    taus = _taus_from_args(args) if has_scores else []

    totals, sweep, mnet_report, skipped = run_compare(manifest, modes, taus, cfg, args.workers, args.skip_bad)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports = {}
    summary = {"modes": {}, "skipped": _skipped(skipped)}
    for s in modes:
        name = s.mode.value
        cm = ConfusionMatrix(k, totals[name])
        rep = iou_from_confusion(cm)
        reports[name] = rep
        correct = int(cm.counts.trace())
        summary["modes"][name] = {
            "settings": s.to_dict(),
            "miou": rep.miou,
            "pixel_accuracy": correct / cm.total if cm.total else None,
        }
        write_confusion_csv(cm, out / f"confusion_{name}.csv")
    write_table_csv(
        ("mode", "miou", "pixel_accuracy"),
        [(n, m["miou"], m["pixel_accuracy"]) for n, m in summary["modes"].items()],
        out / "comparison.csv",
    )
    write_table_csv(
        ("class_id", *reports),
        [(c, *(r.iou[c] for r in reports.values())) for c in range(k)],
        out / "per_class_iou.csv",
    )
    rows = []
    if taus:
        rows = [{"tau": t, "miou": iou_from_confusion(ConfusionMatrix(k, sweep[i])).miou}
                for i, t in enumerate(taus)]
        write_sweep_csv(rows, out / "sweep.csv")
        summary["sweep"] = rows
    if mnet_report is not None:
        write_mnet_csv(mnet_report, out / "mnet_baseline.csv")
        summary["mnet_baseline"] = mnet_report.to_dict()
    if has_scores and all(r.presence is not None for r in manifest.records) and manifest.records:
        ml = multilabel_metrics(
            [(r.classifier_scores, r.presence) for r in manifest.records],
            args.tau, k, manifest.background_class,
        )
        summary["classifier"] = ml.to_dict()
    write_json(summary, out / "summary.json", stamp=args.stamp)

    if not args.no_figures:
        from .plotting import plot_confusion, plot_per_class_iou, plot_sweep

        for name in reports:
            plot_confusion(totals[name], out / f"confusion_{name}.png", title=name)
        plot_per_class_iou(reports, out / "per_class_iou.png")
        if rows:
            plot_sweep(rows, out / "sweep.png",
                       baseline=reports["baseline"].miou, oracle=reports["oracle"].miou)
    for name, rep in reports.items():
        print(f"{name:<9} mIoU {100 * rep.miou:.2f}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="predfilter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("config", help="scenario config JSON")
    p.add_argument("out_dir")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("predict", help="write per-image predictions")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.BASELINE.value)
    _add_filter_flags(p)
    p.add_argument("--temperature", type=_float, default=1.0, help="soft mode temperature; 'inf' for a step")
    p.add_argument("--shift", type=_float, default=0.0, help="soft mode shift")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mIoU and confusion matrix of stored predictions")
    p.add_argument("manifest")
    p.add_argument("pred_dir")
    p.add_argument("--by-class-count", action="store_true", help="also group images by class count")
    p.add_argument("--size-brackets", nargs="?", const=",".join(str(b) for b in DEFAULT_SIZE_BRACKETS),
                   default=None, metavar="EDGES",
                   help="also group (image, class) pairs by class size; comma-separated edges, 'inf' allowed")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mnet", help="mNet of pseudo-labels against stored predictions")
    p.add_argument("manifest")
    p.add_argument("pred_dir")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mnet)

    def grid_flags(p):
        g = p.add_argument_group("threshold grid")
        g.add_argument("--tau-min", type=_float, default=DEFAULT_TAU_GRID[0])
        g.add_argument("--tau-max", type=_float, default=DEFAULT_TAU_GRID[1])
        g.add_argument("--tau-step", type=_float, default=DEFAULT_TAU_GRID[2])
        g.add_argument("--taus", default=None, help="explicit comma-separated thresholds")

    p = sub.add_parser("sweep", help="mIoU across filtering thresholds")
    p.add_argument("manifest")
    grid_flags(p)
    _add_filter_flags(p, with_tau=False)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--figure", default=None, help="optional PNG path for the curve")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare prediction modes; CSV, JSON and figures")
    p.add_argument("manifest")
    _add_filter_flags(p, tau_default=-1.0)
    p.add_argument("--temperature", type=_float, default=None, help="also evaluate soft filtering")
    p.add_argument("--shift", type=_float, default=0.0)
    grid_flags(p)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, PredFilterError) as exc:
        print(f"predfilter {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"predfilter {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"predfilter {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
