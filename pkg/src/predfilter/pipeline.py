"""Dataset-level drivers shared by the CLI: per-record jobs and their merge.

Jobs are top-level functions taking one tuple so they can run in worker
processes. They return ``(result, error)``; the caller walks results in record
order, which keeps both merged totals and error reporting deterministic.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, MissingInput, PredFilterError
from .filtering import (
    FilterConfig,
    SoftFilterConfig,
    allowed_set_from_classifier,
    argmax_predict,
    filtered_predict,
    oracle_allowed_set,
    oracle_filter_predict,
    soft_filter_predict,
)
from .metrics import ConfusionMatrix, confusion_counts, mnet_counts, mnet_from_counts
from .parallel import parallel_map
from .tensor_io import (
    DatasetManifest,
    LoadedRecord,
    check_label_map,
    load_record,
    prediction_path,
    read_label_map,
    write_label_map,
)


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    ORACLE = "oracle"
    FILTER = "filter"
    SOFT = "soft"


NEEDS = {
    Mode.BASELINE: (),
    Mode.ORACLE: ("gt",),
    Mode.FILTER: ("scores",),
    Mode.SOFT: ("scores",),
}


@dataclass(frozen=True)
class PredictSettings:
    mode: Mode = Mode.BASELINE
    filter: FilterConfig = field(default_factory=FilterConfig)
    soft: SoftFilterConfig = field(default_factory=SoftFilterConfig)

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value}
        if self.mode == Mode.FILTER:
            f = self.filter
            d.update(
                tau=f.tau,
                always_allow=None if f.always_allow is None else sorted(f.always_allow),
                strict=f.strict,
                fallback=f.fallback.value,
            )
        elif self.mode == Mode.SOFT:
            d.update(temperature=self.soft.temperature, shift=self.soft.shift)
        return d


def predict_loaded(loaded: LoadedRecord, settings: PredictSettings, num_classes: int,
                   background_class: Optional[int]):
    """Prediction for one loaded record plus the allowed set (None for soft)."""
    mode = settings.mode
    if mode == Mode.BASELINE:
        return argmax_predict(loaded.logits), frozenset(range(num_classes))
    if mode == Mode.ORACLE:
        return (
            oracle_filter_predict(loaded.logits, loaded.gt, background_class),
            oracle_allowed_set(loaded.gt, background_class),
        )
    if mode == Mode.FILTER:
        allowed = allowed_set_from_classifier(loaded.scores, settings.filter, num_classes, background_class)
        return filtered_predict(loaded.logits, allowed), allowed
    return soft_filter_predict(loaded.logits, loaded.scores, settings.soft, background_class), None


# --------------------------------------------------------------------------
# predict

def _predict_job(args):
    manifest, rec, settings, out_dir = args
    try:
        loaded = load_record(manifest, rec, need=NEEDS[settings.mode])
        pred, allowed = predict_loaded(loaded, settings, manifest.num_classes, manifest.background_class)
    except PredFilterError as exc:
        return None, exc
    write_label_map(pred, prediction_path(out_dir, rec.image_id))
    changed = int((pred != argmax_predict(loaded.logits)).sum())
    entry = {"image_id": rec.image_id, "changed_pixels": changed}
    if allowed is not None:
        entry["allowed"] = sorted(allowed)
    return entry, None


def run_predict(manifest: DatasetManifest, settings: PredictSettings, out_dir,
                workers: int = 1, skip_bad: bool = False):
    """Write one PGM prediction per record; return (per-record entries, skipped)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(manifest, rec, settings, out_dir) for rec in manifest.records]
    entries, skipped = [], []
    for rec, (entry, err) in zip(manifest.records, parallel_map(_predict_job, jobs, workers)):
        if err is not None:
            if not skip_bad:
                raise err
            skipped.append((rec.image_id, err))
        else:
            entries.append(entry)
    return entries, skipped


# --------------------------------------------------------------------------
# evaluate stored predictions

def _load_prediction(pred_dir, image_id: str, shape, num_classes: int) -> np.ndarray:
    path = prediction_path(pred_dir, image_id)
    if not path.is_file():
        raise MissingInput(f"record {image_id!r}: prediction file not found: {path}")
    pred = read_label_map(path)
    if pred.shape != shape:
        raise DimensionMismatch(
            f"record {image_id!r}: prediction is {pred.shape[0]}x{pred.shape[1]}, gt is {shape[0]}x{shape[1]}"
        )
    return check_label_map(pred, num_classes)


def _read_gt_and_pred(manifest, rec, pred_dir, with_pseudo=False):
    if rec.gt_path is None:
        raise MissingInput(f"record {rec.image_id!r}: missing gt_path")
    if with_pseudo and rec.pseudo_path is None:
        raise MissingInput(f"record {rec.image_id!r}: missing pseudo_path")
    try:
        gt = check_label_map(read_label_map(rec.gt_path), manifest.num_classes)
        pseudo = check_label_map(read_label_map(rec.pseudo_path), manifest.num_classes) if with_pseudo else None
    except PredFilterError as exc:
        raise type(exc)(f"record {rec.image_id!r}: {exc}") from None
    if pseudo is not None and pseudo.shape != gt.shape:
        raise DimensionMismatch(f"record {rec.image_id!r}: pseudo-label is {pseudo.shape}, gt is {gt.shape}")
    pred = _load_prediction(pred_dir, rec.image_id, gt.shape, manifest.num_classes)
    return gt, pred, pseudo


def _eval_job(args):
    manifest, rec, pred_dir = args
    try:
        gt, pred, _ = _read_gt_and_pred(manifest, rec, pred_dir)
        return confusion_counts(gt, pred, manifest.num_classes), None
    except PredFilterError as exc:
        return None, exc


def run_eval(manifest: DatasetManifest, pred_dir, workers: int = 1, skip_bad: bool = False):
    """Per-image confusion matrices (record order) for every record with gt.

    Returns ``(total ConfusionMatrix, [(image_id, counts)], skipped)``.
    """
    recs = [rec for rec in manifest.records if rec.gt_path is not None]
    jobs = [(manifest, rec, Path(pred_dir)) for rec in recs]
    k = manifest.num_classes
    total = ConfusionMatrix(k)
    per_image, skipped = [], []
    for rec, (counts, err) in zip(recs, parallel_map(_eval_job, jobs, workers)):
        if err is not None:
            if not skip_bad:
                raise err
            skipped.append((rec.image_id, err))
            continue
        total.counts += counts
        per_image.append((rec.image_id, counts))
    return total, per_image, skipped


def _mnet_job(args):
    manifest, rec, pred_dir = args
    try:
        gt, pred, pseudo = _read_gt_and_pred(manifest, rec, pred_dir, with_pseudo=True)
        return mnet_counts(gt, pred, pseudo, manifest.num_classes), None
    except PredFilterError as exc:
        return None, exc


def run_mnet(manifest: DatasetManifest, pred_dir, workers: int = 1, skip_bad: bool = False):
    k = manifest.num_classes
    correct = np.zeros(k, dtype=np.int64)
    incorrect = np.zeros(k, dtype=np.int64)
    denom = np.zeros(k, dtype=np.int64)
    skipped = []
    jobs = [(manifest, rec, Path(pred_dir)) for rec in manifest.records]
    for rec, (counts, err) in zip(manifest.records, parallel_map(_mnet_job, jobs, workers)):
        if err is not None:
            if not skip_bad:
                raise err
            skipped.append((rec.image_id, err))
            continue
        correct += counts[0]
        incorrect += counts[1]
        denom += counts[2]
    return mnet_from_counts(correct, incorrect, denom), skipped


# --------------------------------------------------------------------------
# full in-memory comparison used by the report subcommand

def _compare_job(args):
    manifest, rec, modes, taus, filter_cfg = args
    k = manifest.num_classes
    bg = manifest.background_class
    try:
        need = {"gt"}
        for m in modes:
            need.update(NEEDS[m.mode])
        if taus:
            need.add("scores")
        loaded = load_record(manifest, rec, need=need)
        out = {"modes": {}, "sweep": None, "mnet": None}
        baseline = None
        for s in modes:
            pred, _ = predict_loaded(loaded, s, k, bg)
            if s.mode == Mode.BASELINE:
                baseline = pred
            out["modes"][s.mode.value] = confusion_counts(loaded.gt, pred, k)
        if taus:
            sweep = np.zeros((len(taus), k, k), dtype=np.int64)
            for i, tau in enumerate(taus):
                allowed = allowed_set_from_classifier(loaded.scores, replace(filter_cfg, tau=tau), k, bg)
                sweep[i] = confusion_counts(loaded.gt, filtered_predict(loaded.logits, allowed), k)
            out["sweep"] = sweep
        if loaded.pseudo is not None:
            if baseline is None:
                baseline = argmax_predict(loaded.logits)
            out["mnet"] = mnet_counts(loaded.gt, baseline, loaded.pseudo, k)
        return out, None
    except PredFilterError as exc:
        return None, exc


def run_compare(manifest: DatasetManifest, modes: Sequence[PredictSettings], taus: Sequence[float],
                filter_cfg: FilterConfig, workers: int = 1, skip_bad: bool = False):
    """Confusion totals per mode and per threshold, plus baseline mNet counts."""
    recs = [rec for rec in manifest.records if rec.gt_path is not None]
    k = manifest.num_classes
    totals = {s.mode.value: np.zeros((k, k), dtype=np.int64) for s in modes}
    sweep = np.zeros((len(taus), k, k), dtype=np.int64)
    mnet = np.zeros((3, k), dtype=np.int64)
    have_mnet = False
    skipped = []
    jobs = [(manifest, rec, list(modes), list(taus), filter_cfg) for rec in recs]
    for rec, (out, err) in zip(recs, parallel_map(_compare_job, jobs, workers)):
        if err is not None:
            if not skip_bad:
                raise err
            skipped.append((rec.image_id, err))
            continue
        for name, counts in out["modes"].items():
            totals[name] += counts
        if out["sweep"] is not None:
            sweep += out["sweep"]
        if out["mnet"] is not None:
            have_mnet = True
            mnet += np.stack(out["mnet"])
    mnet_report = mnet_from_counts(*mnet) if have_mnet else None
    return totals, sweep, mnet_report, skipped
