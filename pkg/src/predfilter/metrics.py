"""Segmentation and classifier metrics.

All per-image contributions are integer counts, so any partition of a dataset
across workers merges to exactly the same totals.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyReport, PredFilterError, PredHasIgnore
from .filtering import FilterConfig, allowed_set_from_classifier, filtered_predict
from .parallel import parallel_map
from .tensor_io import IGNORE, DatasetManifest, foreground_classes, load_record

DEFAULT_SIZE_BRACKETS = (0, 1024, 4096, 16384, 65536, math.inf)


def _check_pair(gt, pred):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DimensionMismatch(f"gt is {gt.shape}, prediction is {pred.shape}")
    return gt, pred


class ConfusionMatrix:
    """``counts[r, c]`` = pixels of ground-truth class r predicted as c."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (self.num_classes, self.num_classes):
                raise DimensionMismatch(f"counts shape {counts.shape} for {num_classes} classes")
        self.counts = counts

    def update(self, gt, pred) -> "ConfusionMatrix":
        self.counts += confusion_counts(gt, pred, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionMismatch("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and other.num_classes == self.num_classes
            and np.array_equal(other.counts, self.counts)
        )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def confusion_counts(gt, pred, num_classes: int) -> np.ndarray:
    gt, pred = _check_pair(gt, pred)
    if (pred == IGNORE).any():
        raise PredHasIgnore("prediction contains the ignore label")
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes):
        raise DimensionMismatch(f"label outside [0, {num_classes})")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def accumulate_confusion(gt, pred, acc: ConfusionMatrix) -> ConfusionMatrix:
    return acc.update(gt, pred)


@dataclass
class IoUReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    iou: list  # float or None (undefined) per class
    miou: Optional[float]

    @property
    def num_classes(self) -> int:
        return len(self.iou)

    @property
    def empty(self) -> bool:
        return self.miou is None

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class": [
                {
                    "class_id": c,
                    "tp": int(self.tp[c]),
                    "fp": int(self.fp[c]),
                    "fn": int(self.fn[c]),
                    "iou": self.iou[c],
                }
                for c in range(self.num_classes)
            ],
        }


def iou_from_counts(tp, fp, fn, allow_empty: bool = False) -> IoUReport:
    tp = np.asarray(tp, dtype=np.int64)
    fp = np.asarray(fp, dtype=np.int64)
    fn = np.asarray(fn, dtype=np.int64)
    ious = []
    for t, f, n in zip(tp.tolist(), fp.tolist(), fn.tolist()):
        denom = t + f + n
        ious.append(t / denom if denom > 0 else None)
    defined = [v for v in ious if v is not None]
    if not defined:
        if not allow_empty:
            raise EmptyReport("no class has a defined IoU")
        return IoUReport(tp, fp, fn, ious, None)
    return IoUReport(tp, fp, fn, ious, math.fsum(defined) / len(defined))


def iou_from_confusion(acc: ConfusionMatrix, allow_empty: bool = False) -> IoUReport:
    counts = acc.counts
    tp = np.diag(counts).copy()
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    return iou_from_counts(tp, fp, fn, allow_empty=allow_empty)


def pixel_accuracy(gt, pred) -> tuple[int, int]:
    """(correct, counted) over non-ignore ground-truth pixels."""
    gt, pred = _check_pair(gt, pred)
    valid = gt != IGNORE
    return int((gt[valid] == pred[valid]).sum()), int(valid.sum())


# --------------------------------------------------------------------------
# mNet

@dataclass
class MNetReport:
    correct_area: np.ndarray
    incorrect_area: np.ndarray
    net: list  # float or None per class
    mnet: Optional[float]

    @property
    def denom(self) -> np.ndarray:
        return self.correct_area + self.incorrect_area

    def to_dict(self) -> dict:
        return {
            "mnet": self.mnet,
            "per_class": [
                {
                    "class_id": c,
                    "correct_area": int(self.correct_area[c]),
                    "incorrect_area": int(self.incorrect_area[c]),
                    "denom": int(self.denom[c]),
                    "net": self.net[c],
                }
                for c in range(len(self.net))
            ],
        }


def mnet_counts(gt, pred, pseudo, num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (correct, incorrect, added) areas for one image.

    "Added" pixels are labelled c by the pseudo-label but not by the
    prediction; ignore pixels in the ground truth are excluded entirely.
    """
    gt, pred = _check_pair(gt, pred)
    pseudo = np.asarray(pseudo)
    if pseudo.shape != gt.shape:
        raise DimensionMismatch(f"pseudo-label is {pseudo.shape}, gt is {gt.shape}")
    added = (gt != IGNORE) & (pseudo != IGNORE) & (pseudo != pred)
    cls = pseudo[added].astype(np.int64)
    hit = gt[added] == pseudo[added]
    correct = np.bincount(cls[hit], minlength=num_classes)[:num_classes]
    incorrect = np.bincount(cls[~hit], minlength=num_classes)[:num_classes]
    denom = np.bincount(cls, minlength=num_classes)[:num_classes]
    return correct, incorrect, denom


def mnet_from_counts(correct, incorrect, denom=None) -> MNetReport:
    correct = np.asarray(correct, dtype=np.int64)
    incorrect = np.asarray(incorrect, dtype=np.int64)
    if denom is not None and not np.array_equal(np.asarray(denom), correct + incorrect):
        raise AssertionError("mNet denominator differs from correct + incorrect area")
    nets = []
    for a, b in zip(correct.tolist(), incorrect.tolist()):
        d = a + b
        nets.append((a - b) / d if d > 0 else None)
    defined = [v for v in nets if v is not None]
    mean = math.fsum(defined) / len(defined) if defined else None
    return MNetReport(correct, incorrect, nets, mean)


def mnet(images: Iterable, num_classes: int) -> MNetReport:
    """mNet over ``(gt, pred, pseudo)`` triples; areas are summed before dividing."""
    correct = np.zeros(num_classes, dtype=np.int64)
    incorrect = np.zeros(num_classes, dtype=np.int64)
    denom = np.zeros(num_classes, dtype=np.int64)
    for item in images:
        if isinstance(item, dict):
            item = (item["gt"], item["pred"], item["pseudo"])
        a, b, d = mnet_counts(*item, num_classes)
        correct += a
        incorrect += b
        denom += d
    return mnet_from_counts(correct, incorrect, denom)


# --------------------------------------------------------------------------
# multi-label classifier metrics

def average_precision(scores, labels) -> Optional[float]:
    """Mean of the precision at the rank of each positive.

    Scores are ranked in descending order; ties keep input order. Returns
    None when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, n_pos + 1) / ranks
    return math.fsum(precisions.tolist()) / n_pos


@dataclass
class MultiLabelReport:
    class_ids: list
    accuracy: list
    average_precision: list  # None where a class has no positives
    mean_accuracy: float
    mean_ap: Optional[float]

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_ap": self.mean_ap,
            "per_class": [
                {"class_id": c, "accuracy": a, "average_precision": p}
                for c, a, p in zip(self.class_ids, self.accuracy, self.average_precision)
            ],
        }


def multilabel_metrics(
    records: Sequence,
    threshold: float,
    num_classes: int,
    background_class: Optional[int] = 0,
) -> MultiLabelReport:
    """``records`` holds ``(scores, presence)`` pairs, one per image."""
    if not records:
        raise EmptyReport("no records")
    fg = foreground_classes(num_classes, background_class)
    score_rows = []
    label_rows = []
    for item in records:
        if isinstance(item, dict):
            item = (item["scores"], item["presence"])
        scores, presence = item
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(fg),):
            raise DimensionMismatch(f"{scores.size} scores for {len(fg)} foreground classes")
        score_rows.append(scores)
        label_rows.append([c in presence for c in fg])
    s = np.stack(score_rows)
    z = np.asarray(label_rows, dtype=bool)
    acc = ((s > threshold) == z).mean(axis=0)
    aps = [average_precision(s[:, j], z[:, j]) for j in range(len(fg))]
    defined = [a for a in aps if a is not None]
    return MultiLabelReport(
        class_ids=fg,
        accuracy=[float(a) for a in acc],
        average_precision=aps,
        mean_accuracy=float(acc.mean()),
        mean_ap=math.fsum(defined) / len(defined) if defined else None,
    )


# --------------------------------------------------------------------------
# threshold sweep

def _sweep_one(args):
    manifest, rec, taus, config = args
    try:
        loaded = load_record(manifest, rec, need=("gt", "scores"))
    except PredFilterError as exc:
        return None, exc
    k = manifest.num_classes
    out = np.zeros((len(taus), k, k), dtype=np.int64)
    for i, tau in enumerate(taus):
        cfg = replace(config, tau=tau)
        allowed = allowed_set_from_classifier(loaded.scores, cfg, k, manifest.background_class)
        pred = filtered_predict(loaded.logits, allowed)
        out[i] = confusion_counts(loaded.gt, pred, k)
    return out, None


def sweep_confusions(
    manifest: DatasetManifest,
    taus: Sequence[float],
    config: Optional[FilterConfig] = None,
    workers: int = 1,
    skip_bad: bool = False,
) -> tuple[np.ndarray, list]:
    """Dataset confusion matrix per threshold, shape ``(len(taus), K, K)``.

    Returns the totals and the ``(image_id, error)`` pairs that were skipped.
    """
    config = config or FilterConfig()
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("empty threshold grid")
    k = manifest.num_classes
    total = np.zeros((len(taus), k, k), dtype=np.int64)
    skipped = []
    jobs = [(manifest, rec, taus, config) for rec in manifest.records]
    for rec, (counts, err) in zip(manifest.records, parallel_map(_sweep_one, jobs, workers)):
        if err is not None:
            if not skip_bad:
                raise err
            skipped.append((rec.image_id, err))
            continue
        total += counts
    return total, skipped


def threshold_sweep(
    manifest: DatasetManifest,
    taus: Sequence[float],
    config: Optional[FilterConfig] = None,
    workers: int = 1,
) -> list[dict]:
    """mIoU of prediction filtering at each threshold, in the order given.

    Each record's logits are loaded once and reused for every threshold.
    """
    total, _ = sweep_confusions(manifest, taus, config, workers)
    k = manifest.num_classes
    return [
        {"tau": float(tau), "miou": iou_from_confusion(ConfusionMatrix(k, total[i])).miou}
        for i, tau in enumerate(taus)
    ]


# --------------------------------------------------------------------------
# sub-group analysis

class Grouping(str, enum.Enum):
    BY_CLASS_COUNT = "class-count"
    BY_CLASS_SIZE = "class-size"


@dataclass
class SubgroupReport:
    grouping: Grouping
    keys: list  # int (class count) or (lo, hi) bracket
    reports: list  # IoUReport per key; report.empty marks an empty group
    image_counts: list

    def to_dict(self) -> dict:
        groups = []
        for key, rep, n in zip(self.keys, self.reports, self.image_counts):
            if isinstance(key, tuple):
                key_obj = {"min_pixels": _num(key[0]), "max_pixels": _num(key[1])}
            else:
                key_obj = {"num_classes": key}
            groups.append({"key": key_obj, "members": n, "empty": rep.empty, **rep.to_dict()})
        return {"grouping": self.grouping.value, "groups": groups}


def _num(v):
    return None if math.isinf(v) else int(v) if float(v).is_integer() else v


def _bracket_index(size: int, brackets: Sequence[float]) -> int:
    for i in range(len(brackets) - 1):
        if brackets[i] <= size < brackets[i + 1]:
            return i
    raise ValueError(f"class size {size} falls outside the bracket edges {list(brackets)}")


def subgroup_from_confusions(
    confusions: Sequence[np.ndarray],
    grouping: Grouping,
    background_class: Optional[int] = 0,
    brackets: Sequence[float] = DEFAULT_SIZE_BRACKETS,
) -> SubgroupReport:
    """Group per-image confusion matrices; see :func:`subgroup_eval`."""
    grouping = Grouping(grouping)
    if not len(confusions):
        raise EmptyReport("no images to group")
    k = np.asarray(confusions[0]).shape[0]
    if grouping == Grouping.BY_CLASS_COUNT:
        buckets: dict[int, ConfusionMatrix] = {}
        members: dict[int, int] = {}
        for cm in confusions:
            sizes = np.asarray(cm).sum(axis=1)
            n = sum(1 for c in range(k) if sizes[c] > 0 and c != background_class)
            buckets[n] = buckets.get(n, ConfusionMatrix(k)) + ConfusionMatrix(k, cm)
            members[n] = members.get(n, 0) + 1
        keys = sorted(buckets)
        reports = [iou_from_confusion(buckets[key], allow_empty=True) for key in keys]
        return SubgroupReport(grouping, keys, reports, [members[key] for key in keys])

    edges = [float(b) for b in brackets]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bracket edges must be strictly increasing: {list(brackets)}")
    nb = len(edges) - 1
    tp = np.zeros((nb, k), dtype=np.int64)
    fp = np.zeros((nb, k), dtype=np.int64)
    fn = np.zeros((nb, k), dtype=np.int64)
    members = np.zeros(nb, dtype=np.int64)
    for cm in confusions:
        cm = np.asarray(cm, dtype=np.int64)
        sizes = cm.sum(axis=1)
        diag = np.diag(cm)
        for c in range(k):
            t, f, n = diag[c], cm[:, c].sum() - diag[c], sizes[c] - diag[c]
            if t + f + n == 0:
                continue
            b = _bracket_index(int(sizes[c]), edges)
            tp[b, c] += t
            fp[b, c] += f
            fn[b, c] += n
            members[b] += 1
    keys = [(edges[i], edges[i + 1]) for i in range(nb)]
    reports = [iou_from_counts(tp[i], fp[i], fn[i], allow_empty=True) for i in range(nb)]
    return SubgroupReport(grouping, keys, reports, [int(m) for m in members])


def subgroup_eval(
    gts: Sequence[np.ndarray],
    predictions: Sequence[np.ndarray],
    grouping: Grouping,
    num_classes: int,
    background_class: Optional[int] = 0,
    brackets: Sequence[float] = DEFAULT_SIZE_BRACKETS,
) -> SubgroupReport:
    """Break IoU down by image class count or by per-image class size.

    ByClassCount puts each image in the bucket for its number of foreground
    classes. ByClassSize assigns each (image, class) contribution to the
    bracket holding that class's ground-truth pixel count in that image;
    brackets are half-open ``[lo, hi)`` intervals between consecutive edges.
    ``members`` counts images for the former and (image, class) pairs for
    the latter.
    """
    if len(gts) != len(predictions):
        raise DimensionMismatch(f"{len(gts)} gt maps but {len(predictions)} predictions")
    cms = [confusion_counts(g, p, num_classes) for g, p in zip(gts, predictions)]
    return subgroup_from_confusions(cms, grouping, background_class, brackets)
