"""JSON and CSV serialisation of metric reports.

Output is byte-stable: no timestamps unless asked for, floats written with
``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
from pathlib import Path

import numpy as np


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def write_json(obj, path, stamp: bool = False) -> None:
    doc = _jsonable(obj)
    if stamp:
        doc = {**doc, "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_iou_csv(report, path) -> None:
    """One row per class, then a ``miou`` row."""
    rows = [
        (c, int(report.tp[c]), int(report.fp[c]), int(report.fn[c]), report.iou[c])
        for c in range(report.num_classes)
    ]
    rows.append(("miou", "", "", "", report.miou))
    _write_rows(path, ("class_id", "tp", "fp", "fn", "iou"), rows)


def write_confusion_csv(confusion, path) -> None:
    k = confusion.num_classes
    rows = [(r, *confusion.counts[r].tolist()) for r in range(k)]
    _write_rows(path, ("gt\\pred", *range(k)), rows)


def write_sweep_csv(rows, path) -> None:
    _write_rows(path, ("tau", "miou"), [(float(r["tau"]), r["miou"]) for r in rows])


def write_mnet_csv(report, path) -> None:
    rows = [
        (c, int(report.correct_area[c]), int(report.incorrect_area[c]), int(report.denom[c]), report.net[c])
        for c in range(len(report.net))
    ]
    rows.append(("mnet", "", "", "", report.mnet))
    _write_rows(path, ("class_id", "correct_area", "incorrect_area", "denom", "net"), rows)


def write_subgroup_csv(report, path) -> None:
    rows = []
    for key, rep, n in zip(report.keys, report.reports, report.image_counts):
        label = f"{_fmt(key[0])}-{_fmt(key[1])}" if isinstance(key, tuple) else str(key)
        for c in range(rep.num_classes):
            rows.append((label, n, c, int(rep.tp[c]), int(rep.fp[c]), int(rep.fn[c]), rep.iou[c]))
        rows.append((label, n, "miou", "", "", "", rep.miou))
    _write_rows(path, ("group", "members", "class_id", "tp", "fp", "fn", "iou"), rows)


def write_table_csv(header, rows, path) -> None:
    _write_rows(path, header, rows)
