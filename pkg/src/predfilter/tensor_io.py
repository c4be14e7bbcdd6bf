"""On-disk formats: SFLT logit volumes, P5 PGM label maps and the JSON manifest.

SFLT layout (little-endian)::

    0..3    magic b"SFLT"
    4..7    version, u32 = 1
    8..11   K (classes), u32
    12..15  H, u32
    16..19  W, u32
    20..    K*H*W binary32 values, class-major then row-major

Label maps are plain 2-D ``uint8`` arrays, logit volumes are ``float32`` arrays
of shape ``(K, H, W)``, classifier scores are 1-D float arrays and presence
sets are frozensets of class ids.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    FormatError,
    ManifestError,
    MissingInput,
    NonFiniteValue,
    PredFilterError,
    TruncatedPayload,
    UnsupportedMaxval,
    UnsupportedVersion,
)

IGNORE = 255
SFLT_MAGIC = b"SFLT"
SFLT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
HEADER_SIZE = _HEADER.size  # 20


# --------------------------------------------------------------------------
# logits

def check_logits(values: np.ndarray) -> np.ndarray:
    """Return ``values`` as a C-contiguous float32 (K, H, W) array or raise."""
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise FormatError(f"logit volume must be 3-D (K, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise FormatError(f"logit volume has an empty axis: shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteValue(
            f"non-finite logit at flat index {idx} (byte offset {HEADER_SIZE + 4 * idx})"
        )
    return arr


def write_logits(values: np.ndarray, path) -> None:
    arr = check_logits(values)
    k, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SFLT_MAGIC, SFLT_VERSION, k, h, w))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def decode_logits(buf: bytes) -> np.ndarray:
    """Decode an in-memory SFLT file."""
    if len(buf) < 4:
        raise TruncatedPayload(f"file is {len(buf)} bytes, header needs {HEADER_SIZE} (offset 0)")
    if buf[:4] != SFLT_MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r} at byte offset 0, expected {SFLT_MAGIC!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayload(
            f"header truncated at byte offset {len(buf)}, needs {HEADER_SIZE} bytes"
        )
    _, version, k, h, w = _HEADER.unpack_from(buf, 0)
    if version != SFLT_VERSION:
        raise UnsupportedVersion(f"version {version} at byte offset 4, expected {SFLT_VERSION}")
    if k < 1 or h < 1 or w < 1:
        raise FormatError(f"zero dimension in header (K={k}, H={h}, W={w}) at byte offset 8")
    n = k * h * w
    expected = HEADER_SIZE + 4 * n
    if len(buf) < expected:
        raise TruncatedPayload(
            f"payload truncated at byte offset {len(buf)}: K={k} H={h} W={w} needs {expected} bytes"
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload at byte offset {expected}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE)
    arr = arr.astype(np.float32).reshape(k, h, w)
    return check_logits(arr)


def read_logits(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_logits(buf)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# label maps (binary PGM, maxval 255)

def check_label_map(labels: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise FormatError(f"label map must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and (arr.min() < 0 or arr.max() > 255):
            raise FormatError("label values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    if num_classes is not None:
        bad = (arr != IGNORE) & (arr >= num_classes)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise FormatError(
                f"label {int(arr[r, c])} at row {r}, col {c} is not a class id below {num_classes}"
            )
    return np.ascontiguousarray(arr)


def write_label_map(labels: np.ndarray, path) -> None:
    arr = check_label_map(labels)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def _pgm_tokens(buf: bytes, count: int):
    """Parse ``count`` integer header tokens; also return the offset after the last."""
    pos = 2
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedPayload(f"PGM header truncated at byte offset {pos}")
        tok = buf[start:pos]
        if not tok.isdigit():
            raise FormatError(f"PGM header token {tok!r} at byte offset {start} is not an integer")
        tokens.append(int(tok))
    return tokens, pos


def decode_label_map(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise BadMagic(f"bad PGM magic {buf[:2]!r} at byte offset 0, expected b'P5'")
    (w, h, maxval), pos = _pgm_tokens(buf, 3)
    if maxval != 255:
        raise UnsupportedMaxval(f"PGM maxval {maxval} is not supported, expected 255")
    if w < 1 or h < 1:
        raise FormatError(f"PGM has zero dimension ({w}x{h})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedPayload(f"PGM header not terminated at byte offset {pos}")
    pos += 1
    expected = pos + w * h
    if len(buf) < expected:
        raise TruncatedPayload(
            f"PGM payload truncated at byte offset {len(buf)}: {w}x{h} needs {expected} bytes"
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after PGM payload at byte offset {expected}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def read_label_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_label_map(buf)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def presence_from_label_map(gt: np.ndarray, background_class: Optional[int] = 0) -> frozenset:
    """Classes occurring at least once, excluding background and ignore."""
    ids = np.unique(np.asarray(gt))
    return frozenset(int(c) for c in ids if c != IGNORE and c != background_class)


# --------------------------------------------------------------------------
# manifest

def foreground_classes(num_classes: int, background_class: Optional[int]) -> list[int]:
    """Global class ids that classifier scores refer to, in score order."""
    return [c for c in range(num_classes) if c != background_class]


@dataclass
class Record:
    image_id: str
    logits_path: Path
    gt_path: Optional[Path] = None
    pseudo_path: Optional[Path] = None
    classifier_scores: Optional[np.ndarray] = None
    presence: Optional[frozenset] = None


@dataclass
class DatasetManifest:
    num_classes: int
    records: list[Record]
    background_class: Optional[int] = 0
    root: Path = field(default_factory=Path)

    @property
    def num_foreground(self) -> int:
        return len(foreground_classes(self.num_classes, self.background_class))

    def record(self, image_id: str) -> Record:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)


@dataclass
class LoadedRecord:
    image_id: str
    logits: np.ndarray
    gt: Optional[np.ndarray] = None
    pseudo: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    presence: Optional[frozenset] = None


def _int_field(obj, key, where, minimum=None, optional=False):
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise ManifestError(f"{where}: missing field {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ManifestError(f"{where}: field {key!r} must be an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ManifestError(f"{where}: field {key!r} must be >= {minimum}, got {val}")
    return val


def _check_image_id(image_id, where):
    if not isinstance(image_id, str) or not image_id:
        raise ManifestError(f"{where}: image_id must be a non-empty string")
    if "/" in image_id or "\\" in image_id or image_id in (".", ".."):
        raise ManifestError(f"{where}: image_id {image_id!r} must not contain path separators")


def parse_manifest(doc: dict, root: Path, check_files: bool = True) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    k = _int_field(doc, "num_classes", "manifest", minimum=1)
    if "background_class" in doc and doc["background_class"] is None:
        bg = None
    else:
        bg = doc.get("background_class", 0)
        if isinstance(bg, bool) or not isinstance(bg, int) or not 0 <= bg < k:
            raise ManifestError(f"manifest: background_class must be a class id in [0, {k}), got {bg!r}")
    n_fg = len(foreground_classes(k, bg))
    raw = doc.get("records")
    if not isinstance(raw, list):
        raise ManifestError("manifest: 'records' must be a list")

    records = []
    seen = set()
    for i, obj in enumerate(raw):
        where = f"record {i}"
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: must be an object")
        image_id = obj.get("image_id")
        _check_image_id(image_id, where)
        where = f"record {image_id!r}"
        if image_id in seen:
            raise ManifestError(f"{where}: duplicate image_id")
        seen.add(image_id)

        def path_of(key, required=False):
            val = obj.get(key)
            if val is None:
                if required:
                    raise ManifestError(f"{where}: missing field {key!r}")
                return None
            if not isinstance(val, str):
                raise ManifestError(f"{where}: {key} must be a string path")
            p = Path(val)
            if not p.is_absolute():
                p = root / p
            if check_files and not p.is_file():
                raise ManifestError(f"{where}: {key} file not found: {p}")
            return p

        scores = obj.get("classifier_scores")
        if scores is not None:
            if not isinstance(scores, list) or not all(
                isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
            ):
                raise ManifestError(f"{where}: classifier_scores must be a list of numbers")
            scores = np.asarray(scores, dtype=np.float64)
            if len(scores) != n_fg:
                raise ManifestError(
                    f"{where}: {len(scores)} classifier scores, manifest declares {n_fg} foreground classes"
                )
            if not np.isfinite(scores).all():
                raise ManifestError(f"{where}: classifier_scores must be finite")
        presence = obj.get("presence")
        if presence is not None:
            if not isinstance(presence, list) or not all(
                isinstance(c, int) and not isinstance(c, bool) for c in presence
            ):
                raise ManifestError(f"{where}: presence must be a list of class ids")
            bad = [c for c in presence if not 0 <= c < k or c == bg]
            if bad:
                raise ManifestError(f"{where}: presence holds non-foreground class ids {bad}")
            presence = frozenset(presence)
        records.append(Record(
            image_id=image_id,
            logits_path=path_of("logits_path", required=True),
            gt_path=path_of("gt_path"),
            pseudo_path=path_of("pseudo_path"),
            classifier_scores=scores,
            presence=presence,
        ))
    return DatasetManifest(num_classes=k, records=records, background_class=bg, root=root)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    return parse_manifest(doc, path.parent, check_files=check_files)


def _rel(p: Optional[Path], root: Path):
    if p is None:
        return None
    try:
        return Path(os.path.relpath(p, root)).as_posix()
    except ValueError:
        return str(p)


def manifest_to_dict(manifest: DatasetManifest, root: Optional[Path] = None) -> dict:
    root = Path(root) if root is not None else manifest.root
    records = []
    for rec in manifest.records:
        obj = {"image_id": rec.image_id, "logits_path": _rel(rec.logits_path, root)}
        if rec.gt_path is not None:
            obj["gt_path"] = _rel(rec.gt_path, root)
        if rec.pseudo_path is not None:
            obj["pseudo_path"] = _rel(rec.pseudo_path, root)
        if rec.classifier_scores is not None:
            obj["classifier_scores"] = [float(s) for s in rec.classifier_scores]
        if rec.presence is not None:
            obj["presence"] = sorted(int(c) for c in rec.presence)
        records.append(obj)
    return {
        "num_classes": manifest.num_classes,
        "background_class": manifest.background_class,
        "records": records,
    }


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = manifest_to_dict(manifest, path.parent)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_record(manifest: DatasetManifest, rec: Record, need: Iterable[str] = ()) -> LoadedRecord:
    """Read every file a record references and check their shapes agree.

    ``need`` lists attributes (``"gt"``, ``"pseudo"``, ``"scores"``) that must
    be present; a missing one raises ManifestError naming the record.
    """
    where = f"record {rec.image_id!r}"
    need = set(need)
    for key, attr in (
        ("gt", "gt_path"), ("pseudo", "pseudo_path"),
        ("scores", "classifier_scores"), ("presence", "presence"),
    ):
        if key in need and getattr(rec, attr) is None:
            raise MissingInput(f"{where}: missing {attr}")
    try:
        logits = read_logits(rec.logits_path)
        if logits.shape[0] != manifest.num_classes:
            raise DimensionMismatch(
                f"logits have {logits.shape[0]} classes, manifest declares {manifest.num_classes}"
            )
        hw = logits.shape[1:]
        maps = {}
        for key, p in (("gt", rec.gt_path), ("pseudo", rec.pseudo_path)):
            if p is None:
                maps[key] = None
                continue
            m = read_label_map(p)
            if m.shape != hw:
                raise DimensionMismatch(
                    f"{key} map is {m.shape[0]}x{m.shape[1]} but logits are "
                    f"{manifest.num_classes}x{hw[0]}x{hw[1]}"
                )
            maps[key] = check_label_map(m, manifest.num_classes)
    except PredFilterError as exc:
        raise type(exc)(f"{where}: {exc}") from None
    return LoadedRecord(
        image_id=rec.image_id,
        logits=logits,
        gt=maps["gt"],
        pseudo=maps["pseudo"],
        scores=rec.classifier_scores,
        presence=rec.presence,
    )


def prediction_path(pred_dir, image_id: str) -> Path:
    return Path(pred_dir) / f"{image_id}.pgm"


def load_dataset(manifest: DatasetManifest, need: Sequence[str] = ()) -> list[LoadedRecord]:
    return [load_record(manifest, rec, need) for rec in manifest.records]
