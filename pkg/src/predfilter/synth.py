"""Deterministic synthetic segmentation scenarios.

Each image is a background canvas with axis-aligned rectangular objects.
Logits favour the true class. Boundary pixels are ambiguous between their
own class and the classes of their 4-neighbours, so boundary errors never
involve a class absent from the image. The body of an object of class
``a`` in a confusion pair ``(a, b, rho)`` is, pixel by pixel with probability
``rho``, pushed toward ``b``. The top rows of each object (its "head") and
its boundary are never confused. Classifier scores put each class on the
correct side of zero with probability ``q``.

Randomness: every image owns three PCG64 streams seeded with
``SeedSequence(seed, spawn_key=(image_index, stream))``, stream 0 for the
layout, 1 for logits and 2 for classifier scores. Output does not depend on
worker scheduling, and changing ``q`` leaves layout and logits untouched.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .parallel import parallel_map
from .tensor_io import (
    IGNORE,
    DatasetManifest,
    Record,
    foreground_classes,
    presence_from_label_map,
    write_label_map,
    write_logits,
    write_manifest,
)

BACKGROUND = 0

# generator constants; the regression anchors in the test-suite depend on them
OBJECT_EXTENT = (0.2, 0.6)      # object side as a fraction of the image side
HEAD_FRACTION = 0.25            # top share of an object's rows kept discriminative
TRUE_MARGIN = 2.0               # true-class boost (noise is U[0, 1))
NEIGHBOUR_MARGIN = 1.6          # boost for a 4-neighbour's class on boundary pixels
CONFUSION_BOOST = (0.25, 1.0)   # confusing class sits this far above the true class
SCORE_MARGIN = (4.0, 8.0)       # |classifier logit|, uniform
CORE_SHRINK = 0.25              # DiscriminativeCore trims this share off each side
DILATE_FRACTION = 0.15          # Dilated grows each side by this share (at least 1 px)

LAYOUT, LOGITS, CLASSIFIER = 0, 1, 2


class PseudoStyle(str, enum.Enum):
    DISCRIMINATIVE_CORE = "discriminative-core"
    DILATED = "dilated"


@dataclass
class ScenarioConfig:
    seed: int = 0
    num_images: int = 16
    num_classes: int = 6
    image_size: tuple = (64, 64)
    confusion_pairs: list = field(default_factory=list)
    classifier_quality: float = 1.0
    objects_per_image: tuple = (1, 3)
    pseudo_style: PseudoStyle = PseudoStyle.DISCRIMINATIVE_CORE

    def __post_init__(self):
        self.validate()

    def validate(self):
        def is_int(v):
            return isinstance(v, (int, np.integer)) and not isinstance(v, bool)

        if not is_int(self.seed) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an integer in [0, 2**64)")
        if not is_int(self.num_images) or self.num_images < 0:
            raise ConfigError("num_images", f"must be a non-negative integer, got {self.num_images!r}")
        if not is_int(self.num_classes) or not 2 <= self.num_classes <= 255:
            raise ConfigError("num_classes", f"must be an integer in [2, 255], got {self.num_classes!r}")
        size = tuple(self.image_size)
        if len(size) != 2 or not all(is_int(s) and s >= 1 for s in size):
            raise ConfigError("image_size", f"must be two positive integers (H, W), got {self.image_size!r}")
        self.image_size = (int(size[0]), int(size[1]))
        pairs = []
        for p in self.confusion_pairs:
            if len(p) != 3:
                raise ConfigError("confusion_pairs", f"entries are (a, b, strength), got {p!r}")
            a, b, rho = p
            for c in (a, b):
                if not is_int(c) or not 1 <= c < self.num_classes:
                    raise ConfigError("confusion_pairs", f"class {c!r} is not a foreground class id")
            if a == b:
                raise ConfigError("confusion_pairs", f"pair ({a}, {b}) confuses a class with itself")
            if not isinstance(rho, (int, float)) or not 0.0 <= rho <= 1.0:
                raise ConfigError("confusion_pairs", f"strength {rho!r} outside [0, 1]")
            pairs.append((int(a), int(b), float(rho)))
        self.confusion_pairs = pairs
        q = self.classifier_quality
        if not isinstance(q, (int, float)) or isinstance(q, bool) or not 0.0 <= q <= 1.0:
            raise ConfigError("classifier_quality", f"must be in [0, 1], got {q!r}")
        self.classifier_quality = float(q)
        opi = tuple(self.objects_per_image)
        if len(opi) != 2 or not all(is_int(v) for v in opi) or not 0 <= opi[0] <= opi[1]:
            raise ConfigError("objects_per_image", f"must be a range (min, max) with 0 <= min <= max, got {self.objects_per_image!r}")
        self.objects_per_image = (int(opi[0]), int(opi[1]))
        try:
            self.pseudo_style = PseudoStyle(self.pseudo_style)
        except ValueError:
            raise ConfigError("pseudo_style", f"must be one of {[s.value for s in PseudoStyle]}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["objects_per_image"] = list(self.objects_per_image)
        d["confusion_pairs"] = [list(p) for p in self.confusion_pairs]
        d["pseudo_style"] = self.pseudo_style.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index, stream))))


def boundary_mask(gt: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different label."""
    b = np.zeros(gt.shape, dtype=bool)
    dv = gt[1:, :] != gt[:-1, :]
    dh = gt[:, 1:] != gt[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def _layout(config: ScenarioConfig, index: int):
    rng = _rng(config.seed, index, LAYOUT)
    h, w = config.image_size
    lo, hi = config.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    fg = foreground_classes(config.num_classes, BACKGROUND)
    gt = np.full((h, w), BACKGROUND, dtype=np.uint8)
    owner = np.full((h, w), -1, dtype=np.int64)
    rects = []
    for j in range(n):
        cls = fg[int(rng.integers(0, len(fg)))]
        oh = int(rng.integers(max(1, round(OBJECT_EXTENT[0] * h)), max(1, round(OBJECT_EXTENT[1] * h)) + 1))
        ow = int(rng.integers(max(1, round(OBJECT_EXTENT[0] * w)), max(1, round(OBJECT_EXTENT[1] * w)) + 1))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        gt[top:top + oh, left:left + ow] = cls
        owner[top:top + oh, left:left + ow] = j
        rects.append((cls, top, left, oh, ow))
    return gt, owner, rects


def _logits(config: ScenarioConfig, index: int, gt, owner, rects) -> np.ndarray:
    rng = _rng(config.seed, index, LOGITS)
    k = config.num_classes
    h, w = gt.shape
    logits = rng.random((k, h, w))
    u = rng.random((h, w))
    boost = rng.uniform(CONFUSION_BOOST[0], CONFUSION_BOOST[1], (h, w))

    interior = ~boundary_mask(gt)
    rows = np.arange(h)[:, None]
    head = np.zeros((h, w), dtype=bool)
    for j, (_, top, _, oh, _) in enumerate(rects):
        head_rows = max(1, math.ceil(HEAD_FRACTION * oh))
        head |= (owner == j) & (rows < top + head_rows)

    labels = gt.astype(np.int64)
    np.put_along_axis(
        logits, labels[None], np.take_along_axis(logits, labels[None], axis=0) + TRUE_MARGIN, axis=0
    )
    neighbour = np.zeros((k, h, w), dtype=bool)
    rr, cc = np.indices((h, w))
    for nb, valid in (
        (labels[:-1, :], (slice(1, None), slice(None))),
        (labels[1:, :], (slice(None, -1), slice(None))),
        (labels[:, :-1], (slice(None), slice(1, None))),
        (labels[:, 1:], (slice(None), slice(None, -1))),
    ):
        diff = nb != labels[valid]
        neighbour[nb[diff], rr[valid][diff], cc[valid][diff]] = True
    logits[neighbour] += NEIGHBOUR_MARGIN
    body = interior & ~head
    for a, b, rho in config.confusion_pairs:
        m = body & (gt == a) & (u < rho)
        logits[b][m] = logits[a][m] + boost[m]
    return logits.astype(np.float32)


def _pseudo(config: ScenarioConfig, gt, owner, rects) -> np.ndarray:
    h, w = gt.shape
    pseudo = np.full((h, w), BACKGROUND, dtype=np.uint8)
    for j, (cls, top, left, oh, ow) in enumerate(rects):
        if config.pseudo_style == PseudoStyle.DISCRIMINATIVE_CORE:
            visible = owner == j
            dt, dl = int(CORE_SHRINK * oh), int(CORE_SHRINK * ow)
            core = np.zeros((h, w), dtype=bool)
            core[top + dt:top + oh - dt, left + dl:left + ow - dl] = True
            pseudo[visible & core] = cls
            pseudo[visible & ~core] = IGNORE
        else:
            gh = max(1, round(DILATE_FRACTION * oh))
            gw = max(1, round(DILATE_FRACTION * ow))
            pseudo[max(0, top - gh):top + oh + gh, max(0, left - gw):left + ow + gw] = cls
    return pseudo


def _scores(config: ScenarioConfig, index: int, presence) -> np.ndarray:
    rng = _rng(config.seed, index, CLASSIFIER)
    fg = foreground_classes(config.num_classes, BACKGROUND)
    u = rng.random(len(fg))
    margin = rng.uniform(SCORE_MARGIN[0], SCORE_MARGIN[1], len(fg))
    sign = np.array([1.0 if c in presence else -1.0 for c in fg])
    sign = np.where(u < config.classifier_quality, sign, -sign)
    return sign * margin


def generate_image(config: ScenarioConfig, index: int) -> dict:
    """All arrays for one image: gt, logits, pseudo, scores, presence."""
    gt, owner, rects = _layout(config, index)
    presence = presence_from_label_map(gt, BACKGROUND)
    return {
        "image_id": image_id(index),
        "gt": gt,
        "logits": _logits(config, index, gt, owner, rects),
        "pseudo": _pseudo(config, gt, owner, rects),
        "scores": _scores(config, index, presence),
        "presence": presence,
    }


def image_id(index: int) -> str:
    return f"img{index:05d}"


def _write_one(args) -> Record:
    config, index, out_dir = args
    img = generate_image(config, index)
    iid = img["image_id"]
    paths = {
        "logits": out_dir / "logits" / f"{iid}.sflt",
        "gt": out_dir / "gt" / f"{iid}.pgm",
        "pseudo": out_dir / "pseudo" / f"{iid}.pgm",
    }
    write_logits(img["logits"], paths["logits"])
    write_label_map(img["gt"], paths["gt"])
    write_label_map(img["pseudo"], paths["pseudo"])
    return Record(
        image_id=iid,
        logits_path=paths["logits"],
        gt_path=paths["gt"],
        pseudo_path=paths["pseudo"],
        classifier_scores=img["scores"],
        presence=img["presence"],
    )


def generate_scenario(config: ScenarioConfig, out_dir, workers: int = 1) -> DatasetManifest:
    """Write a scenario to ``out_dir`` and return its manifest.

    Layout: ``logits/*.sflt``, ``gt/*.pgm``, ``pseudo/*.pgm``,
    ``manifest.json`` and ``scenario.json`` (the config echoed back).
    """
    out_dir = Path(out_dir)
    for sub in ("logits", "gt", "pseudo"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    jobs = [(config, i, out_dir) for i in range(config.num_images)]
    records = parallel_map(_write_one, jobs, workers)
    manifest = DatasetManifest(
        num_classes=config.num_classes, records=records, background_class=BACKGROUND, root=out_dir
    )
    write_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "scenario.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n", encoding="utf-8")
    return manifest


def perfect_classifier_scores(
    presence, num_fg: int, margin: float = 10.0, background_class: Optional[int] = 0
) -> np.ndarray:
    """+margin for present classes, -margin for absent ones."""
    if not margin > 0:
        raise ConfigError("margin", f"must be > 0, got {margin}")
    fg = foreground_classes(num_fg + (background_class is not None), background_class)
    return np.array([margin if c in presence else -margin for c in fg], dtype=np.float64)
