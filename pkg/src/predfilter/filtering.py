"""Argmax decoding and prediction filtering.

Logit volumes are ``(K, H, W)`` float arrays; predictions are ``(H, W)`` uint8
label maps. Every argmax here breaks ties toward the lowest class id.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyLoss
from .tensor_io import IGNORE, foreground_classes, presence_from_label_map

INFINITE = math.inf


class Fallback(str, enum.Enum):
    UNFILTERED = "unfiltered"
    CLASSIFIER_TOP1 = "classifier-top1"


@dataclass(frozen=True)
class FilterConfig:
    """Settings for hard prediction filtering.

    ``always_allow=None`` means "the background class"; pass an empty set to
    let the classifier decide every class.
    """

    tau: float = 0.0
    always_allow: Optional[frozenset] = None
    strict: bool = True
    fallback: Fallback = Fallback.UNFILTERED

    def resolved_always_allow(self, num_classes: int, background_class: Optional[int]) -> frozenset:
        if self.always_allow is None:
            allow = frozenset() if background_class is None else frozenset({background_class})
        else:
            allow = frozenset(int(c) for c in self.always_allow)
        bad = sorted(c for c in allow if not 0 <= c < num_classes)
        if bad:
            raise ConfigError("always_allow", f"class ids {bad} outside [0, {num_classes})")
        return allow


@dataclass(frozen=True)
class SoftFilterConfig:
    temperature: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature", f"must be > 0 or inf, got {self.temperature}")
        if not math.isfinite(self.shift):
            raise ConfigError("shift", f"must be finite, got {self.shift}")


def _as_volume(logits) -> np.ndarray:
    arr = np.asarray(logits)
    if arr.ndim != 3:
        raise DimensionMismatch(f"logits must be (K, H, W), got shape {arr.shape}")
    return arr


def argmax_predict(logits) -> np.ndarray:
    arr = _as_volume(logits)
    # np.argmax returns the first maximal index, i.e. the lowest class id.
    return np.argmax(arr, axis=0).astype(np.uint8)


def allowed_set_from_classifier(
    scores,
    config: FilterConfig,
    num_classes: int,
    background_class: Optional[int] = 0,
) -> frozenset:
    """Classes that survive thresholding of the classifier logits.

    ``scores[i]`` belongs to the i-th foreground class (background skipped).
    The result is never empty: an empty union falls back per ``config.fallback``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    fg = foreground_classes(num_classes, background_class)
    if scores.shape != (len(fg),):
        raise DimensionMismatch(
            f"{scores.shape[0] if scores.ndim == 1 else scores.shape} classifier scores "
            f"for {len(fg)} foreground classes"
        )
    passed = scores > config.tau if config.strict else scores >= config.tau
    always = config.resolved_always_allow(num_classes, background_class)
    allowed = frozenset(c for c, ok in zip(fg, passed) if ok) | always
    if allowed:
        return allowed
    if config.fallback == Fallback.CLASSIFIER_TOP1 and len(fg):
        return frozenset({fg[int(np.argmax(scores))]}) | always
    return frozenset(range(num_classes))


def _class_mask(allowed, num_classes: int) -> np.ndarray:
    mask = np.zeros(num_classes, dtype=bool)
    ids = [int(c) for c in allowed]
    if not ids:
        raise ValueError("allowed class set is empty")
    bad = [c for c in ids if not 0 <= c < num_classes]
    if bad:
        raise ValueError(f"allowed class ids {sorted(bad)} outside [0, {num_classes})")
    mask[ids] = True
    return mask


def filtered_predict(logits, allowed) -> np.ndarray:
    """Per-pixel argmax over the classes in ``allowed`` only."""
    arr = _as_volume(logits)
    mask = _class_mask(allowed, arr.shape[0])
    if mask.all():
        return argmax_predict(arr)
    restricted = np.where(mask[:, None, None], arr, -np.inf)
    return np.argmax(restricted, axis=0).astype(np.uint8)


def oracle_allowed_set(gt, background_class: Optional[int] = 0) -> frozenset:
    present = presence_from_label_map(gt, background_class)
    if background_class is not None:
        present = present | {background_class}
    return present


def oracle_filter_predict(logits, gt, background_class: Optional[int] = 0) -> np.ndarray:
    arr = _as_volume(logits)
    gt = np.asarray(gt)
    if gt.shape != arr.shape[1:]:
        raise DimensionMismatch(f"gt is {gt.shape}, logits are {arr.shape}")
    allowed = oracle_allowed_set(gt, background_class)
    if not allowed:
        # all-ignore gt without a background class: nothing to constrain to
        return argmax_predict(arr)
    return filtered_predict(arr, allowed)


def soft_weights(scores, config: SoftFilterConfig) -> np.ndarray:
    """Log of the per-class classifier weights ``sigmoid(T * (score - shift))``.

    With ``T = inf`` the weight is a step function: 1 above the shift, 0 below
    it and 0.5 exactly at it.
    """
    g = np.asarray(scores, dtype=np.float64)
    if math.isinf(config.temperature):
        return np.where(g > config.shift, 0.0, np.where(g < config.shift, -np.inf, math.log(0.5)))
    z = config.temperature * (g - config.shift)
    return -np.logaddexp(0.0, -z)


def log_softmax(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def soft_filter_predict(
    logits,
    scores,
    config: SoftFilterConfig,
    background_class: Optional[int] = 0,
) -> np.ndarray:
    """Argmax of segmentation probability times classifier probability.

    Computed in log space so that vanishing probabilities cannot tie with
    filtered-out classes. The background class, if any, has weight 1.
    """
    arr = _as_volume(logits)
    k = arr.shape[0]
    fg = foreground_classes(k, background_class)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(fg),):
        raise DimensionMismatch(f"{scores.size} classifier scores for {len(fg)} foreground classes")
    log_w = np.zeros(k)
    log_w[fg] = soft_weights(scores, config)
    combined = log_softmax(arr) + log_w[:, None, None]
    return np.argmax(combined, axis=0).astype(np.uint8)


def allowed_mask_for_loss(scores, tau: float, num_classes: int, background_class: Optional[int] = 0) -> np.ndarray:
    """Per-class mask ``score >= tau``; background is always kept."""
    mask = np.ones(num_classes, dtype=bool)
    fg = foreground_classes(num_classes, background_class)
    mask[fg] = np.asarray(scores, dtype=np.float64) >= tau
    return mask


class MaskedLoss(NamedTuple):
    loss: float
    pixels: int
    infeasible: int


def masked_cross_entropy(logits, gt, allowed_mask) -> MaskedLoss:
    """Mean cross-entropy with filtered classes removed from the partition function.

    Pixels whose label is itself filtered out cannot be scored; they are
    skipped and counted in ``infeasible``.
    """
    arr = np.asarray(_as_volume(logits), dtype=np.float64)
    gt = np.asarray(gt)
    if gt.shape != arr.shape[1:]:
        raise DimensionMismatch(f"gt is {gt.shape}, logits are {arr.shape}")
    mask = np.asarray(allowed_mask, dtype=bool)
    if mask.shape != (arr.shape[0],):
        raise DimensionMismatch(f"allowed mask has {mask.size} entries for {arr.shape[0]} classes")
    valid = gt != IGNORE
    labels = gt[valid].astype(np.int64)
    feasible = mask[labels]
    n_inf = int((~feasible).sum())
    labels = labels[feasible]
    if labels.size == 0 or not mask.any():
        raise EmptyLoss("no pixel has a non-ignore label inside the allowed class set")
    pix = arr[:, valid][:, feasible]  # (K, N)
    pix = np.where(mask[:, None], pix, -np.inf)
    top = pix.max(axis=0)
    log_z = top + np.log(np.exp(pix - top).sum(axis=0))
    picked = pix[labels, np.arange(labels.size)]
    return MaskedLoss(float(np.mean(log_z - picked)), int(labels.size), n_inf)
