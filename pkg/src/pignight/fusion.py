"""Similarity-guided fusion of the UDA and night-branch pseudo-labels.

The ``k`` least-similar classes of the current ranking are taken from the
night branch, except where the UDA branch predicts a small-object class.
"""

from dataclasses import dataclass, field

import numpy as np

from pignight import kernels

DEFAULT_CONFIDENCE = 0.968


@dataclass(frozen=True)
class FusionConfig:
    k: int = 4
    small_classes: frozenset = field(default_factory=frozenset)
    confidence_threshold: float = DEFAULT_CONFIDENCE

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        object.__setattr__(self, "small_classes", frozenset(int(c) for c in self.small_classes))

    def validate(self, num_classes):
        if self.k > num_classes:
            raise ValueError(f"k={self.k} exceeds the class count {num_classes}")
        bad = [c for c in self.small_classes if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"small-object classes {sorted(bad)} outside [0, {num_classes})")


@dataclass(frozen=True)
class FusedPseudoLabel:
    label: np.ndarray
    fusion_mask: np.ndarray
    weight: np.ndarray
    selected: frozenset
    confident_ratio: float


def top_k_classes(ranking, k):
    return frozenset(ranking.class_ids[: max(0, int(k))])


def build_fusion_mask(nf_label, uda_label, selected, small_classes):
    """1 where the night branch predicts a selected class and UDA predicts no small object."""
    nf_label = np.asarray(nf_label)
    uda_label = np.asarray(uda_label)
    if nf_label.shape != uda_label.shape:
        raise ValueError(f"label extents differ: {nf_label.shape} vs {uda_label.shape}")
    take_nf = np.isin(nf_label, list(selected))
    keep_uda = np.isin(uda_label, list(small_classes))
    return (take_nf & ~keep_uda).astype(np.uint8)


def quality_weight(confidence, threshold):
    """Per-pixel weight: 1 when confident, otherwise the image's confident-pixel ratio."""
    confident = confidence >= threshold
    ratio = float(confident.mean()) if confident.size else 0.0
    return np.where(confident, 1.0, ratio), ratio


def _as_numpy(pred):
    if hasattr(pred, "detach"):
        pred = pred.detach().cpu().numpy()
    return np.asarray(pred)


def fuse(uda_pred, nf_pred, ranking, config):
    """Fuse two ``(C, H, W)`` soft predictions into one hard pseudo-label."""
    uda_pred = _as_numpy(uda_pred)
    nf_pred = _as_numpy(nf_pred)
    if uda_pred.shape[0] != nf_pred.shape[0]:
        raise ValueError(f"class count mismatch: UDA {uda_pred.shape[0]} vs NFNet {nf_pred.shape[0]}")
    if uda_pred.shape != nf_pred.shape:
        raise ValueError(f"prediction extents differ: {uda_pred.shape} vs {nf_pred.shape}")
    config.validate(uda_pred.shape[0])
    selected = top_k_classes(ranking, config.k)
    label, mask, conf = kernels.fuse_labels(uda_pred, nf_pred, sorted(selected), sorted(config.small_classes))
    weight, ratio = quality_weight(conf, config.confidence_threshold)
    return FusedPseudoLabel(label=label, fusion_mask=mask, weight=weight,
                            selected=selected, confident_ratio=ratio)
