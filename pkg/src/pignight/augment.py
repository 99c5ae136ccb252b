"""Image/label mixing and masking: prompt half-split mixing, alternating
patch masks and cross-domain class mixing.

All randomness comes from an explicit ``numpy.random.Generator``.
"""

import math
from dataclasses import dataclass

import numpy as np

from pignight.datamodel import IGNORE


@dataclass(frozen=True)
class PromptMixResult:
    image: np.ndarray
    mask: np.ndarray
    side: int


@dataclass(frozen=True)
class PatchMaskSpec:
    patch_h: int = 16
    patch_w: int = 16
    ratio: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch sizes must be positive")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"masking ratio must lie in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class AlternationSchedule:
    """Masking participates once every ``period`` iterations.

    ``literal`` evaluates the printed formula
    ``(MOD(t, 1/beta) + MOD(t, 1/beta) * M) * x`` instead; it is kept only
    for comparison, since it blanks the whole image whenever the modulus is 0.
    """

    beta: float = 0.5
    literal: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"participation rate must lie in (0, 1], got {self.beta}")

    @property
    def period(self):
        return max(1, int(round(1.0 / self.beta)))

    @property
    def effective_rate(self):
        return 1.0 / self.period

    def applies(self, t):
        return int(t) % self.period == 0


def _check_same_extent(a, b, what):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise ValueError(f"{what}: extents differ, {np.shape(a)[:2]} vs {np.shape(b)[:2]}")


def half_split_mask(height, width, side):
    """Left half (columns ``[0, W/2)``) set to ``side``, right half to ``1 - side``."""
    if width % 2:
        raise ValueError(f"width must be even for a half split, got {width}")
    mask = np.empty((height, width), dtype=np.uint8)
    mask[:, : width // 2] = side
    mask[:, width // 2:] = 1 - side
    return mask


def prompt_mixture(x_p, x_t, rng):
    """Put the prompt image on a random half and the target image on the other."""
    _check_same_extent(x_p, x_t, "prompt mixture")
    if np.shape(x_p) != np.shape(x_t):
        raise ValueError("prompt mixture: channel layouts differ")
    h, w = np.shape(x_p)[:2]
    side = int(rng.integers(0, 2))
    mask = half_split_mask(h, w, side)
    m = mask[..., None].astype(np.float64)
    mixed = m * x_p + (1.0 - m) * x_t
    return PromptMixResult(image=mixed, mask=mask, side=side)


def mix_labels(y_p, y_fused, mask):
    """Apply a prompt-mixture mask to labels: prompt labels where the mask is 1."""
    _check_same_extent(y_p, mask, "mix_labels")
    _check_same_extent(y_fused, mask, "mix_labels")
    return np.where(np.asarray(mask) == 1, y_p, y_fused).astype(np.int64)


def mix_weights(mask, weight):
    """Unit weight on prompt pixels, pseudo-label weight elsewhere."""
    return np.where(np.asarray(mask) == 1, 1.0, weight)


def patch_mask(height, width, spec):
    """Patch-constant keep mask: a patch is kept (1) when its uniform draw exceeds the ratio."""
    if height % spec.patch_h or width % spec.patch_w:
        raise ValueError(
            f"{height}x{width} is not tiled by {spec.patch_h}x{spec.patch_w} patches"
        )
    rng = np.random.default_rng(spec.seed)
    grid = (height // spec.patch_h, width // spec.patch_w)
    # open interval (0, 1) so ratio 0 keeps and ratio 1 masks every patch
    z = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=grid)
    keep = (z > spec.ratio).astype(np.uint8)
    return np.repeat(np.repeat(keep, spec.patch_h, axis=0), spec.patch_w, axis=1)


def alternate_apply(x_pm, mask, t, schedule, fill=0.0):
    """Mask ``x_pm`` on scheduled iterations and pass it through otherwise."""
    _check_same_extent(x_pm, mask, "alternate mask")
    x_pm = np.asarray(x_pm)
    keep = np.asarray(mask)[..., None]
    if schedule.literal:
        m = math.fmod(float(t), 1.0 / schedule.beta)
        return (m + m * keep) * x_pm
    if not schedule.applies(t):
        return x_pm.copy()
    return np.where(keep == 1, x_pm, fill)


def class_mix_mask(y_s, rng):
    """Binary mask of a random half (rounded up) of the classes present in ``y_s``."""
    classes = np.array([c for c in np.unique(y_s) if c != IGNORE], dtype=np.int64)
    if classes.size == 0:
        raise ValueError("class mixing needs at least one labeled class in the source")
    n_keep = (classes.size + 1) // 2
    chosen = rng.choice(classes, size=n_keep, replace=False)
    return np.isin(y_s, chosen).astype(np.uint8), frozenset(int(c) for c in chosen)


def cross_domain_mix(x_s, y_s, x_t, y_pseudo, rng, return_mask=False):
    """Paste half of the source classes (pixels and labels) onto the target pair."""
    _check_same_extent(x_s, x_t, "cross-domain mix")
    _check_same_extent(y_s, y_pseudo, "cross-domain mix")
    mask, _ = class_mix_mask(y_s, rng)
    image = np.where(mask[..., None] == 1, x_s, x_t)
    label = np.where(mask == 1, y_s, y_pseudo).astype(np.int64)
    if return_mask:
        return image, label, mask
    return image, label
