"""Per-class day/night similarity scoring and class ranking.

Every backend reports a score where larger means *less* similar.  SSIM and
PSNR are similarities, so their raw values are negated.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from pignight import kernels
from pignight.datamodel import IGNORE

PERCEPTUAL = "perceptual"
SSIM = "ssim"
PSNR = "psnr"
BACKENDS = (PERCEPTUAL, SSIM, PSNR)

PSNR_CAP_DB = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


class EmptySourceLabelError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityBackend:
    """Scoring backend configuration.

    ``feature_extractor`` is an adapter slot for a pretrained perceptual
    network: a callable mapping an ``(N, 3, H, W)`` float64 tensor in
    [-1, 1] to a list of feature maps.  When unset, a fixed seeded stack of
    strided random convolutions is used.
    """

    kind: str = PERCEPTUAL
    window_size: int = 11
    feature_seed: int = 0
    feature_widths: tuple = (16, 32, 64)
    canonical_size: tuple | None = None
    feature_extractor: object = field(default=None, compare=False)
    extractor_name: str = ""

    def __post_init__(self):
        if self.kind not in BACKENDS:
            raise ValueError(f"unknown similarity backend {self.kind!r}; choose from {BACKENDS}")

    @property
    def identity(self):
        """Short description recorded in run manifests."""
        if self.kind == PERCEPTUAL:
            if self.feature_extractor is not None:
                return f"perceptual:{self.extractor_name or 'custom'}"
            widths = "-".join(str(w) for w in self.feature_widths)
            return f"perceptual:random-conv[{widths}]:seed={self.feature_seed}"
        if self.kind == SSIM:
            return f"ssim:uniform{self.window_size}"
        return f"psnr:cap={PSNR_CAP_DB:g}"

    def score(self, a, b):
        return score(a, b, self)


def extract_single_class(x_s, y_s, c):
    """Keep the pixels of class ``c`` and blacken the rest.

    Returns ``None`` when ``c`` does not occur in ``y_s``; such classes are
    skipped for the current iteration.
    """
    x_s = np.asarray(x_s)
    y_s = np.asarray(y_s)
    if x_s.shape[:2] != y_s.shape:
        raise ValueError(f"image extent {x_s.shape[:2]} != label extent {y_s.shape}")
    keep = y_s == c
    if not keep.any():
        return None
    return x_s * keep[..., None]


# --- perceptual --------------------------------------------------------------

@lru_cache(maxsize=8)
def _random_stack(seed, widths):
    gen = torch.Generator().manual_seed(int(seed))
    layers = []
    in_ch = 3
    for out_ch in widths:
        fan_in = in_ch * 9
        weight = torch.randn(out_ch, in_ch, 3, 3, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
        bias = torch.randn(out_ch, generator=gen, dtype=torch.float64) * 0.1
        layers.append((weight, bias))
        in_ch = out_ch
    return tuple(layers)


def _random_features(x, seed, widths):
    feats = []
    for weight, bias in _random_stack(seed, tuple(widths)):
        x = F.relu(F.conv2d(x, weight, bias, stride=2, padding=1))
        feats.append(x)
    return feats


def _to_tensor(images, canonical_size):
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    if canonical_size is not None:
        x = F.interpolate(x, size=tuple(canonical_size), mode="bilinear", align_corners=False)
    return x * 2.0 - 1.0


def _unit_normalize(f, eps=1e-10):
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + eps)


def perceptual_distances(images, reference, backend):
    """Distance of each image in ``images`` to ``reference`` (one batched pass)."""
    with torch.no_grad():
        xs = _to_tensor(images, backend.canonical_size)
        xr = _to_tensor([reference], backend.canonical_size)
        if backend.feature_extractor is not None:
            fa, fr = backend.feature_extractor(xs), backend.feature_extractor(xr)
        else:
            fa = _random_features(xs, backend.feature_seed, backend.feature_widths)
            fr = _random_features(xr, backend.feature_seed, backend.feature_widths)
        total = torch.zeros(xs.shape[0], dtype=torch.float64)
        for a, r in zip(fa, fr):
            diff = _unit_normalize(a.double()) - _unit_normalize(r.double())
            total += (diff * diff).sum(dim=1).mean(dim=(1, 2))
    return total.numpy()


# --- classical ---------------------------------------------------------------

def ssim(a, b, window_size=11):
    """Mean SSIM over channels with a uniform window (valid placements only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    win = min(window_size, a.shape[0], a.shape[1])
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = kernels.window_mean(x, win)
        mu_y = kernels.window_mean(y, win)
        var_x = kernels.window_mean(x * x, win) - mu_x * mu_x
        var_y = kernels.window_mean(y * y, win) - mu_y * mu_y
        cov = kernels.window_mean(x * y, win) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def psnr(a, b):
    """PSNR in dB for unit dynamic range, capped at ``PSNR_CAP_DB``."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def score(a, b, backend):
    """Canonical dissimilarity between two images (higher = less similar)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot score images of different extents {a.shape} and {b.shape}")
    if backend.kind == PERCEPTUAL:
        return float(perceptual_distances([a], b, backend)[0])
    if backend.kind == SSIM:
        return -ssim(a, b, backend.window_size)
    return -psnr(a, b)


def score_many(images, reference, backend):
    if backend.kind == PERCEPTUAL:
        return [float(v) for v in perceptual_distances(images, reference, backend)]
    return [score(im, reference, backend) for im in images]


# --- ranking -----------------------------------------------------------------

@dataclass(frozen=True)
class ClassRanking:
    """Classes ordered from least to most similar (descending score)."""

    entries: tuple

    @property
    def class_ids(self):
        return tuple(c for c, _ in self.entries)

    @property
    def present_classes(self):
        return frozenset(self.class_ids)

    def scores(self):
        return {c: s for c, s in self.entries}

    def position(self, c):
        """1-based rank of class ``c``."""
        return self.class_ids.index(c) + 1

    def __len__(self):
        return len(self.entries)


def ranking_from_scores(scores):
    """Sort ``{class_id: score}`` descending; equal scores order by class id."""
    ordered = sorted(((int(c), float(s)) for c, s in scores.items()), key=lambda e: (-e[1], e[0]))
    return ClassRanking(entries=tuple(ordered))


def rank_classes(x_s, y_s, x_t, backend):
    """Score every class present in ``y_s`` against the night image ``x_t``."""
    x_s = np.asarray(x_s)
    x_t = np.asarray(x_t)
    if x_s.shape != x_t.shape:
        raise ValueError(f"day image {x_s.shape} and night image {x_t.shape} differ in extent")
    classes = [int(c) for c in np.unique(y_s) if c != IGNORE]
    if not classes:
        raise EmptySourceLabelError("empty source label: no non-IGNORE class present")
    singles = [extract_single_class(x_s, y_s, c) for c in classes]
    values = score_many(singles, x_t, backend)
    return ranking_from_scores(dict(zip(classes, values)))


@dataclass(frozen=True)
class AveragedRanking:
    mean_position: dict
    count: dict

    def ordered(self):
        """Class ids sorted by mean position (ties by id)."""
        return sorted(self.mean_position, key=lambda c: (self.mean_position[c], c))


def average_ranking(rankings):
    """Mean 1-based rank position of each class over the rankings it appears in."""
    rankings = list(rankings)
    if not rankings:
        raise ValueError("average_ranking needs at least one ranking")
    totals, counts = {}, {}
    for ranking in rankings:
        for pos, c in enumerate(ranking.class_ids, start=1):
            totals[c] = totals.get(c, 0) + pos
            counts[c] = counts.get(c, 0) + 1
    return AveragedRanking(
        mean_position={c: totals[c] / counts[c] for c in sorted(totals)},
        count={c: counts[c] for c in sorted(counts)},
    )
