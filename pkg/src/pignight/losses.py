"""Cross-entropy terms and their weighted sum.

All terms are negative log-likelihoods averaged over non-IGNORE pixels;
pixel weights scale individual terms but do not change the divisor.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from pignight.datamodel import IGNORE
from pignight.network import image_to_tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class LossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    uda: float = 1.0
    prompt: float = 1.0
    augment: float = 1.0

    def __post_init__(self):
        for name in ("uda", "prompt", "augment"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    uda: float
    prompt: float
    augment: float
    total: torch.Tensor
    pixel_counts: dict = field(default_factory=dict)

    @property
    def total_value(self):
        return float(self.total.detach())

    def as_dict(self):
        return {"L_UDA": self.uda, "L_P": self.prompt, "L_A": self.augment, "total": self.total_value}


def _as_label_tensor(target):
    if isinstance(target, torch.Tensor):
        return target.long()
    return torch.from_numpy(np.ascontiguousarray(target, dtype=np.int64))


def _batch(pred, target, weight):
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    target = _as_label_tensor(target)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if weight is not None:
        weight = weight if isinstance(weight, torch.Tensor) else torch.from_numpy(np.asarray(weight, dtype=np.float64))
        if weight.dim() == 2:
            weight = weight.unsqueeze(0)
        weight = weight.to(pred.dtype)
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} disagree")
    return pred, target, weight


def valid_pixels(target):
    return int((np.asarray(target) != IGNORE).sum())


def cross_entropy(pred, target, pixel_weight=None):
    """Mean of ``-w * log p[target]`` over non-IGNORE pixels.

    ``pred`` holds probabilities, ``(C, H, W)`` or ``(N, C, H, W)``.  A target
    with no valid pixel yields 0 and logs a warning.
    """
    pred, target, weight = _batch(pred, target, pixel_weight)
    valid = target != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        log.warning("cross_entropy: every target pixel is IGNORE; loss defined as 0")
        return pred.sum() * 0.0
    num_classes = pred.shape[1]
    if int(target[valid].max()) >= num_classes or int(target[valid].min()) < 0:
        raise ValueError("target contains class ids outside the prediction's classes")
    safe = torch.where(valid, target, torch.zeros_like(target))
    picked = torch.gather(pred, 1, safe.unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp_min(LOG_CLAMP))
    if weight is not None:
        nll = nll * weight
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    return nll.sum() / n_valid


def _predict(net, image):
    dtype = next(net.parameters()).dtype
    x = image if isinstance(image, torch.Tensor) else image_to_tensor(image, dtype)
    return net(x)


def prompt_loss(nf_student, x_p, y_p):
    """Supervised loss of the night branch on a labeled prompt image."""
    return cross_entropy(_predict(nf_student, x_p), y_p)


def augment_loss(nf_student, x_am, y_a, quality_weight):
    """Weighted loss of the night branch on a mixed (and possibly masked) image."""
    return cross_entropy(_predict(nf_student, x_am), y_a, quality_weight)


def uda_loss(uda_student, source, mixed=None):
    """Source ground-truth term plus the optional mixed-image pseudo-label term.

    ``source`` is ``(x_s, y_s)``; ``mixed`` is ``(x_mix, y_mix, weight)``.
    """
    x_s, y_s = source
    loss = cross_entropy(_predict(uda_student, x_s), y_s)
    if mixed is not None:
        x_mix, y_mix, w_mix = mixed
        loss = loss + cross_entropy(_predict(uda_student, x_mix), y_mix, w_mix)
    return loss


def total_loss(l_uda, l_prompt, l_augment, weights, pixel_counts=None):
    """Weighted sum of the three components, as a :class:`LossReport`."""
    parts = {"L_UDA": l_uda, "L_P": l_prompt, "L_A": l_augment}
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise LossError(f"non-finite loss component {name}: {float(value)}")
    total = weights.uda * l_uda + weights.prompt * l_prompt + weights.augment * l_augment
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total), dtype=torch.float64)
    return LossReport(
        uda=float(torch.as_tensor(l_uda).detach()), prompt=float(torch.as_tensor(l_prompt).detach()),
        augment=float(torch.as_tensor(l_augment).detach()),
        total=total, pixel_counts=dict(pixel_counts or {}),
    )
