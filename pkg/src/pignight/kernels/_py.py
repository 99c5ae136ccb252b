"""Pure numpy implementations of the per-pixel kernels.

These are the reference fallbacks; ``_cy.pyx`` mirrors every signature.
"""

import numpy as np


def fuse_labels(uda_prob, nf_prob, selected, small):
    """Argmax both branches and merge them under the fusion rule.

    Returns ``(label, mask, confidence)`` where ``confidence`` is the max
    probability of whichever branch supplied the pixel.
    """
    uda_label = np.argmax(uda_prob, axis=0)
    nf_label = np.argmax(nf_prob, axis=0)
    selected = selected.astype(bool)
    small = small.astype(bool)
    mask = selected[nf_label] & ~small[uda_label]
    label = np.where(mask, nf_label, uda_label).astype(np.int64)
    conf = np.where(mask, nf_prob.max(axis=0), uda_prob.max(axis=0))
    return label, mask.astype(np.uint8), conf.astype(np.float64)


def confusion_accumulate(cm, pred, truth, ignore):
    """Add the pixel pairs of ``pred``/``truth`` into ``cm`` in place.

    Returns the flat index of the first invalid pixel, or -1.
    """
    num_classes = cm.shape[0]
    valid = truth != ignore
    bad = valid & ((truth < 0) | (truth >= num_classes) | (pred < 0) | (pred >= num_classes))
    if bad.any():
        return int(np.flatnonzero(bad)[0])
    idx = truth[valid] * num_classes + pred[valid]
    cm += np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return -1


def class_histogram(label, num_classes, ignore):
    """Return ``(counts, ignore_count, first_invalid)`` for a flat label array."""
    is_ignore = label == ignore
    bad = ~is_ignore & ((label < 0) | (label >= num_classes))
    first_invalid = int(np.flatnonzero(bad)[0]) if bad.any() else -1
    keep = label[~is_ignore & ~bad]
    counts = np.bincount(keep, minlength=num_classes).astype(np.int64)
    return counts, int(is_ignore.sum()), first_invalid


def window_mean(img, win):
    """Mean over every ``win x win`` window fully inside ``img`` (valid mode)."""
    h, w = img.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    total = (
        integral[win:, win:]
        - integral[:-win, win:]
        - integral[win:, :-win]
        + integral[:-win, :-win]
    )
    return total / float(win * win)
