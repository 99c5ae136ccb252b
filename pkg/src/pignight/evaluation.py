"""Inference with the UDA student and IoU metrics."""

from dataclasses import dataclass

import numpy as np

from pignight import kernels
from pignight.datamodel import IGNORE
from pignight.network import forward


class ConfusionMatrix:
    """``C x C`` counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.ascontiguousarray(counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"confusion matrix must be {num_classes}x{num_classes}")

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class IoUReport:
    iou: tuple  # float or None (undefined) per class
    miou: float
    defined: frozenset

    def as_dict(self, class_names=None):
        names = class_names or [str(c) for c in range(len(self.iou))]
        return {"mIoU": self.miou, "IoU": {names[c]: v for c, v in enumerate(self.iou)}}


def infer(uda_student, image):
    """Hard prediction from the UDA student; ties go to the lowest class id."""
    return np.argmax(forward(uda_student, image), axis=0).astype(np.int64)


def accumulate(cm, pred, truth):
    """Return a new matrix with the non-IGNORE pixel pairs of one image added."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction extent {pred.shape} != truth extent {truth.shape}")
    out = ConfusionMatrix(cm.num_classes, cm.counts.copy())
    bad = kernels.confusion_accumulate(out.counts, pred, truth, IGNORE)
    if bad >= 0:
        row, col = divmod(bad, truth.shape[1]) if truth.ndim == 2 else (bad, 0)
        raise ValueError(
            f"invalid class id at pixel (row={row}, col={col}): truth={int(truth.flat[bad])}, "
            f"pred={int(pred.flat[bad])}, expected < {cm.num_classes}"
        )
    return out


def compute_iou(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    diag = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    iou = []
    defined = set()
    for c in range(counts.shape[0]):
        if denom[c] == 0:
            iou.append(None)
        else:
            iou.append(float(diag[c] / denom[c]))
            defined.add(c)
    values = [v for v in iou if v is not None]
    miou = float(np.mean(values)) if values else 0.0
    return IoUReport(iou=tuple(iou), miou=miou, defined=frozenset(defined))


def evaluate(uda_student, manifest):
    """Confusion matrix of the UDA student over a labeled manifest."""
    cm = ConfusionMatrix(manifest.num_classes)
    for i in range(len(manifest)):
        image, label = manifest.read(i)
        cm = accumulate(cm, infer(uda_student, image), label)
    return cm


def format_iou_table(report, class_names):
    """Per-class IoU (in percent) as a two-row text table followed by mIoU."""
    names = [n[:12] for n in class_names]
    cells = ["-" if v is None else f"{100 * v:.2f}" for v in report.iou]
    widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
    names.append("mIoU")
    cells.append(f"{100 * report.miou:.2f}")
    widths.append(max(4, len(cells[-1])))
    head = " | ".join(n.rjust(w) for n, w in zip(names, widths))
    row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    return head + "\n" + row + "\n"
