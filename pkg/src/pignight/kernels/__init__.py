"""Per-pixel kernels with a compiled core and a numpy fallback.

The compiled extension ``_cy`` is used when it was built at install time;
otherwise the pure numpy module ``_py`` is selected at import.  Both expose
the same functions and return identical integer results.  ``use_backend``
switches implementations at runtime (tests and the benchmark use it).
"""

import numpy as np

from pignight.kernels import _py

try:
    from pignight.kernels import _cy
except ImportError:  # extension not built
    _cy = None

_IMPLS = {"python": _py}
if _cy is not None:
    _IMPLS["cython"] = _cy

_impl = _cy if _cy is not None else _py
BACKEND = "cython" if _cy is not None else "python"


def available_backends():
    return sorted(_IMPLS)


def use_backend(name):
    """Select the kernel implementation; returns the previous backend name."""
    global _impl, BACKEND
    if name not in _IMPLS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    previous = BACKEND
    _impl = _IMPLS[name]
    BACKEND = name
    return previous


def _class_flags(ids, num_classes):
    flags = np.zeros(num_classes, dtype=np.uint8)
    for c in ids:
        if 0 <= int(c) < num_classes:
            flags[int(c)] = 1
    return flags


def fuse_labels(uda_prob, nf_prob, selected, small):
    """Hard fusion of two ``(C, H, W)`` probability maps.

    ``selected`` and ``small`` are iterables of class ids.  Returns the fused
    label (int64), the binary fusion mask (uint8) and the per-pixel max
    probability of the branch each pixel came from (float64).
    """
    dtype = np.float32 if uda_prob.dtype == np.float32 and nf_prob.dtype == np.float32 else np.float64
    uda = np.ascontiguousarray(uda_prob, dtype=dtype)
    nf = np.ascontiguousarray(nf_prob, dtype=dtype)
    num_classes = uda.shape[0]
    return _impl.fuse_labels(uda, nf, _class_flags(selected, num_classes), _class_flags(small, num_classes))


def confusion_accumulate(cm, pred, truth, ignore):
    """Accumulate into the int64 matrix ``cm`` in place; -1 or first bad flat index."""
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    truth = np.ascontiguousarray(truth, dtype=np.int64).ravel()
    return _impl.confusion_accumulate(cm, pred, truth, int(ignore))


def class_histogram(label, num_classes, ignore):
    flat = np.ascontiguousarray(label, dtype=np.int64).ravel()
    return _impl.class_histogram(flat, int(num_classes), int(ignore))


def window_mean(img, win):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if win > img.shape[0] or win > img.shape[1]:
        raise ValueError(f"window {win} larger than image {img.shape}")
    return _impl.window_mean(img, int(win))
