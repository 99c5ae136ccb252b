# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels; signatures match ``pignight.kernels._py``."""

import numpy as np
cimport cython
from cython cimport floating


def fuse_labels(floating[:, :, ::1] uda_prob, floating[:, :, ::1] nf_prob,
                const unsigned char[::1] selected, const unsigned char[::1] small):
    cdef Py_ssize_t C = uda_prob.shape[0]
    cdef Py_ssize_t H = uda_prob.shape[1]
    cdef Py_ssize_t W = uda_prob.shape[2]
    cdef Py_ssize_t c, i, j
    cdef Py_ssize_t ua, na
    cdef double v

    label_arr = np.empty((H, W), dtype=np.int64)
    mask_arr = np.empty((H, W), dtype=np.uint8)
    conf_arr = np.empty((H, W), dtype=np.float64)
    cdef long long[:, ::1] label = label_arr
    cdef unsigned char[:, ::1] mask = mask_arr
    cdef double[:, ::1] conf = conf_arr
    # running per-column maxima of the current row; classes are scanned in
    # ascending order with strict '>' so ties keep the lowest id
    cdef double[::1] ub = np.empty(W, dtype=np.float64)
    cdef double[::1] nb = np.empty(W, dtype=np.float64)
    cdef Py_ssize_t[::1] ui = np.empty(W, dtype=np.intp)
    cdef Py_ssize_t[::1] ni = np.empty(W, dtype=np.intp)

    with nogil:
        for i in range(H):
            for j in range(W):
                ub[j] = uda_prob[0, i, j]
                nb[j] = nf_prob[0, i, j]
                ui[j] = 0
                ni[j] = 0
            for c in range(1, C):
                for j in range(W):
                    v = uda_prob[c, i, j]
                    if v > ub[j]:
                        ub[j] = v
                        ui[j] = c
                    v = nf_prob[c, i, j]
                    if v > nb[j]:
                        nb[j] = v
                        ni[j] = c
            for j in range(W):
                ua = ui[j]
                na = ni[j]
                if selected[na] and not small[ua]:
                    mask[i, j] = 1
                    label[i, j] = na
                    conf[i, j] = nb[j]
                else:
                    mask[i, j] = 0
                    label[i, j] = ua
                    conf[i, j] = ub[j]
    return label_arr, mask_arr, conf_arr


def confusion_accumulate(long long[:, ::1] cm, const long long[::1] pred,
                         const long long[::1] truth, long long ignore):
    cdef Py_ssize_t n = truth.shape[0]
    cdef Py_ssize_t C = cm.shape[0]
    cdef Py_ssize_t k
    cdef long long t, p
    # validate first so a bad map leaves cm untouched
    for k in range(n):
        t = truth[k]
        if t == ignore:
            continue
        p = pred[k]
        if t < 0 or t >= C or p < 0 or p >= C:
            return k
    with nogil:
        for k in range(n):
            t = truth[k]
            if t != ignore:
                cm[t, pred[k]] += 1
    return -1


def class_histogram(const long long[::1] label, Py_ssize_t num_classes, long long ignore):
    cdef Py_ssize_t n = label.shape[0]
    cdef Py_ssize_t k
    cdef long long v
    cdef long long n_ignore = 0
    cdef Py_ssize_t first_invalid = -1
    counts_arr = np.zeros(num_classes, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    for k in range(n):
        v = label[k]
        if v == ignore:
            n_ignore += 1
        elif v < 0 or v >= num_classes:
            if first_invalid < 0:
                first_invalid = k
        else:
            counts[v] += 1
    return counts_arr, int(n_ignore), int(first_invalid)


def window_mean(const double[:, ::1] img, Py_ssize_t win):
    cdef Py_ssize_t H = img.shape[0]
    cdef Py_ssize_t W = img.shape[1]
    cdef Py_ssize_t i, j
    cdef double row_sum
    cdef double norm = 1.0 / <double>(win * win)
    integral_arr = np.zeros((H + 1, W + 1), dtype=np.float64)
    out_arr = np.empty((H - win + 1, W - win + 1), dtype=np.float64)
    cdef double[:, ::1] S = integral_arr
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(H):
            row_sum = 0.0
            for j in range(W):
                row_sum = row_sum + img[i, j]
                S[i + 1, j + 1] = S[i, j + 1] + row_sum
        for i in range(H - win + 1):
            for j in range(W - win + 1):
                out[i, j] = (S[i + win, j + win] - S[i, j + win]
                             - S[i + win, j] + S[i, j]) * norm
    return out_arr
