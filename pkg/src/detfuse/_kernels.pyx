# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Must stay bit-identical to ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

cdef enum:
    NBINS = 256


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, union, area_a, area_b
    with nogil:
        for i in range(n):
            area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
            for j in range(m):
                iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
                ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
                if iw < 0.0:
                    iw = 0.0
                if ih < 0.0:
                    ih = 0.0
                inter = iw * ih
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                union = area_a + area_b - inter
                if union > 0.0:
                    out[i, j] = inter / union
    return out_arr


def nms_keep(boxes, double iou_threshold):
    cdef const double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = bx.shape[0], i, j, nkeep = 0
    keep_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] keep = keep_arr
    cdef unsigned char[::1] suppressed = np.zeros(n, dtype=np.uint8)
    cdef double iw, ih, inter, union, area_i, area_j, ov
    with nogil:
        for i in range(n):
            if suppressed[i]:
                continue
            keep[nkeep] = i
            nkeep += 1
            area_i = (bx[i, 2] - bx[i, 0]) * (bx[i, 3] - bx[i, 1])
            for j in range(i + 1, n):
                if suppressed[j]:
                    continue
                iw = min(bx[i, 2], bx[j, 2]) - max(bx[i, 0], bx[j, 0])
                ih = min(bx[i, 3], bx[j, 3]) - max(bx[i, 1], bx[j, 1])
                if iw < 0.0:
                    iw = 0.0
                if ih < 0.0:
                    ih = 0.0
                inter = iw * ih
                area_j = (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1])
                union = area_i + area_j - inter
                ov = inter / union if union > 0.0 else 0.0
                if ov >= iou_threshold:
                    suppressed[j] = 1
    return keep_arr[:nkeep]


def box_sum(padded, Py_ssize_t kh, Py_ssize_t kw):
    cdef const cnp.int64_t[:, ::1] src = np.ascontiguousarray(padded, dtype=np.int64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1, i, j
    integral_arr = np.zeros((h + 1, w + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] s = integral_arr
    out_arr = np.empty((oh, ow), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.int64_t row
    with nogil:
        for i in range(h):
            row = 0
            for j in range(w):
                row = row + src[i, j]
                s[i + 1, j + 1] = s[i, j + 1] + row
        for i in range(oh):
            for j in range(ow):
                out[i, j] = s[i + kh, j + kw] - s[i, j + kw] - s[i + kh, j] + s[i, j]
    return out_arr


def clahe_luts(lum, int tiles_y, int tiles_x, long clip_limit):
    cdef const unsigned char[:, ::1] img = np.ascontiguousarray(lum, dtype=np.uint8)
    cdef Py_ssize_t tile_h = img.shape[0] // tiles_y
    cdef Py_ssize_t tile_w = img.shape[1] // tiles_x
    cdef long n = tile_h * tile_w
    luts_arr = np.empty((tiles_y, tiles_x, NBINS), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] luts = luts_arr
    cdef long hist[NBINS]
    cdef long clipped, batch, residual, step, cdf, v
    cdef Py_ssize_t ty, tx, y, x, k
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                for k in range(NBINS):
                    hist[k] = 0
                for y in range(ty * tile_h, (ty + 1) * tile_h):
                    for x in range(tx * tile_w, (tx + 1) * tile_w):
                        hist[img[y, x]] += 1
                if clip_limit > 0:
                    clipped = 0
                    for k in range(NBINS):
                        if hist[k] > clip_limit:
                            clipped += hist[k] - clip_limit
                            hist[k] = clip_limit
                    batch = clipped // NBINS
                    residual = clipped - batch * NBINS
                    for k in range(NBINS):
                        hist[k] += batch
                    if residual > 0:
                        step = NBINS // residual
                        if step < 1:
                            step = 1
                        k = 0
                        while k < NBINS and residual > 0:
                            hist[k] += 1
                            residual -= 1
                            k += step
                cdf = 0
                for k in range(NBINS):
                    cdf += hist[k]
                    v = (cdf * 510 + n) // (2 * n)
                    luts[ty, tx, k] = <unsigned char>(v if v < 255 else 255)
    return luts_arr


def clahe_interp(lum, luts, Py_ssize_t tile_h, Py_ssize_t tile_w):
    cdef const unsigned char[:, ::1] img = np.ascontiguousarray(lum, dtype=np.uint8)
    cdef const unsigned char[:, :, ::1] lt = np.ascontiguousarray(luts, dtype=np.uint8)
    cdef Py_ssize_t tiles_y = lt.shape[0], tiles_x = lt.shape[1]
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], y, x
    out_arr = np.empty((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t[::1] x1 = np.empty(w, dtype=np.intp)
    cdef Py_ssize_t[::1] x2 = np.empty(w, dtype=np.intp)
    cdef double[::1] xa = np.empty(w, dtype=np.float64)
    cdef double fy, fx, ya, res, t
    cdef Py_ssize_t y1, y2, v
    with nogil:
        for x in range(w):
            fx = <double>x / tile_w - 0.5
            t = floor(fx)
            xa[x] = fx - t
            x1[x] = <Py_ssize_t>t
            x2[x] = x1[x] + 1
            if x2[x] > tiles_x - 1:
                x2[x] = tiles_x - 1
            if x1[x] < 0:
                x1[x] = 0
        for y in range(h):
            fy = <double>y / tile_h - 0.5
            t = floor(fy)
            ya = fy - t
            y1 = <Py_ssize_t>t
            y2 = y1 + 1
            if y2 > tiles_y - 1:
                y2 = tiles_y - 1
            if y1 < 0:
                y1 = 0
            for x in range(w):
                v = img[y, x]
                res = ((<double>lt[y1, x1[x], v] * (1.0 - xa[x]) + <double>lt[y1, x2[x], v] * xa[x]) * (1.0 - ya)
                       + (<double>lt[y2, x1[x], v] * (1.0 - xa[x]) + <double>lt[y2, x2[x], v] * xa[x]) * ya)
                res = floor(res + 0.5)
                if res < 0.0:
                    res = 0.0
                elif res > 255.0:
                    res = 255.0
                out[y, x] = <unsigned char>res
    return out_arr
