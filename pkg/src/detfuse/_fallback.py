"""Pure numpy implementations of the hot kernels.

Every function here mirrors one in ``_kernels.pyx`` and must return
bit-identical results; the floating-point expressions are written in the
same operation order on purpose.
"""

import numpy as np

NBINS = 256


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms_keep(boxes, iou_threshold):
    """Greedy suppression over boxes already sorted by descending confidence."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    ious = iou_matrix(boxes, boxes)
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return np.array(keep, dtype=np.intp)


def box_sum(padded, kh, kw):
    """Sum over every ``kh x kw`` window of a 2-D integer array ('valid' mode)."""
    padded = np.asarray(padded, dtype=np.int64)
    h, w = padded.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=integral[1:, 1:])
    oh, ow = h - kh + 1, w - kw + 1
    return (
        integral[kh:, kw:]
        - integral[:oh, kw:]
        - integral[kh:, :ow]
        + integral[:oh, :ow]
    )


def clahe_luts(lum, tiles_y, tiles_x, clip_limit):
    """Clipped-histogram equalization lookup table for every tile.

    ``lum`` must already be padded so its dimensions are multiples of the
    tile grid.  ``clip_limit`` is an absolute bin count; 0 disables clipping.
    """
    lum = np.asarray(lum, dtype=np.uint8)
    tile_h = lum.shape[0] // tiles_y
    tile_w = lum.shape[1] // tiles_x
    n = tile_h * tile_w
    luts = np.empty((tiles_y, tiles_x, NBINS), dtype=np.uint8)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = lum[ty * tile_h:(ty + 1) * tile_h, tx * tile_w:(tx + 1) * tile_w]
            hist = np.bincount(tile.ravel(), minlength=NBINS).astype(np.int64)
            if clip_limit > 0:
                clipped = int(np.maximum(hist - clip_limit, 0).sum())
                np.minimum(hist, clip_limit, out=hist)
                batch, residual = divmod(clipped, NBINS)
                hist += batch
                if residual:
                    step = max(NBINS // residual, 1)
                    idx = np.arange(0, NBINS, step)[:residual]
                    hist[idx] += 1
            cdf = np.cumsum(hist)
            luts[ty, tx] = np.minimum((cdf * 510 + n) // (2 * n), 255)
    return luts


def _axis_weights(size, tile, tiles):
    f = np.arange(size, dtype=np.float64) / tile - 0.5
    t1 = np.floor(f)
    frac = f - t1
    t1 = t1.astype(np.intp)
    t2 = np.minimum(t1 + 1, tiles - 1)
    t1 = np.maximum(t1, 0)
    return t1, t2, frac


def clahe_interp(lum, luts, tile_h, tile_w):
    """Bilinearly blend the four nearest tile mappings at every pixel."""
    lum = np.asarray(lum, dtype=np.uint8)
    tiles_y, tiles_x = luts.shape[:2]
    h, w = lum.shape
    y1, y2, ya = _axis_weights(h, tile_h, tiles_y)
    x1, x2, xa = _axis_weights(w, tile_w, tiles_x)
    y1, y2, ya = y1[:, None], y2[:, None], ya[:, None]
    lutf = luts.astype(np.float64)
    v = lum.astype(np.intp)
    l11 = lutf[y1, x1, v]
    l12 = lutf[y1, x2, v]
    l21 = lutf[y2, x1, v]
    l22 = lutf[y2, x2, v]
    res = (l11 * (1.0 - xa) + l12 * xa) * (1.0 - ya) + (l21 * (1.0 - xa) + l22 * xa) * ya
    return np.clip(np.floor(res + 0.5), 0, 255).astype(np.uint8)
