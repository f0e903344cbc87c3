"""Pure numpy bilinear warp, used when the compiled kernel is unavailable."""

import numpy as np


def warp_bilinear(img, inv, out_h, out_w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    inv = np.asarray(inv, dtype=np.float64)
    h, w, _ = img.shape
    oy, ox = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs = inv[0, 0] * ox + inv[0, 1] * oy + inv[0, 2]
    ys = inv[1, 0] * ox + inv[1, 1] * oy + inv[1, 2]
    inside = (xs > -1.0) & (xs < w) & (ys > -1.0) & (ys < h)
    xs = np.where(inside, xs, 0.0)
    ys = np.where(inside, ys, 0.0)
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f)[..., None]
    fy = (ys - y0f)[..., None]
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        ok = inside & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0)

    p00, p01 = tap(y0, x0), tap(y0, x1)
    p10, p11 = tap(y1, x0), tap(y1, x1)
    top = (1.0 - fx) * p00 + fx * p01
    bot = (1.0 - fx) * p10 + fx * p11
    out = (1.0 - fy) * top + fy * bot
    return np.where(inside[..., None], out, 0.0)


def warp_bilinear_batch(imgs, invs, out_h, out_w):
    imgs = np.asarray(imgs, dtype=np.float64)
    invs = np.asarray(invs, dtype=np.float64)
    if invs.shape[0] != imgs.shape[0]:
        raise ValueError("one inverse transform per image is required")
    out = np.empty((imgs.shape[0], out_h, out_w, imgs.shape[3]), dtype=np.float64)
    for i in range(imgs.shape[0]):
        out[i] = warp_bilinear(imgs[i], invs[i], out_h, out_w)
    return out
