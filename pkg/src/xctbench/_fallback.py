"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def _bilinear(padded, n, fi, fj):
    # padded has a one-pixel zero border, so index shift is +1
    inside = (fi > -1.0) & (fj > -1.0) & (fi < n) & (fj < n)
    fi = np.where(inside, fi, -0.5)
    fj = np.where(inside, fj, -0.5)
    i0 = np.floor(fi).astype(np.intp)
    j0 = np.floor(fj).astype(np.intp)
    di = fi - i0
    dj = fj - j0
    i0 += 1
    j0 += 1
    v = ((1.0 - di) * (1.0 - dj) * padded[i0, j0]
         + (1.0 - di) * dj * padded[i0, j0 + 1]
         + di * (1.0 - dj) * padded[i0 + 1, j0]
         + di * dj * padded[i0 + 1, j0 + 1])
    return np.where(inside, v, 0.0)


def project(image, cos_t, sin_t, n_det, step):
    image = np.ascontiguousarray(image, dtype=np.float64)
    n = image.shape[0]
    c = (n - 1) / 2.0
    cd = (n_det - 1) / 2.0
    radius = n * 0.7071067811865476 + 1.0
    n_samp = int(2.0 * radius / step) + 1
    t = -(n_samp - 1) * step / 2.0 + np.arange(n_samp) * step
    s = np.arange(n_det) - cd
    padded = np.pad(image, 1)
    out = np.zeros((len(cos_t), n_det))
    for v, (ct, st) in enumerate(zip(cos_t, sin_t)):
        fi = s[:, None] * st + t[None, :] * ct + c
        fj = s[:, None] * ct - t[None, :] * st + c
        out[v] = _bilinear(padded, n, fi, fj).sum(axis=1) * step
    return out


def backproject(filtered, cos_t, sin_t, n):
    filtered = np.asarray(filtered, dtype=np.float64)
    n_det = filtered.shape[1]
    c = (n - 1) / 2.0
    cd = (n_det - 1) / 2.0
    coords = np.arange(n) - c
    y, x = np.meshgrid(coords, coords, indexing="ij")
    out = np.zeros((n, n))
    row = np.zeros(n_det + 2)
    for v, (ct, st) in enumerate(zip(cos_t, sin_t)):
        pos = x * ct + y * st + cd
        inside = (pos > -1.0) & (pos < n_det)
        pos = np.where(inside, pos, -0.5)
        k0 = np.floor(pos).astype(np.intp)
        frac = pos - k0
        row[1:-1] = filtered[v]
        val = (1.0 - frac) * row[k0 + 1] + frac * row[k0 + 2]
        out += np.where(inside, val, 0.0)
    return out


def im2col(xp, k, stride):
    nb, nc, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((nb, nc, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * (ho - 1) + 1:stride,
                                    dj:dj + stride * (wo - 1) + 1:stride]
    return cols.reshape(nb, nc * k * k, ho * wo)


def col2im(cols, nc, hp, wp, k, stride):
    nb = cols.shape[0]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = cols.reshape(nb, nc, k, k, ho, wo)
    xp = np.zeros((nb, nc, hp, wp))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + stride * (ho - 1) + 1:stride,
               dj:dj + stride * (wo - 1) + 1:stride] += cols[:, :, di, dj]
    return xp
