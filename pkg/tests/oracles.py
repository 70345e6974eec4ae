"""Straight-line reference implementations used only by the tests.

These deliberately avoid numpy vectorisation and scipy so they share no code
path with the package.
"""

import math

import numpy as np

M_SRGB = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
]
WHITE = [sum(row) for row in M_SRGB]


# --- CIELab ------------------------------------------------------------------


def lab_pixel(r, g, b):
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    def f(t):
        d = 6.0 / 29.0
        return t ** (1.0 / 3.0) if t > d ** 3 else t / (3 * d * d) + 4.0 / 29.0

    rgb = [lin(r), lin(g), lin(b)]
    xyz = [sum(M_SRGB[i][j] * rgb[j] for j in range(3)) for i in range(3)]
    fx, fy, fz = (f(xyz[i] / WHITE[i]) for i in range(3))
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def lab_to_srgb(l, a, b):
    """Inverse conversion, used only for round-trip checks."""
    d = 6.0 / 29.0

    def finv(t):
        return t ** 3 if t > d else 3 * d * d * (t - 4.0 / 29.0)

    fy = (l + 16) / 116
    fx = fy + a / 500
    fz = fy - b / 200
    xyz = np.array([finv(fx) * WHITE[0], finv(fy) * WHITE[1], finv(fz) * WHITE[2]])
    lin = np.linalg.solve(np.array(M_SRGB), xyz)

    def gamma(c):
        return 12.92 * c if c <= 0.0031308 else 1.055 * c ** (1 / 2.4) - 0.055

    return [gamma(c) for c in lin]


# --- UIQM --------------------------------------------------------------------


def _reflect(i, n):
    # scipy.ndimage "reflect": (d c b a | a b c d | d c b a)
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def sobel_mag(ch):
    h, w = len(ch), len(ch[0])
    smooth = [1, 2, 1]

    def at(y, x):
        return ch[_reflect(y, h)][_reflect(x, w)]

    mag = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            # central differences first, so flat regions give exactly zero
            d0 = sum(smooth[k + 1] * (at(y + 1, x + k) - at(y - 1, x + k)) for k in (-1, 0, 1))
            d1 = sum(smooth[k + 1] * (at(y + k, x + 1) - at(y + k, x - 1)) for k in (-1, 0, 1))
            mag[y][x] = math.sqrt(d0 * d0 + d1 * d1)
    peak = max(max(row) for row in mag)
    if peak > 0:
        mag = [[v * 255.0 / peak for v in row] for row in mag]
    return mag


def uiqm_oracle(image, block=8):
    """UIQM of a [3,H,W] image in [0,1], written as plain loops."""
    img = np.asarray(image, dtype=np.float64) * 255.0
    h, w = img.shape[1:]
    chans = [[[float(img[c, y, x]) for x in range(w)] for y in range(h)] for c in range(3)]
    r, g, b = chans

    # colourfulness
    rg = [r[y][x] - g[y][x] for y in range(h) for x in range(w)]
    yb = [(r[y][x] + g[y][x]) / 2 - b[y][x] for y in range(h) for x in range(w)]

    def trimmed(vals):
        s = sorted(vals)
        k = len(s)
        lo = math.ceil(0.1 * k)
        hi = math.floor(0.1 * k)
        kept = s[lo:k - hi]
        return sum(kept) / (k - lo - hi)

    def var(vals, mu):
        return sum((v - mu) ** 2 for v in vals) / len(vals)

    m_rg, m_yb = trimmed(rg), trimmed(yb)
    uicm = -0.0268 * math.sqrt(m_rg ** 2 + m_yb ** 2) + 0.1586 * math.sqrt(var(rg, m_rg) + var(yb, m_yb))

    k1, k2 = w // block, h // block

    # sharpness
    def eme(grid):
        total = 0.0
        for by in range(k2):
            for bx in range(k1):
                vals = [grid[y][x] for y in range(by * block, (by + 1) * block)
                        for x in range(bx * block, (bx + 1) * block)]
                mx, mn = max(vals), min(vals)
                if mx > 0 and mn > 0:
                    total += math.log(mx / mn)
        return 2.0 / (k1 * k2) * total

    uism = 0.0
    for lam, ch in zip((0.299, 0.587, 0.114), chans):
        sm = sobel_mag(ch)
        edge = [[sm[y][x] * ch[y][x] for x in range(w)] for y in range(h)]
        uism += lam * eme(edge)

    # contrast
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            vals = [chans[c][y][x] for c in range(3) for y in range(by * block, (by + 1) * block)
                    for x in range(bx * block, (bx + 1) * block)]
            mx, mn = max(vals), min(vals)
            top, bot = mx - mn, mx + mn
            if top > 0 and bot > 0:
                q = top / bot
                total += q * math.log(q)
    uiconm = -total / (k1 * k2)

    return 0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm


# --- SSIM --------------------------------------------------------------------


def ssim_oracle(a, b, size=11, sigma=1.5):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = [i - (size - 1) / 2 for i in range(size)]
    g1 = [math.exp(-v * v / (2 * sigma * sigma)) for v in r]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape[1:]
    per_channel = []
    for c in range(a.shape[0]):
        vals = []
        for y in range(h - size + 1):
            for x in range(w - size + 1):
                mx = my = 0.0
                for i in range(size):
                    for j in range(size):
                        wt = g1[i] * g1[j]
                        mx += wt * a[c, y + i, x + j]
                        my += wt * b[c, y + i, x + j]
                vx = vy = cxy = 0.0
                for i in range(size):
                    for j in range(size):
                        wt = g1[i] * g1[j]
                        dx = a[c, y + i, x + j] - mx
                        dy = b[c, y + i, x + j] - my
                        vx += wt * dx * dx
                        vy += wt * dy * dy
                        cxy += wt * dx * dy
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


# --- synthetic images --------------------------------------------------------


def synthetic_images():
    """Five [3,H,W] float64 images used by the UIQM golden checks."""
    rng = np.random.default_rng(2024)
    imgs = []
    cb = np.indices((8, 8)).sum(axis=0) % 2
    checker = np.stack([0.2 + 0.6 * cb, 0.3 + 0.4 * (1 - cb), np.full((8, 8), 0.5)])
    imgs.append(checker)
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    imgs.append(np.stack([0.1 + 0.8 * xx, 0.2 + 0.6 * yy, 0.5 + 0.3 * xx * yy]))
    imgs.append(0.05 + 0.9 * rng.random((3, 16, 24)))
    blocks = np.zeros((3, 24, 16))
    for i in range(3):
        for j in range(2):
            blocks[:, 8 * i:8 * i + 8, 8 * j:8 * j + 8] = rng.random((3, 1, 1))
    imgs.append(0.02 + 0.96 * blocks)
    smooth = rng.random((3, 4, 4)).repeat(4, axis=1).repeat(4, axis=2)
    imgs.append(np.clip(smooth + 0.05 * rng.standard_normal((3, 16, 16)), 0, 1))
    return imgs
