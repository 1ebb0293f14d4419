"""Per-pixel numeric kernels shared by imgcore and metrics.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version. The public names bind to the numba path unless numba is
missing or ``COMOFUSION_DISABLE_NUMBA=1`` is set in the environment. Both
variants stay importable (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them directly.

All kernels take and return float64 arrays.
"""
import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("COMOFUSION_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)

if HAVE_NUMBA:
    jit = njit(cache=True, nogil=True)
else:  # pragma: no cover
    def jit(fn):
        return fn


HALF_PI = math.pi / 2.0


# --------------------------------------------------------------------- sobel
@jit
def sobel_numba(img):
    h, w = img.shape
    gx = np.empty((h, w))
    gy = np.empty((h, w))
    for i in range(h):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < h - 1 else h - 1
        for j in range(w):
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < w - 1 else w - 1
            # difference first so flat neighbourhoods give exactly 0
            gx[i, j] = (
                (img[im, jp] - img[im, jm])
                + 2.0 * (img[i, jp] - img[i, jm])
                + (img[ip, jp] - img[ip, jm])
            )
            gy[i, j] = (
                (img[ip, jm] - img[im, jm])
                + 2.0 * (img[ip, j] - img[im, j])
                + (img[ip, jp] - img[im, jp])
            )
    return gx, gy


def sobel_numpy(img):
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    tl, tc, tr = p[:h, :w], p[:h, 1:w + 1], p[:h, 2:]
    ml, mr = p[1:h + 1, :w], p[1:h + 1, 2:]
    bl, bc, br = p[2:, :w], p[2:, 1:w + 1], p[2:, 2:]
    gx = (tr - tl) + 2.0 * (mr - ml) + (br - bl)
    gy = (bl - tl) + 2.0 * (bc - tc) + (br - tr)
    return gx, gy


# ----------------------------------------------------------------- histogram
@jit
def histogram256_numba(levels):
    counts = np.zeros(256, dtype=np.int64)
    flat = levels.ravel()
    for k in range(flat.size):
        counts[flat[k]] += 1
    return counts


def histogram256_numpy(levels):
    return np.bincount(levels.ravel(), minlength=256).astype(np.int64)


# ---------------------------------------------------------- spatial frequency
@jit
def sf_terms_numba(img):
    h, w = img.shape
    rf = 0.0
    for i in range(h):
        for j in range(w - 1):
            d = img[i, j + 1] - img[i, j]
            rf += d * d
    cf = 0.0
    for i in range(h - 1):
        for j in range(w):
            d = img[i + 1, j] - img[i, j]
            cf += d * d
    return rf / (h * (w - 1)), cf / ((h - 1) * w)


def sf_terms_numpy(img):
    return float(np.mean(np.diff(img, axis=1) ** 2)), float(np.mean(np.diff(img, axis=0) ** 2))


# ----------------------------------------------------------- average gradient
@jit
def average_gradient_numba(img):
    h, w = img.shape
    acc = 0.0
    for i in range(h - 1):
        for j in range(w - 1):
            dx = img[i, j + 1] - img[i, j]
            dy = img[i + 1, j] - img[i, j]
            acc += math.sqrt((dx * dx + dy * dy) / 2.0)
    return acc / ((h - 1) * (w - 1))


def average_gradient_numpy(img):
    dx = img[:-1, 1:] - img[:-1, :-1]
    dy = img[1:, :-1] - img[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


# ---------------------------------------------------------------------- qabf
@jit
def _angle(sx, sy):
    if sx == 0.0:
        return HALF_PI
    return math.atan(sy / sx)


@jit
def qabf_sums_numba(ax, ay, bx, by, fx, fy, kg, sg, ka, sa, norm_g, norm_a):
    """Return (sum Q_AF*g_A + Q_BF*g_B, sum g_A + g_B)."""
    h, w = ax.shape
    num = 0.0
    den = 0.0
    for i in range(h):
        for j in range(w):
            g_f = math.sqrt(fx[i, j] * fx[i, j] + fy[i, j] * fy[i, j])
            a_f = _angle(fx[i, j], fy[i, j])
            for s in range(2):
                if s == 0:
                    sx = ax[i, j]
                    sy = ay[i, j]
                else:
                    sx = bx[i, j]
                    sy = by[i, j]
                g_s = math.sqrt(sx * sx + sy * sy)
                if g_s == 0.0:
                    continue
                if g_s > g_f:
                    rel_g = g_f / g_s
                elif g_s == g_f:
                    rel_g = 1.0
                else:
                    rel_g = g_s / g_f
                rel_a = 1.0 - abs(_angle(sx, sy) - a_f) / HALF_PI
                q_g = norm_g / (1.0 + math.exp(kg * (rel_g - sg)))
                q_a = norm_a / (1.0 + math.exp(ka * (rel_a - sa)))
                num += q_g * q_a * g_s
                den += g_s
    return num, den


def _angle_numpy(sx, sy):
    out = np.full(sx.shape, HALF_PI)
    nz = sx != 0.0
    out[nz] = np.arctan(sy[nz] / sx[nz])
    return out


def qabf_sums_numpy(ax, ay, bx, by, fx, fy, kg, sg, ka, sa, norm_g, norm_a):
    g_f = np.sqrt(fx * fx + fy * fy)
    a_f = _angle_numpy(fx, fy)
    num = 0.0
    den = 0.0
    for sx, sy in ((ax, ay), (bx, by)):
        g_s = np.sqrt(sx * sx + sy * sy)
        lo = np.minimum(g_s, g_f)
        hi = np.maximum(g_s, g_f)
        with np.errstate(invalid="ignore", divide="ignore"):
            rel_g = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
        rel_a = 1.0 - np.abs(_angle_numpy(sx, sy) - a_f) / HALF_PI
        q = norm_g / (1.0 + np.exp(kg * (rel_g - sg))) * (norm_a / (1.0 + np.exp(ka * (rel_a - sa))))
        num += float(np.sum(q * g_s))
        den += float(np.sum(g_s))
    return num, den


# ------------------------------------------------------- separable filtering
@jit
def filter_valid_numba(img, taps):
    """Separable correlation with a 1-D kernel, 'valid' output."""
    h, w = img.shape
    k = taps.size
    oh = h - k + 1
    ow = w - k + 1
    rows = np.empty((h, ow))
    for i in range(h):
        for j in range(ow):
            acc = 0.0
            for u in range(k):
                acc += taps[u] * img[i, j + u]
            rows[i, j] = acc
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for u in range(k):
                acc += taps[u] * rows[i + u, j]
            out[i, j] = acc
    return out


def filter_valid_numpy(img, taps):
    k = taps.size
    h, w = img.shape
    rows = sum(taps[u] * img[:, u:w - k + 1 + u] for u in range(k))
    return sum(taps[u] * rows[u:h - k + 1 + u, :] for u in range(k))


if USE_NUMBA:
    sobel = sobel_numba
    histogram256 = histogram256_numba
    sf_terms = sf_terms_numba
    average_gradient = average_gradient_numba
    qabf_sums = qabf_sums_numba
    filter_valid = filter_valid_numba
else:
    sobel = sobel_numpy
    histogram256 = histogram256_numpy
    sf_terms = sf_terms_numpy
    average_gradient = average_gradient_numpy
    qabf_sums = qabf_sums_numpy
    filter_valid = filter_valid_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
