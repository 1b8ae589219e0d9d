"""Independent brute-force reference implementations used as test oracles.

Everything here is written as plain scalar loops, deliberately ignorant of
the vectorized implementations under test. Slow and obviously correct.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_ref(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same convolution, zero padding, stride 1, scalar loops."""
    n_batch, in_ch, height, width = x.shape
    out_ch = kernels.shape[0]
    out = np.zeros((n_batch, out_ch, height, width), dtype=np.float64)
    for n in range(n_batch):
        for o in range(out_ch):
            for h in range(height):
                for w in range(width):
                    acc = float(bias[o])
                    for c in range(in_ch):
                        for i in range(3):
                            for j in range(3):
                                hh, ww = h + i - 1, w + j - 1
                                if 0 <= hh < height and 0 <= ww < width:
                                    acc += float(kernels[o, c, i, j]) * float(x[n, c, hh, ww])
                    out[n, o, h, w] = acc
    return out


def psnr_ref(ref: np.ndarray, pred: np.ndarray, peak: float | None = None) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if peak is None:
        peak = float(ref.max())
    total = 0.0
    for r, p in zip(ref.ravel(), pred.ravel()):
        total += (float(r) - float(p)) ** 2
    mse = total / ref.size
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def nmse_ref(ref: np.ndarray, pred: np.ndarray) -> float:
    num = den = 0.0
    for r, p in zip(np.asarray(ref).ravel(), np.asarray(pred).ravel()):
        num += (float(r) - float(p)) ** 2
        den += float(r) ** 2
    return num / den


def _gaussian_ref(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    kernel = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            kernel[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
    return kernel / kernel.sum()


def ssim_ref(ref: np.ndarray, pred: np.ndarray, window: int, sigma: float,
             k1: float, k2: float, peak: float | None = None) -> float:
    """Gaussian-window SSIM, one window position at a time."""
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if peak is None:
        peak = float(ref.max())
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    kernel = _gaussian_ref(window, sigma)
    height, width = ref.shape
    scores = []
    for top in range(height - window + 1):
        for left in range(width - window + 1):
            a = ref[top:top + window, left:left + window]
            b = pred[top:top + window, left:left + window]
            mu_a = float((kernel * a).sum())
            mu_b = float((kernel * b).sum())
            var_a = float((kernel * a * a).sum()) - mu_a ** 2
            var_b = float((kernel * b * b).sum()) - mu_b ** 2
            cov = float((kernel * a * b).sum()) - mu_a * mu_b
            scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(scores))


def avg_gradient_ref(img: np.ndarray) -> float:
    img = np.asarray(img, dtype=np.float64)
    height, width = img.shape
    total = 0.0
    for h in range(height):
        for w in range(width):
            dh = img[h + 1, w] - img[h, w] if h + 1 < height else 0.0
            dw = img[h, w + 1] - img[h, w] if w + 1 < width else 0.0
            total += math.sqrt(dh * dh + dw * dw)
    return total / (height * width)


def spatial_frequency_ref(img: np.ndarray) -> float:
    img = np.asarray(img, dtype=np.float64)
    height, width = img.shape
    rf = sum((img[h, w] - img[h, w - 1]) ** 2
             for h in range(height) for w in range(1, width)) / (height * width)
    cf = sum((img[h, w] - img[h - 1, w]) ** 2
             for h in range(1, height) for w in range(width)) / (height * width)
    return math.sqrt(rf + cf)


def histogram_ref(img: np.ndarray, levels: int, lo: float, hi: float) -> np.ndarray:
    counts = np.zeros(levels, dtype=np.float64)
    scale = levels / (hi - lo)
    for v in np.asarray(img, dtype=np.float64).ravel():
        v = min(max(v, lo), hi)
        index = min(int((v - lo) * scale), levels - 1)
        counts[index] += 1.0
    return counts / counts.sum()


def entropy_ref(img: np.ndarray, levels: int, lo: float, hi: float) -> float:
    return float(-sum(p * math.log2(p) for p in histogram_ref(img, levels, lo, hi) if p > 0))


def joint_histogram_ref(a: np.ndarray, b: np.ndarray, levels: int,
                        lo: float, hi: float) -> np.ndarray:
    joint = np.zeros((levels, levels), dtype=np.float64)
    scale = levels / (hi - lo)
    flat_a = np.asarray(a, dtype=np.float64).ravel()
    flat_b = np.asarray(b, dtype=np.float64).ravel()
    for va, vb in zip(flat_a, flat_b):
        va = min(max(va, lo), hi)
        vb = min(max(vb, lo), hi)
        ia = min(int((va - lo) * scale), levels - 1)
        ib = min(int((vb - lo) * scale), levels - 1)
        joint[ia, ib] += 1.0
    return joint / joint.sum()


def mutual_information_ref(a: np.ndarray, b: np.ndarray, levels: int,
                           lo: float, hi: float) -> float:
    joint = joint_histogram_ref(a, b, levels, lo, hi)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for i in range(levels):
        for j in range(levels):
            p = joint[i, j]
            if p > 0 and pa[i] > 0 and pb[j] > 0:
                mi += p * math.log2(p / (pa[i] * pb[j]))
    return mi


def q_mi_ref(x1: np.ndarray, x2: np.ndarray, fused: np.ndarray, levels: int,
             lo: float, hi: float) -> float:
    h1 = entropy_ref(x1, levels, lo, hi)
    h2 = entropy_ref(x2, levels, lo, hi)
    hf = entropy_ref(fused, levels, lo, hi)
    return 2.0 * (mutual_information_ref(x1, fused, levels, lo, hi) / (h1 + hf)
                  + mutual_information_ref(x2, fused, levels, lo, hi) / (h2 + hf))


def _q0_ref(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = float(a.mean()), float(b.mean())
    var_a = float((a * a).mean()) - mu_a ** 2
    var_b = float((b * b).mean()) - mu_b ** 2
    cov = float((a * b).mean()) - mu_a * mu_b
    denom_s, denom_l = var_a + var_b, mu_a ** 2 + mu_b ** 2
    if denom_s > 0 and denom_l > 0:
        return 4 * cov * mu_a * mu_b / (denom_s * denom_l)
    if denom_s == 0 and denom_l > 0:
        return 2 * mu_a * mu_b / denom_l
    if denom_s > 0:
        return 2 * cov / denom_s
    return 1.0


def q_piella_ref(x1: np.ndarray, x2: np.ndarray, fused: np.ndarray,
                 window: int, step: int = 1) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    height, width = x1.shape
    scores = []
    for top in range(0, height - window + 1, step):
        for left in range(0, width - window + 1, step):
            a = x1[top:top + window, left:left + window]
            b = x2[top:top + window, left:left + window]
            f = fused[top:top + window, left:left + window]
            var_a = float((a * a).mean()) - float(a.mean()) ** 2
            var_b = float((b * b).mean()) - float(b.mean()) ** 2
            lam = var_a / (var_a + var_b) if var_a + var_b > 0 else 0.5
            scores.append(lam * _q0_ref(a, f) + (1 - lam) * _q0_ref(b, f))
    return float(np.mean(scores))
