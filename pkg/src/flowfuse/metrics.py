"""Image quality measures for synthesis and fusion evaluation.

Synthesis: PSNR (peak signal-to-noise ratio over RMSE, with per-image
reference max or a fixed dynamic range), SSIM (Gaussian sliding window by
default, global single-window mode available), NMSE.

Fusion: average gradient (AG), spatial frequency (SF), histogram entropy
(EN), normalized mutual information of the fused image against both sources
(Q_MI), and the locally-weighted universal-quality-index measure (Q) with
local-variance saliency weights. Fusion metrics are defined on
single-channel images; use :func:`to_gray` for color inputs.

Aggregation reports mean and population standard deviation, matching the
"mean +- std" convention of evaluation tables.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

METRIC_COLUMNS = ("psnr", "ssim", "nmse", "ag", "sf", "en", "qmi", "qp")


@dataclass
class MetricConfig:
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    ssim_global: bool = False  # literal single-window form over the whole image
    dynamic_range: Optional[float] = None  # None: per-image max of the reference
    entropy_levels: int = 256
    value_range: tuple = (0.0, 1.0)  # declared range for histograms
    piella_window: int = 7
    piella_step: int = 1

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.piella_window < 3:
            raise ConfigError(f"piella_window must be >= 3, got {self.piella_window}")
        if self.piella_step < 1:
            raise ConfigError(f"piella_step must be >= 1, got {self.piella_step}")
        if self.entropy_levels < 2:
            raise ConfigError(f"entropy_levels must be >= 2, got {self.entropy_levels}")


def _as_image(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name}: expected (H, W), (C, H, W) or (1, C, H, W), "
                         f"got shape {np.asarray(x).shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def to_gray(x) -> np.ndarray:
    """Collapse channels by mean; fusion metrics operate on one channel."""
    return _as_image(x, "to_gray").mean(axis=0)


def psnr(reference, prediction, cfg: MetricConfig = MetricConfig()) -> float:
    """20 log10(max / RMSE) in dB; +inf when the images are identical."""
    ref = _as_image(reference, "reference")
    pred = _as_image(prediction, "prediction")
    _check_same_shape(ref, pred)
    peak = float(ref.max()) if cfg.dynamic_range is None else float(cfg.dynamic_range)
    if peak <= 0.0:
        raise ValueError(f"PSNR peak must be positive, got {peak} "
                         "(set cfg.dynamic_range for non-positive references)")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def nmse(reference, prediction) -> float:
    """||reference - prediction||^2 / ||reference||^2."""
    ref = _as_image(reference, "reference")
    pred = _as_image(prediction, "prediction")
    _check_same_shape(ref, pred)
    denom = float(np.sum(ref ** 2))
    if denom == 0.0:
        raise ValueError("NMSE is undefined for an all-zero reference")
    return float(np.sum((ref - pred) ** 2)) / denom


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_channel(ref: np.ndarray, pred: np.ndarray, cfg: MetricConfig,
                  peak: float) -> float:
    c1 = (cfg.ssim_k1 * peak) ** 2
    c2 = (cfg.ssim_k2 * peak) ** 2
    if cfg.ssim_global:
        mu_r, mu_p = ref.mean(), pred.mean()
        var_r, var_p = ref.var(), pred.var()
        cov = ((ref - mu_r) * (pred - mu_p)).mean()
        return float(((2 * mu_r * mu_p + c1) * (2 * cov + c2))
                     / ((mu_r ** 2 + mu_p ** 2 + c1) * (var_r + var_p + c2)))
    w = cfg.ssim_window
    h, wd = ref.shape
    if h < w or wd < w:
        raise ShapeError(f"image {ref.shape} smaller than SSIM window {w}")
    kernel = _gaussian_kernel(w, cfg.ssim_sigma)
    win_r = sliding_window_view(ref, (w, w))
    win_p = sliding_window_view(pred, (w, w))
    mu_r = np.tensordot(win_r, kernel, axes=([2, 3], [0, 1]))
    mu_p = np.tensordot(win_p, kernel, axes=([2, 3], [0, 1]))
    m_rr = np.tensordot(win_r * win_r, kernel, axes=([2, 3], [0, 1]))
    m_pp = np.tensordot(win_p * win_p, kernel, axes=([2, 3], [0, 1]))
    m_rp = np.tensordot(win_r * win_p, kernel, axes=([2, 3], [0, 1]))
    var_r = m_rr - mu_r ** 2
    var_p = m_pp - mu_p ** 2
    cov = m_rp - mu_r * mu_p
    score = (((2 * mu_r * mu_p + c1) * (2 * cov + c2))
             / ((mu_r ** 2 + mu_p ** 2 + c1) * (var_r + var_p + c2)))
    return float(score.mean())


def ssim(reference, prediction, cfg: MetricConfig = MetricConfig()) -> float:
    """Structural similarity in [-1, 1]; Gaussian windows averaged per channel."""
    ref = _as_image(reference, "reference")
    pred = _as_image(prediction, "prediction")
    _check_same_shape(ref, pred)
    peak = float(ref.max()) if cfg.dynamic_range is None else float(cfg.dynamic_range)
    return float(np.mean([_ssim_channel(ref[c], pred[c], cfg, peak)
                          for c in range(ref.shape[0])]))


def _forward_diffs(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dh = np.zeros_like(img)
    dw = np.zeros_like(img)
    dh[:-1, :] = img[1:, :] - img[:-1, :]  # last row contributes zero
    dw[:, :-1] = img[:, 1:] - img[:, :-1]  # last column contributes zero
    return dh, dw


def avg_gradient(image) -> float:
    """Mean forward-difference gradient magnitude over the full grid."""
    img = _single_channel(image, "avg_gradient")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ShapeError(f"avg_gradient needs at least 2x2 pixels, got {img.shape}")
    dh, dw = _forward_diffs(img)
    return float(np.mean(np.sqrt(dh ** 2 + dw ** 2)))


def spatial_frequency(image) -> float:
    """sqrt(RF^2 + CF^2) of mean-square neighbor differences."""
    img = _single_channel(image, "spatial_frequency")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ShapeError(f"spatial_frequency needs at least 2x2 pixels, got {img.shape}")
    h, w = img.shape
    rf = math.sqrt(float(np.sum((img[:, 1:] - img[:, :-1]) ** 2)) / (h * w))
    cf = math.sqrt(float(np.sum((img[1:, :] - img[:-1, :]) ** 2)) / (h * w))
    return math.sqrt(rf ** 2 + cf ** 2)


def _single_channel(image, name: str) -> np.ndarray:
    img = _as_image(image, name)
    if img.shape[0] != 1:
        raise ShapeError(f"{name} is defined on single-channel images; "
                         "collapse color inputs with to_gray() first")
    return img[0]


def _histogram(img: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    lo, hi = cfg.value_range
    clipped = np.clip(img, lo, hi)
    hist, _ = np.histogram(clipped, bins=cfg.entropy_levels, range=(lo, hi))
    return hist.astype(np.float64) / img.size


def _entropy_of(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def entropy(image, cfg: MetricConfig = MetricConfig()) -> float:
    """Shannon entropy (bits) of the L-level histogram over the declared range."""
    return _entropy_of(_histogram(_single_channel(image, "entropy"), cfg))


def _joint_histogram(a: np.ndarray, b: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    lo, hi = cfg.value_range
    joint, _, _ = np.histogram2d(
        np.clip(a, lo, hi).ravel(), np.clip(b, lo, hi).ravel(),
        bins=cfg.entropy_levels, range=((lo, hi), (lo, hi)))
    return joint / a.size


def mutual_information(a, b, cfg: MetricConfig = MetricConfig()) -> float:
    """MI in bits from the joint L x L histogram."""
    pab = _joint_histogram(_single_channel(a, "mutual_information"),
                           _single_channel(b, "mutual_information"), cfg)
    pa = pab.sum(axis=1)
    pb = pab.sum(axis=0)
    return _entropy_of(pa) + _entropy_of(pb) - _entropy_of(pab.ravel())


def q_mi(source1, source2, fused, cfg: MetricConfig = MetricConfig()) -> float:
    """2 * [MI(x1, f)/(H(x1)+H(f)) + MI(x2, f)/(H(x2)+H(f))]; 2 at perfect dependence."""
    x1 = _single_channel(source1, "q_mi source1")
    x2 = _single_channel(source2, "q_mi source2")
    f = _single_channel(fused, "q_mi fused")
    _check_same_shape(x1, f)
    _check_same_shape(x2, f)
    h1, h2, hf = (entropy(x, cfg) for x in (x1, x2, f))
    if h1 == 0.0 or h2 == 0.0:
        raise ValueError("q_mi is undefined for a zero-entropy (constant) source image")
    return 2.0 * (mutual_information(x1, f, cfg) / (h1 + hf)
                  + mutual_information(x2, f, cfg) / (h2 + hf))


def _window_stats(img: np.ndarray, w: int, step: int):
    wins = sliding_window_view(img, (w, w))[::step, ::step]
    mu = wins.mean(axis=(2, 3))
    var = (wins * wins).mean(axis=(2, 3)) - mu ** 2
    return wins, mu, var


def _q0_map(mu_a, var_a, mu_b, var_b, cov) -> np.ndarray:
    """Universal quality index per window with the degenerate-case conventions."""
    denom_s = var_a + var_b
    denom_l = mu_a ** 2 + mu_b ** 2
    out = np.ones_like(mu_a)
    both = (denom_s > 0) & (denom_l > 0)
    out[both] = (4 * cov[both] * mu_a[both] * mu_b[both]) / (denom_s[both] * denom_l[both])
    lum_only = (denom_s == 0) & (denom_l > 0)
    out[lum_only] = (2 * mu_a[lum_only] * mu_b[lum_only]) / denom_l[lum_only]
    corr_only = (denom_s > 0) & (denom_l == 0)
    out[corr_only] = (2 * cov[corr_only]) / denom_s[corr_only]
    return out  # both denominators zero: two flat zero windows, quality 1


def q_piella(source1, source2, fused, cfg: MetricConfig = MetricConfig()) -> float:
    """Saliency-weighted universal quality index over sliding windows.

    Per window: lambda = var(x1) / (var(x1) + var(x2)) (0.5 when both are
    flat), score = lambda * Q0(x1, fused) + (1 - lambda) * Q0(x2, fused).
    """
    x1 = _single_channel(source1, "q_piella source1")
    x2 = _single_channel(source2, "q_piella source2")
    f = _single_channel(fused, "q_piella fused")
    _check_same_shape(x1, f)
    _check_same_shape(x2, f)
    w = cfg.piella_window
    if x1.shape[0] < w or x1.shape[1] < w:
        raise ShapeError(f"image {x1.shape} smaller than window {w}")
    win1, mu1, var1 = _window_stats(x1, w, cfg.piella_step)
    win2, mu2, var2 = _window_stats(x2, w, cfg.piella_step)
    winf, muf, varf = _window_stats(f, w, cfg.piella_step)
    cov1 = (win1 * winf).mean(axis=(2, 3)) - mu1 * muf
    cov2 = (win2 * winf).mean(axis=(2, 3)) - mu2 * muf

    denom = var1 + var2
    lam = np.full_like(var1, 0.5)
    np.divide(var1, denom, out=lam, where=denom > 0)
    q1 = _q0_map(mu1, var1, muf, varf, cov1)
    q2 = _q0_map(mu2, var2, muf, varf, cov2)
    return float(np.mean(lam * q1 + (1.0 - lam) * q2))


def aggregate(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate needs at least one value")
    if not np.isfinite(arr).all():
        raise ValueError("aggregate requires finite values (filter infinities upstream)")
    return float(arr.mean()), float(arr.std())


@dataclass
class MetricReport:
    """Per-image metric values plus mean/std aggregates."""

    ids: list = field(default_factory=list)
    values: dict = field(default_factory=dict)  # metric name -> list (may hold nan/inf)

    def add(self, image_id: str, metrics: dict) -> None:
        self.ids.append(image_id)
        for name in metrics:
            if name not in METRIC_COLUMNS:
                raise ConfigError(f"unknown metric column {name!r}")
        for name in METRIC_COLUMNS:
            self.values.setdefault(name, []).append(metrics.get(name, math.nan))

    def aggregates(self) -> dict:
        """Mean/std per metric over finite entries; warns when any were skipped."""
        out = {}
        for name, vals in self.values.items():
            arr = np.asarray(vals, dtype=np.float64)
            finite = arr[np.isfinite(arr)]
            skipped = int(arr.size - finite.size - np.isnan(arr).sum())
            if skipped > 0:
                warnings.warn(f"{name}: excluded {skipped} infinite value(s) from the mean")
            if finite.size:
                out[name] = aggregate(finite)
        return out

    def to_csv(self) -> str:
        lines = ["id," + ",".join(METRIC_COLUMNS)]
        for row, image_id in enumerate(self.ids):
            cells = []
            for name in METRIC_COLUMNS:
                v = self.values[name][row]
                cells.append("" if math.isnan(v) else ("inf" if math.isinf(v) else f"{v:.6f}"))
            lines.append(f"{image_id}," + ",".join(cells))
        aggs = self.aggregates()
        cells = []
        for name in METRIC_COLUMNS:
            if name in aggs:
                mean, std = aggs[name]
                cells.append(f"{mean:.6f} ± {std:.6f}")
            else:
                cells.append("")
        lines.append("aggregate," + ",".join(cells))
        return "\n".join(lines) + "\n"
