"""Whole-volume quality metrics and error histories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .core import ConfigurationError, Volume

# returned for identical inputs instead of +inf
PSNR_CAP = 400.0


def _arr(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.as_array().astype(np.float64)
    return np.asarray(v, dtype=np.float64)


def _pair(x, gt):
    a, b = _arr(x), _arr(gt)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def default_data_range(gt) -> float:
    g = _arr(gt)
    return float(g.max() - g.min())


def psnr(x, x_gt, data_range: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB over the whole volume.

    ``data_range`` defaults to the ground truth's max - min. Identical inputs
    give :data:`PSNR_CAP`.
    """
    a, b = _pair(x, x_gt)
    L = default_data_range(b) if data_range is None else float(data_range)
    if not L > 0:
        raise ConfigurationError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(L * L / mse))


def rel_error(x, x_gt) -> float:
    a, b = _pair(x, x_gt)
    return float(np.linalg.norm((a - b).ravel()) / np.linalg.norm(b.ravel()))


def ssim3d(x, x_gt, window: int = 7, data_range: Optional[float] = None,
           k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained ``window^3`` cubes.

    Local statistics use a uniform window with the unbiased (N - 1) covariance
    and constants ``C1 = (k1 L)^2``, ``C2 = (k2 L)^2``.
    """
    a, b = _pair(x, x_gt)
    if a.ndim != 3 or min(a.shape) < window or window < 2:
        raise ConfigurationError(f"window {window} does not fit volume shape {a.shape}")
    L = default_data_range(b) if data_range is None else float(data_range)
    if not L > 0:
        raise ConfigurationError("data_range must be positive")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    n = window ** 3
    cov_norm = n / (n - 1.0)

    def mean(img):
        return uniform_filter(img, size=window, mode="reflect")

    ux, uy = mean(a), mean(b)
    vx = cov_norm * (mean(a * a) - ux * ux)
    vy = cov_norm * (mean(b * b) - uy * uy)
    vxy = cov_norm * (mean(a * b) - ux * uy)
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    pad = (window - 1) // 2
    inner = tuple(slice(pad, s - pad) for s in a.shape)
    return float(np.mean((num / den)[inner]))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    rel_error: float


def evaluate(x, x_gt, data_range: Optional[float] = None, window: int = 7) -> MetricReport:
    return MetricReport(psnr(x, x_gt, data_range), ssim3d(x, x_gt, window, data_range),
                        rel_error(x, x_gt))


@dataclass
class ErrorHistory:
    """Iteration callback recording ``||x - x_gt|| / ||x_gt||``.

    ``boundaries`` holds the series index at which each new outer cycle
    starts, so restart spikes can be located afterwards.
    """

    truth: np.ndarray
    values: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64).ravel()
        self._norm = float(np.linalg.norm(self.truth)) or 1.0

    def __call__(self, x, j=None):
        self.values.append(float(np.linalg.norm(x - self.truth)) / self._norm)

    def start_cycle(self):
        self.boundaries.append(len(self.values))
