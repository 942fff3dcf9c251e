"""Image, depth, and pose evaluation metrics.

PSNR and SSIM operate on [0,1] images; SSIM uses the standard 11x11
Gaussian window (sigma 1.5) over fully interior positions, so inputs must
be at least window-sized.  Depth metrics run over an explicit validity
mask and require positive masked depths, since the log and ratio terms
are undefined otherwise.  LPIPS is out of scope (needs pretrained
perceptual weights) and is reported as "n/a" downstream.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_gray(img: np.ndarray) -> np.ndarray:
    """(H, W) pass-through or BT.601 luma of an (H, W, 3) image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _GRAY_WEIGHTS
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB when MSE < 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_kernel1d(width: int, sigma: float) -> np.ndarray:
    x = np.arange(width) - (width - 1) / 2.0
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation
    w = len(k)
    v = np.lib.stride_tricks.sliding_window_view(img, w, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(v, w, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM between two images (RGB inputs are converted to luma)."""
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gauss_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter2(a, k)
    mu_b = _filter2(b, k)
    var_a = _filter2(a * a, k) - mu_a * mu_a
    var_b = _filter2(b * b, k) - mu_b * mu_b
    cov = _filter2(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def depth_metrics(f: np.ndarray, g: np.ndarray, mask: np.ndarray) -> tuple:
    """(rmse, rmse_log, delta1, delta2, delta3) over masked pixels.

    deltas are the percentage of pixels with max(f/g, g/f) < 1.25**thr.
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (f.shape == g.shape == mask.shape):
        raise ValueError(f"shape mismatch: {f.shape}, {g.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("empty validity mask")
    fm, gm = f[mask], g[mask]
    if np.any(fm <= 0) or np.any(gm <= 0):
        raise ValueError("masked depths must be positive for log/ratio terms")
    rmse = float(np.sqrt(np.mean((fm - gm) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(fm) - np.log(gm)) ** 2)))
    ratio = np.maximum(fm / gm, gm / fm)
    deltas = tuple(float(100.0 * np.mean(ratio < 1.25 ** thr)) for thr in (1, 2, 3))
    return (rmse, rmse_log) + deltas


@dataclass
class MetricsBundle:
    """One evaluation row: image quality, depth accuracy, pose error."""

    psnr: float = float("nan")
    ssim: float = float("nan")
    depth_rmse: float = float("nan")
    depth_rmse_log: float = float("nan")
    delta1: float = float("nan")
    delta2: float = float("nan")
    delta3: float = float("nan")
    rot_err_deg: float = float("nan")
    trans_err_m: float = float("nan")
    valid_frac: float = float("nan")

    def __post_init__(self):
        if not np.isnan(self.ssim) and not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        ds = (self.delta1, self.delta2, self.delta3)
        known = [d for d in ds if not np.isnan(d)]
        if any(not 0.0 <= d <= 100.0 for d in known):
            raise ValueError(f"delta percentages outside [0, 100]: {ds}")
        if len(known) == 3 and not (ds[0] <= ds[1] <= ds[2]):
            raise ValueError(f"delta accuracies must be monotone, got {ds}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps({k: (None if np.isnan(v) else v) for k, v in self.to_dict().items()},
                          sort_keys=True, separators=(",", ":"))


FIELDS = list(MetricsBundle().to_dict())


def write_view_csv(path, rows: list, names: list | None = None):
    """One CSV row per test view; `names` labels each row (defaults to index)."""
    with open(path, "w") as fh:
        fh.write("view," + ",".join(FIELDS) + "\n")
        for i, b in enumerate(rows):
            d = b.to_dict()
            label = names[i] if names is not None else str(i)
            fh.write(label + "," + ",".join(repr(d[k]) for k in FIELDS) + "\n")
