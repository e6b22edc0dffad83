"""Reconstruction metrics: PSNR, volumetric SSIM, Dice, and the Dice delta.

PSNR uses peak 1.0 (volumes are normalized) and caps at 100 dB so identical
inputs have a defined value. SSIM is the mean local score over uniform 7³
windows at stride 1 with reflected borders; constants follow the usual
C1=(0.01)², C2=(0.03)² choices at data range L=1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import Volume

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
_C1 = 0.01**2
_C2 = 0.03**2


@dataclass(frozen=True)
class BinaryMask:
    side: int
    data: np.ndarray  # (S, S, S) bool

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=bool)
        if arr.shape != (self.side,) * 3:
            raise ValueError(f"mask shape {arr.shape} does not match side {self.side}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    dice_delta: float | None = None

    def format(self) -> str:
        line = f"psnr={self.psnr:.6f} ssim={self.ssim:.6f}"
        if self.dice_delta is not None:
            line += f" dice_delta={self.dice_delta:.6f}"
        return line


def _check_sides(a: Volume, b: Volume) -> None:
    if a.side != b.side:
        raise ValueError(f"volume sides differ: {a.side} vs {b.side}")


def psnr(ref: Volume, test: Volume) -> float:
    """Peak signal-to-noise ratio in dB against a [0, 1] reference."""
    _check_sides(ref, test)
    r = ref.data.astype(np.float64)
    if r.min() < -1e-6 or r.max() > 1.0 + 1e-6:
        raise ValueError("psnr reference must lie in [0, 1]")
    gap = r - test.data.astype(np.float64)
    mse = float(np.mean(gap * gap))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim3(ref: Volume, test: Volume) -> float:
    """Mean local structural similarity over all 7³ windows."""
    _check_sides(ref, test)
    if ref.side < SSIM_WINDOW:
        raise ValueError(f"ssim needs side >= {SSIM_WINDOW}, got {ref.side}")
    x = ref.data.astype(np.float64)
    y = test.data.astype(np.float64)

    def f(a):
        return uniform_filter(a, size=SSIM_WINDOW, mode="reflect")

    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    num = (2.0 * mx * my + _C1) * (2.0 * cxy + _C2)
    den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
    return float(np.mean(num / den))


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Overlap score 2|a∩b| / (|a|+|b|); two empty masks count as identical."""
    if a.side != b.side:
        raise ValueError(f"mask sides differ: {a.side} vs {b.side}")
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (na + nb)


def dice_delta(hf_mask: BinaryMask, bap_mask: BinaryMask, rac_mask: BinaryMask) -> float:
    """Dice(HF, corrected) - Dice(HF, corrupted); positive means the
    correction improved downstream segmentation."""
    return dice(hf_mask, rac_mask) - dice(hf_mask, bap_mask)


def otsu_mask(v: Volume, bins: int = 256) -> BinaryMask:
    """Foreground mask via Otsu's threshold on the intensity histogram.

    Stand-in segmenter so the Dice pipeline can run end to end without
    external tooling.
    """
    data = v.data.astype(np.float64)
    hist, edges = np.histogram(data, bins=bins)
    hist = hist.astype(np.float64)
    total = hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * centers)
    mu_total = s0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (mu_total - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    threshold = centers[int(np.argmax(between))]
    return BinaryMask(v.side, data > threshold)
