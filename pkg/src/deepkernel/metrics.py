"""Image quality and regional uptake metrics.

``psnr`` divides the peak by the MSE itself (not its root) and ``ssim`` uses
stabilisers ``c1 = 0.01 R`` and ``c2 = 0.03 R`` with ``R = max(y)``. The
conventional forms are available as ``psnr_standard`` / ``ssim_standard``
for comparison with other tools.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

SSIM_WINDOW = 7


class MetricError(ValueError):
    pass


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size == 0:
        raise MetricError("empty input")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """``20 log10(max(y) / MSE(x, y))`` in dB."""
    x, y = _pair(x, y)
    err = mse(x, y)
    if err == 0:
        raise MetricError("identical images: PSNR undefined")
    peak = float(y.max())
    if peak <= 0:
        raise MetricError("reference maximum must be positive")
    return 20.0 * np.log10(peak / err)


def psnr_standard(x, y) -> float:
    """Conventional ``10 log10(max(y)^2 / MSE)``."""
    x, y = _pair(x, y)
    err = mse(x, y)
    if err == 0:
        raise MetricError("identical images: PSNR undefined")
    peak = float(y.max())
    if peak <= 0:
        raise MetricError("reference maximum must be positive")
    return 10.0 * np.log10(peak**2 / err)


def _ssim_map(x, y, c1, c2, window):
    if x.ndim != 2:
        raise MetricError("ssim expects 2-d images")
    if min(x.shape) < window:
        raise MetricError(f"image {x.shape} smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return num / den


def ssim(x, y, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows.

    Stacks of images (leading axes) are averaged over slices, each slice
    using its own reference maximum for ``R``.
    """
    x, y = _pair(x, y)
    if x.ndim > 2:
        pairs = zip(x.reshape(-1, *x.shape[-2:]), y.reshape(-1, *y.shape[-2:]))
        return float(np.mean([ssim(a, b, window) for a, b in pairs]))
    r = float(y.max())
    return float(_ssim_map(x, y, 0.01 * r, 0.03 * r, window).mean())


def ssim_standard(x, y, window: int = SSIM_WINDOW) -> float:
    """SSIM with the usual squared constants ``(0.01 R)^2, (0.03 R)^2``."""
    x, y = _pair(x, y)
    r = float(y.max())
    return float(_ssim_map(x, y, (0.01 * r) ** 2, (0.03 * r) ** 2, window).mean())


@dataclass
class RegionReport:
    """Per-region mean normalised bias and variance, in percent."""

    bias: dict[str, float] = field(default_factory=dict)
    variance: dict[str, float] = field(default_factory=dict)
    variance_definition: str = "variance of voxelwise (pred-ref)/mean(ref|region), x100, averaged over cases"

    def as_dict(self) -> dict:
        return {"bias": dict(self.bias), "variance": dict(self.variance), "variance_definition": self.variance_definition}


def regional_bias_variance(
    pred,
    ref,
    masks,
) -> RegionReport:
    """Mean normalised regional bias and variance relative to ``ref``.

    ``pred``, ``ref`` and ``masks`` are either single cases (arrays and a
    ``{region: bool array}`` mapping) or equal-length sequences of them.
    Bias for region r is ``|mean(pred|r) - mean(ref|r)| / mean(ref|r) * 100``
    averaged over cases; variance is the voxelwise variance of
    ``(pred - ref) / mean(ref|r)`` within r, times 100, averaged over cases.
    Empty regions are skipped with a warning.
    """
    if isinstance(masks, Mapping):
        preds, refs, mask_list = [pred], [ref], [masks]
    else:
        preds, refs, mask_list = list(pred), list(ref), list(masks)
    if not (len(preds) == len(refs) == len(mask_list)):
        raise MetricError("pred, ref and masks must have equal length")
    bias: dict[str, list[float]] = {}
    var: dict[str, list[float]] = {}
    for p, r, ms in zip(preds, refs, mask_list):
        p, r = _pair(p, r)
        taken = np.zeros(p.shape, dtype=bool)
        for name, m in ms.items():
            m = np.asarray(m, dtype=bool)
            if m.shape != p.shape:
                raise MetricError(f"mask {name!r} shape {m.shape} != image {p.shape}")
            if np.any(taken & m):
                raise MetricError(f"mask {name!r} overlaps another region")
            taken |= m
            if not m.any():
                log.warning("region %s is empty; skipped", name)
                continue
            ref_mean = r[m].mean()
            if ref_mean <= 0:
                log.warning("region %s has non-positive reference mean; skipped", name)
                continue
            bias.setdefault(name, []).append(abs(p[m].mean() - ref_mean) / ref_mean * 100.0)
            var.setdefault(name, []).append(np.var((p[m] - r[m]) / ref_mean) * 100.0)
    return RegionReport(
        bias={k: float(np.mean(v)) for k, v in bias.items()},
        variance={k: float(np.mean(v)) for k, v in var.items()},
    )


def region_masks(labels: np.ndarray, names: Sequence[str], skip: Sequence[str] = ("background",)) -> dict[str, np.ndarray]:
    return {name: labels == k for k, name in enumerate(names) if name not in skip}
