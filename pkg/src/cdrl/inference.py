"""Error maps, binarisation and patch-level decisions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from skimage.filters import threshold_otsu

from .core import ErrorMap, ImageGrid
from .errors import ParamError, ShapeError
from .models import Reconstructor, grid_to_tensor

THRESHOLD_METHODS = ("fixed", "quantile", "otsu")


@dataclass(frozen=True, eq=False)
class ChangeMask:
    grid: ImageGrid
    threshold_used: float
    method: str

    def __post_init__(self):
        if self.method not in THRESHOLD_METHODS:
            raise ParamError(f"unknown threshold method {self.method!r}")
        d = self.grid.data
        if d.shape[2] != 1 or not np.all((d == 0) | (d == 1)):
            raise ParamError("change mask must be a single-channel 0/1 grid")

    @property
    def values(self) -> np.ndarray:
        return self.grid.data[:, :, 0]


def smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return values
    return ndimage.gaussian_filter(values.astype(np.float64), sigma, mode="reflect").astype(np.float32)


def error_from_reconstruction(recon: np.ndarray, t1: np.ndarray, smooth_sigma: float = 0.0) -> ErrorMap:
    """Channel-mean absolute error between two HWC arrays, optionally smoothed."""
    err = np.abs(recon.astype(np.float64) - t1.astype(np.float64)).mean(axis=2)
    return ErrorMap.from_array(np.maximum(smooth(err.astype(np.float32), smooth_sigma), 0.0))


def error_map(model: Reconstructor, t1: ImageGrid, t2: ImageGrid, smooth_sigma: float = 0.0) -> ErrorMap:
    """Per-pixel |R(t1, t2) - t1| averaged over channels (model-space units)."""
    if t1.shape != t2.shape:
        raise ShapeError(f"pair shapes differ: {t1.shape} vs {t2.shape}")
    if t1.space != "model" or t2.space != "model":
        raise ShapeError("error_map expects model-space grids")
    model.eval()
    with torch.no_grad():
        recon = model(grid_to_tensor(t1), grid_to_tensor(t2))
    recon = recon[0].numpy().transpose(1, 2, 0)
    return error_from_reconstruction(recon, t1.data, smooth_sigma)


def threshold_map(emap: ErrorMap, method: str = "otsu", param: float | None = None) -> ChangeMask:
    """Binarise an error map; a pixel is changed when its value exceeds the threshold.

    fixed: threshold = param. quantile: threshold = q-th quantile of the map
    (param = q in (0, 1)). otsu: 256-bin Otsu on the min-max normalised map,
    mapped back to map units; a constant map yields an empty mask.
    """
    values = emap.values.astype(np.float64)
    if method == "fixed":
        if param is None:
            raise ParamError("fixed thresholding needs a threshold")
        thr = float(param)
    elif method == "quantile":
        if param is None or not 0.0 < param < 1.0:
            raise ParamError(f"quantile must lie in (0, 1), got {param}")
        thr = float(np.quantile(values, param))
    elif method == "otsu":
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 0:
            thr = hi
        else:
            norm = (values - lo) / (hi - lo)
            thr = lo + float(threshold_otsu(norm, nbins=256)) * (hi - lo)
    else:
        raise ParamError(f"unknown threshold method {method!r}")
    mask = (values > thr).astype(np.float32)
    return ChangeMask(ImageGrid(mask, "unit"), thr, method)


def patch_decision(mask: ChangeMask) -> bool:
    """A patch is changed iff any mask pixel is set."""
    return bool(np.any(mask.values == 1))


def patch_score(emap: ErrorMap, top_fraction: float = 0.01) -> float:
    """Mean of the largest ceil(top_fraction * H * W) error values."""
    if not 0.0 < top_fraction <= 1.0:
        raise ParamError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    flat = emap.values.ravel().astype(np.float64)
    k = max(1, math.ceil(top_fraction * flat.size - 1e-9))
    top = np.partition(flat, flat.size - k)[flat.size - k:]
    return float(top.mean())


def overlay(mask: ChangeMask, t2: ImageGrid, alpha: float = 0.5, colour=(1.0, 0.0, 0.0)) -> ImageGrid:
    """Alpha-blend the mask in ``colour`` over t2 (returned in unit space)."""
    base = t2.to_space("unit").data if t2.space == "model" else t2.data
    m = mask.values[:, :, None] * alpha
    out = base * (1 - m) + np.asarray(colour, dtype=np.float32) * m
    return ImageGrid(np.clip(out, 0, 1), "unit")
