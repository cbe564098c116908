"""Fractal-dimension estimators.

Four estimators share one log-log least-squares fit:

* ``box_counting``: cells holding at least one black pixel.
* ``cdb``: density-thresholded box occupancy on the binarized page; a cell
  counts when it holds at least ``tau`` black pixels.
* ``dbc``: differential box counting on the gray surface.
* ``dilation_dimension``: growth of the disk-dilated area with the radius.

Box methods work on the top-left ``M x M`` crop, ``M = min(width, height)``;
right/bottom cells that overhang the crop are evaluated over the pixels
they actually cover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import EstimatorError
from .raster import BinaryImage, GrayImage

METHODS = ("box_counting", "dbc", "cdb", "dilation")
METHOD_ALIASES = {"box": "box_counting", "box_counting": "box_counting", "dbc": "dbc",
                  "cdb": "cdb", "dilation": "dilation"}

DEFAULT_MAX_BOXES = (10, 15, 20, 30, 40)
DEFAULT_DILATION_ORDERS = (5, 10, 15, 20, 30)
POOR_FIT_R2 = 0.9


@dataclass(frozen=True)
class ScaleSample:
    """One point of the log-log plot: box side (or dilation radius) ``s``,
    normalized ratio ``r = s / M`` and the count at that scale."""

    s: float
    r: float
    count: float


@dataclass(frozen=True)
class FractalSignature:
    method: str
    param: int
    dimension: float
    fit_r2: float
    samples: tuple[ScaleSample, ...] = field(default=(), compare=False)
    tau: int | None = None

    @property
    def poor_fit(self) -> bool:
        """Regression looks unreliable (r^2 below 0.9). A warning, not an error."""
        return self.fit_r2 < POOR_FIT_R2

    @property
    def key(self) -> tuple[str, int]:
        return (self.method, self.param)


def default_scales(max_box: int) -> list[int]:
    """All integer box sides in ``[2, max_box]``."""
    return list(range(2, max_box + 1))


def fit_dimension(samples: Iterable[ScaleSample], sign: int = 1) -> tuple[float, float]:
    """OLS slope of ``ln N`` against ``ln(1/r)``, times ``sign``.

    Returns ``(D, r2)``. Samples with a zero count are dropped; at least
    three must remain. A perfectly flat series (all counts equal) has
    ``r2 = 1``.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    pts = [p for p in samples if p.count > 0]
    if len(pts) < 3:
        raise EstimatorError(f"need at least 3 scales with a non-zero count, got {len(pts)}")
    r = np.array([p.r for p in pts], dtype=np.float64)
    if np.any(r <= 0) or np.any(r >= 1):
        raise EstimatorError("scale ratios must lie strictly between 0 and 1")
    x = np.log(1.0 / r)
    y = np.log(np.array([p.count for p in pts], dtype=np.float64))
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise EstimatorError("all scale ratios are identical")
    dy = y - y.mean()
    slope = float(dx @ dy) / sxx
    ss_tot = float(dy @ dy)
    resid = dy - slope * dx
    ss_res = float(resid @ resid)
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return sign * slope, r2


def _square_crop(data: np.ndarray) -> np.ndarray:
    m = min(data.shape)
    return data[:m, :m]


def _check_scales(scales: Sequence[int], m: int) -> list[int]:
    scales = [int(s) for s in scales]
    if not scales:
        raise EstimatorError("empty scale set")
    for s in scales:
        if s < 2 or s > m / 2:
            raise EstimatorError(f"box side {s} outside [2, M/2] for M={m}")
    return sorted(set(scales))


def _cell_reduce(ufunc: np.ufunc, arr: np.ndarray, s: int) -> np.ndarray:
    starts = np.arange(0, arr.shape[0], s)
    return ufunc.reduceat(ufunc.reduceat(arr, starts, axis=0), starts, axis=1)


def box_black_counts(bin: BinaryImage, s: int) -> np.ndarray:
    """Black-pixel count of every ``s x s`` cell of the square crop."""
    crop = _square_crop(bin.data).astype(np.int64)
    return _cell_reduce(np.add, crop, s)


def _occupancy_signature(bin: BinaryImage, scales: Sequence[int], tau: int,
                         method: str, param: int) -> FractalSignature:
    m = bin.side
    scales = _check_scales(scales, m)
    if not bin.data[:m, :m].any():
        raise EstimatorError("no foreground: image has no black pixels")
    samples = []
    for s in scales:
        counts = box_black_counts(bin, s)
        samples.append(ScaleSample(s, s / m, float(np.count_nonzero(counts >= tau))))
    d, r2 = fit_dimension(samples)
    return FractalSignature(method, param, d, r2, tuple(samples),
                            tau if method == "cdb" else None)


def box_counting(bin: BinaryImage, scales: Sequence[int]) -> FractalSignature:
    """Classic box counting: a cell counts if it holds any black pixel."""
    return _occupancy_signature(bin, scales, 1, "box_counting", max(int(s) for s in scales))


def cdb(bin: BinaryImage, max_box: int = 20, tau: int = 1,
        scales: Sequence[int] | None = None) -> FractalSignature:
    """Box-density estimator on a binary page.

    Every integer side in ``[2, max_box]`` is used unless ``scales`` is given
    explicitly. A cell contributes 1 when it holds at least ``tau`` black
    pixels; with ``tau = 1`` this coincides with ``box_counting``.
    """
    if tau < 1:
        raise EstimatorError(f"tau must be >= 1, got {tau}")
    if scales is None:
        if max_box > bin.side / 2:
            raise EstimatorError(f"max_box {max_box} exceeds M/2 = {bin.side / 2}")
        scales = default_scales(max_box)
    else:
        max_box = max(int(s) for s in scales)
    return _occupancy_signature(bin, scales, tau, "cdb", max_box)


def dbc_counts(img: GrayImage, s: int) -> np.ndarray:
    """Per-cell ``n_r = l - k + 1`` for box side ``s``.

    The gray axis is cut into boxes of height ``h = s * G / M``; ``l`` and
    ``k`` are the gray-box indices of the cell maximum and minimum.
    """
    crop = _square_crop(img.data)
    m = crop.shape[0]
    h = s * img.gray_levels / m
    hi = _cell_reduce(np.maximum, crop, s).astype(np.float64)
    lo = _cell_reduce(np.minimum, crop, s).astype(np.float64)
    return (np.floor(hi / h) - np.floor(lo / h) + 1.0).astype(np.int64)


def dbc(img: GrayImage, max_box: int = 20, scales: Sequence[int] | None = None) -> FractalSignature:
    """Differential box counting over the gray-level surface (D in [2, 3])."""
    m = img.side
    if scales is None:
        if max_box > m / 2:
            raise EstimatorError(f"max_box {max_box} exceeds M/2 = {m / 2}")
        scales = default_scales(max_box)
    else:
        max_box = max(int(s) for s in scales)
    scales = _check_scales(scales, m)
    samples = [ScaleSample(s, s / m, float(dbc_counts(img, s).sum())) for s in scales]
    d, r2 = fit_dimension(samples)
    return FractalSignature("dbc", max_box, d, r2, tuple(samples))


def dilated_areas(bin: BinaryImage, orders: Sequence[int]) -> list[int]:
    """Black-pixel count after dilating with a Euclidean disk of each radius.

    A pixel joins the dilation iff its center lies within distance ``k`` of
    some black pixel center. Dilation is confined to the image frame.
    """
    # distance from every pixel to the nearest black pixel; black pixels get 0
    dist = ndimage.distance_transform_edt(~bin.data)
    return [int(np.count_nonzero(dist <= k)) for k in orders]


def dilation_dimension(bin: BinaryImage,
                       orders: Sequence[int] = DEFAULT_DILATION_ORDERS) -> FractalSignature:
    """Minkowski-sausage dimension: ``D = 2 - slope(ln A(k) vs ln k)``."""
    orders = sorted({int(k) for k in orders})
    if not orders:
        raise EstimatorError("empty dilation order set")
    m = bin.side
    if orders[0] < 1 or orders[-1] >= m:
        raise EstimatorError(f"dilation orders must lie in [1, M) for M={m}")
    if not bin.data.any():
        raise EstimatorError("no foreground: image has no black pixels")
    areas = dilated_areas(bin, orders)
    samples = [ScaleSample(k, k / m, float(a)) for k, a in zip(orders, areas)]
    # fit_dimension regresses on ln(1/r) = ln M - ln k, which flips the slope sign
    neg_slope, r2 = fit_dimension(samples)
    return FractalSignature("dilation", orders[-1], 2.0 + neg_slope, r2, tuple(samples))


def estimate(method: str, gray: GrayImage, bin: BinaryImage | None, *, max_box: int = 20,
             tau: int = 1, orders: Sequence[int] = DEFAULT_DILATION_ORDERS) -> FractalSignature:
    """Dispatch by method name (``box``/``box_counting``, ``cdb``, ``dbc``, ``dilation``)."""
    name = METHOD_ALIASES.get(method)
    if name is None:
        raise ValueError(f"unknown fractal method {method!r}")
    if name == "dbc":
        return dbc(gray, max_box)
    if bin is None:
        raise ValueError(f"{name} needs a binary image")
    if name == "cdb":
        return cdb(bin, max_box, tau)
    if name == "box_counting":
        if max_box > bin.side / 2:
            raise EstimatorError(f"max_box {max_box} exceeds M/2 = {bin.side / 2}")
        return box_counting(bin, default_scales(max_box))
    return dilation_dimension(bin, orders)

