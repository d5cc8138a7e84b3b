"""Segmentation quality metrics: DSC/SN/SP on pixel counts, plus Hausdorff and
average surface distance in millimeters.

Hausdorff distance is measured between all foreground pixel centers; ASD
between surface pixels (foreground pixels with a 4-neighbor that is background
or outside the image). Distances are Euclidean after scaling each axis by the
pixel spacing. Empty point sets make HD/ASD undefined and raise
``EmptyMaskError``; report aggregation records and excludes such cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyMaskError, UsageError

_CHUNK = 2048  # rows of the pairwise distance block computed at once


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray            # H x W, strictly {0, 1}
    spacing: tuple[float, float]  # (row_mm, col_mm)

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.all(np.isin(arr, (0, 1))):
            raise DimensionError("mask must contain only 0 and 1")
        r, c = self.spacing
        if not (0 < r < 10 and 0 < c < 10):
            raise UsageError(f"pixel spacing out of range (0, 10) mm: {self.spacing}")
        object.__setattr__(self, "values", arr.astype(np.uint8))


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = pred.values if isinstance(pred, BinaryMask) else np.asarray(pred)
    g = gt.values if isinstance(gt, BinaryMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p.astype(bool), g.astype(bool)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) pixel counts."""
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    tn = int(np.count_nonzero(~p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, tn, fn


def dsc_binary(counts) -> float:
    tp, fp, _, fn = counts
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0  # both masks empty of foreground


def sensitivity(counts) -> float:
    tp, fp, _, fn = counts
    if tp + fn == 0:  # no true foreground: perfect iff none predicted
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def specificity(counts) -> float:
    _, fp, tn, fn = counts
    if tn + fp == 0:  # no true background: perfect iff none predicted
        return 1.0 if fn == 0 else 0.0
    return tn / (tn + fp)


def surface(mask) -> np.ndarray:
    """Boolean map of foreground pixels with a 4-neighbor outside the foreground
    (the image border counts as background)."""
    m = (mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _points_mm(where: np.ndarray, spacing) -> np.ndarray:
    pts = np.argwhere(where).astype(np.float64)
    pts[:, 0] *= spacing[0]
    pts[:, 1] *= spacing[1]
    return pts


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For every point of ``a``: squared distance to its nearest point of ``b``."""
    out = np.empty(len(a))
    for lo in range(0, len(a), _CHUNK):
        chunk = a[lo:lo + _CHUNK]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + _CHUNK] = d2.min(axis=1)
    return out


def _check_spacing(pred: BinaryMask, gt: BinaryMask) -> tuple[float, float]:
    if pred.spacing != gt.spacing:
        raise UsageError(
            f"spacings differ: {pred.spacing} vs {gt.spacing}")
    return pred.spacing


def hausdorff(pred: BinaryMask, gt: BinaryMask) -> float:
    """max(h(C,D), h(D,C)) over all foreground pixel centers, in mm."""
    spacing = _check_spacing(pred, gt)
    _pair(pred, gt)
    c = _points_mm(pred.values.astype(bool), spacing)
    d = _points_mm(gt.values.astype(bool), spacing)
    if len(c) == 0 or len(d) == 0:
        raise EmptyMaskError("hausdorff distance of an empty mask is undefined")
    h_cd = _min_dists(c, d).max()
    h_dc = _min_dists(d, c).max()
    return float(np.sqrt(max(h_cd, h_dc)))


def asd(pred: BinaryMask, gt: BinaryMask) -> float:
    """Symmetric mean nearest-surface distance between mask boundaries, in mm."""
    spacing = _check_spacing(pred, gt)
    _pair(pred, gt)
    pa = _points_mm(surface(pred), spacing)
    pb = _points_mm(surface(gt), spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyMaskError("average surface distance of an empty mask is undefined")
    total = np.sqrt(_min_dists(pa, pb)).sum() + np.sqrt(_min_dists(pb, pa)).sum()
    return float(total / (len(pa) + len(pb)))


# ---------------------------------------------------------------------------
# Per-image records and aggregate reports


@dataclass
class ImageMetrics:
    image_id: str
    dsc: float
    sn: float
    sp: float
    hd_mm: float | None  # None when undefined (an empty mask)
    asd_mm: float | None


@dataclass
class MetricsReport:
    model: str
    rows: list[ImageMetrics] = field(default_factory=list)
    fold: int | None = None

    def _defined(self, attr: str) -> list[float]:
        return [getattr(r, attr) for r in self.rows
                if getattr(r, attr) is not None]

    def aggregate(self) -> dict[str, float]:
        """Means and population standard deviations; undefined HD/ASD excluded."""
        out: dict[str, float] = {}
        for attr in ("dsc", "sn", "sp", "hd_mm", "asd_mm"):
            vals = self._defined(attr)
            out[f"{attr}_mean"] = float(np.mean(vals)) if vals else float("nan")
            out[f"{attr}_std"] = float(np.std(vals)) if vals else float("nan")
        out["n_images"] = len(self.rows)
        out["n_undefined_hd"] = sum(1 for r in self.rows if r.hd_mm is None)
        out["n_undefined_asd"] = sum(1 for r in self.rows if r.asd_mm is None)
        return out


def score_pair(image_id: str, pred: BinaryMask, gt: BinaryMask) -> ImageMetrics:
    """All five metrics for one prediction/ground-truth pair."""
    counts = confusion(pred, gt)
    try:
        hd = hausdorff(pred, gt)
    except EmptyMaskError:
        hd = None
    try:
        sd = asd(pred, gt)
    except EmptyMaskError:
        sd = None
    return ImageMetrics(image_id, dsc_binary(counts), sensitivity(counts),
                        specificity(counts), hd, sd)
