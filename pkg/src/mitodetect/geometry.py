"""Centroid <-> disk-mask conversion and detection matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_MATCH_RADIUS = 30.0
DEFAULT_MIN_AREA = 25


@dataclass(frozen=True)
class DiskTargetSpec:
    diameter_px: int = 21
    patch_size_px: int = 512
    mpp: float = 0.25

    def __post_init__(self):
        if self.diameter_px < 1 or self.diameter_px % 2 == 0:
            raise ValueError(f"diameter_px must be odd and >= 1, got {self.diameter_px}")
        if self.patch_size_px < self.diameter_px:
            raise ValueError("patch_size_px must be >= diameter_px")
        if self.mpp <= 0:
            raise ValueError(f"mpp must be > 0, got {self.mpp}")

    @property
    def radius(self) -> float:
        return self.diameter_px / 2.0


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def render_disk_mask(
    centroids: Iterable[tuple[float, float]],
    spec: DiskTargetSpec = DiskTargetSpec(),
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Union of filled disks of ``spec.diameter_px`` around each centroid.

    Pixel ``(i, j)`` (row, column) is set iff
    ``(i - cy)**2 + (j - cx)**2 <= (diameter / 2)**2`` for some centroid.
    ``shape`` defaults to a square patch of ``spec.patch_size_px``.
    """
    h, w = shape if shape is not None else (spec.patch_size_px, spec.patch_size_px)
    mask = np.zeros((h, w), dtype=np.uint8)
    r = spec.radius
    r2 = r * r
    ri = int(np.ceil(r))
    for cx, cy in centroids:
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError(f"centroid ({cx}, {cy}) outside {w}x{h} patch")
        # only touch the bounding box of the disk
        y0, y1 = max(0, int(np.floor(cy)) - ri), min(h, int(np.ceil(cy)) + ri + 1)
        x0, x1 = max(0, int(np.floor(cx)) - ri), min(w, int(np.ceil(cx)) + ri + 1)
        ii, jj = np.mgrid[y0:y1, x0:x1]
        inside = (ii - cy) ** 2 + (jj - cx) ** 2 <= r2
        mask[y0:y1, x0:x1] |= inside.astype(np.uint8)
    return mask


_EIGHT = np.ones((3, 3), dtype=bool)


def mask_to_detections(
    prob_map: np.ndarray,
    threshold: float = 0.5,
    min_area_px: int = DEFAULT_MIN_AREA,
) -> list[Detection]:
    """Connected components (8-connectivity) of ``prob_map >= threshold``.

    Each surviving component yields its pixel centroid and the maximum
    probability inside it. Output is sorted by ``(y, x)``.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    prob_map = np.asarray(prob_map, dtype=np.float64)
    labels, n = ndimage.label(prob_map >= threshold, structure=_EIGHT)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(prob_map), labels, index)
    centers = ndimage.center_of_mass(np.ones_like(prob_map), labels, index)
    peaks = ndimage.maximum(prob_map, labels, index)
    dets = [
        Detection(x=float(cx), y=float(cy), score=float(np.clip(peak, 0.0, 1.0)))
        for area, (cy, cx), peak in zip(areas, centers, peaks)
        if area >= min_area_px
    ]
    dets.sort(key=lambda d: (d.y, d.x))
    return dets


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]

    def __iter__(self):
        return iter((self.tp, self.fp, self.fn, self.pairs))


def match_detections(
    preds: Sequence[Detection],
    truths: Sequence[tuple[float, float]],
    radius_px: float = DEFAULT_MATCH_RADIUS,
) -> MatchResult:
    """Greedy score-ordered matching of predictions to ground-truth points.

    Predictions are visited in descending score (stable on input order); each
    takes the nearest still-unmatched truth within ``radius_px``. ``pairs``
    holds ``(pred_index, truth_index)``.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be > 0")
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    free = np.ones(len(truths), dtype=bool)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    pairs = []
    for i in order:
        if not free.any():
            break
        d = np.hypot(truths[:, 0] - preds[i].x, truths[:, 1] - preds[i].y)
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius_px:
            free[j] = False
            pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(truths) - tp, pairs=pairs)


def write_detections(path: str | Path, detections: dict[str, list[Detection]]) -> None:
    """Write ``patch_id,x,y,score`` rows, patches in sorted order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "x", "y", "score"])
        for pid in sorted(detections):
            for d in detections[pid]:
                w.writerow([pid, f"{d.x:.3f}", f"{d.y:.3f}", f"{d.score:.6f}"])


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["patch_id"], []).append(
                Detection(float(row["x"]), float(row["y"]), float(row["score"]))
            )
    return out
