"""Interest-point detection, farthest-point subsampling and point masks.

Coordinate convention used across the repository: a point is (x, y) where
x is the row (vertical, in [0, H-1]) and y is the column (horizontal, in
[0, W-1]), sub-pixel values allowed. Frames are (height, width) tuples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class PointSet:
    """An ordered set of 2-d points tied to an image frame.

    ``coords`` has shape (K, 2) with columns (row, col). Exact duplicates
    are rejected unless ``unique=False`` (projected point sets may collide
    after clipping to the target frame).
    """

    coords: np.ndarray
    frame: tuple[int, int]
    unique: bool = True

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        if coords.size == 0:
            coords = coords.reshape(0, 2)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (K, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        h, w = self.frame
        if coords.size and (
            coords[:, 0].min() < 0 or coords[:, 0].max() > h - 1
            or coords[:, 1].min() < 0 or coords[:, 1].max() > w - 1
        ):
            raise ValueError(f"coords outside frame {self.frame}")
        if self.unique and len(np.unique(coords, axis=0)) != len(coords):
            raise ValueError("duplicate points in set")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "frame", (int(h), int(w)))

    def __len__(self) -> int:
        return int(self.coords.shape[0])


@dataclass(frozen=True)
class PointMask:
    """Binary grid marking (dilated) point cells at latent resolution."""

    grid: np.ndarray
    dilation_radius: int

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or not np.isin(grid, (0, 1)).all():
            raise ValueError("grid must be a 2-d 0/1 array")
        grid = grid.astype(np.float32)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    if image.ndim != 2:
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {image.shape}")
    return image


# Binomial kernels: dyadic-rational weights keep the response map exactly
# symmetric for symmetric inputs, so equal-response corners survive the
# equality-based non-maximum suppression.
_SMOOTH3 = np.array([0.25, 0.5, 0.25])
_SMOOTH5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_DIFF = np.array([-0.5, 0.0, 0.5])


def _separable(img: np.ndarray, k0: np.ndarray, k1: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, k0, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k1, axis=1, mode="reflect")


def corner_response(image: np.ndarray) -> np.ndarray:
    """Min-eigenvalue (Shi-Tomasi style) structure-tensor corner response."""
    gray = _to_gray(image)
    if min(gray.shape) < 3:
        raise ValueError(f"image too small for corner detection: {gray.shape}")
    gray = _separable(gray, _SMOOTH3, _SMOOTH3)
    gx = ndimage.correlate1d(gray, _DIFF, axis=0, mode="reflect")
    gy = ndimage.correlate1d(gray, _DIFF, axis=1, mode="reflect")
    sxx = _separable(gx * gx, _SMOOTH5, _SMOOTH5)
    syy = _separable(gy * gy, _SMOOTH5, _SMOOTH5)
    sxy = _separable(gx * gy, _SMOOTH5, _SMOOTH5)
    half_tr = 0.5 * (sxx + syy)
    half_diff = 0.5 * (sxx - syy)
    return half_tr - np.sqrt(half_diff * half_diff + sxy * sxy)


def detect_interest_points(
    image: np.ndarray, max_n: int = 200, response_threshold: float = 0.01
) -> PointSet:
    """Detect up to ``max_n`` corners, strongest first.

    ``response_threshold`` is relative to the maximum response in the image;
    candidates are non-maximum-suppressed with a 3 px radius (equal-valued
    plateaus all survive). A constant image yields an empty set.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    resp = corner_response(image)
    h, w = resp.shape
    peak = float(resp.max())
    if peak <= 0.0:
        return PointSet(np.empty((0, 2)), frame=(h, w))
    local_max = ndimage.maximum_filter(resp, size=7, mode="constant", cval=-np.inf)
    keep = (resp >= local_max) & (resp > response_threshold * peak)
    rows, cols = np.nonzero(keep)
    order = np.argsort(-resp[rows, cols], kind="stable")[:max_n]
    coords = np.stack([rows[order], cols[order]], axis=1).astype(np.float64)
    return PointSet(coords, frame=(h, w))


def farthest_point_sample(points: PointSet, K: int) -> PointSet:
    """Greedy max-min subset selection of K points.

    Seeded at the point farthest from the centroid; every round adds the
    point maximizing the minimum distance to the selected set. Ties break
    toward the lowest input index. Returns the input unchanged when
    K >= len(points).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if K >= n:
        return points
    coords = points.coords
    centroid = coords.mean(axis=0)
    chosen = [int(np.argmax(((coords - centroid) ** 2).sum(axis=1)))]
    min_d2 = ((coords - coords[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < K:
        idx = int(np.argmax(min_d2))
        chosen.append(idx)
        min_d2 = np.minimum(min_d2, ((coords - coords[idx]) ** 2).sum(axis=1))
    return PointSet(coords[chosen], frame=points.frame)


def build_point_mask(
    p_h: PointSet, latent_h: int, latent_w: int, downscale: int = 1, r: int = 0
) -> PointMask:
    """Rasterize points onto a latent grid, dilating by Chebyshev radius r.

    Each point lands in cell (floor(x / downscale), floor(y / downscale));
    the dilated square is clipped to the grid.
    """
    if downscale < 1:
        raise ValueError("downscale must be >= 1")
    if r < 0:
        raise ValueError("dilation radius must be >= 0")
    grid = np.zeros((latent_h, latent_w), dtype=np.float32)
    for x, y in p_h.coords:
        cx = int(np.floor(x / downscale))
        cy = int(np.floor(y / downscale))
        if not (0 <= cx < latent_h and 0 <= cy < latent_w):
            raise ValueError(f"point ({x}, {y}) maps outside the {latent_h}x{latent_w} grid")
        grid[max(cx - r, 0): cx + r + 1, max(cy - r, 0): cy + r + 1] = 1.0
    return PointMask(grid=grid, dilation_radius=int(r))
