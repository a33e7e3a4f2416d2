"""Dense displacement fields: analytic construction, point projection and
differentiable-style image warping (numpy side).

A field stores per-pixel offsets over the person frame: ``offsets[i, j]`` is
the (d_row, d_col) displacement for garment coordinate (i, j). Projecting a
garment point p gives its person-frame location p + offsets(p); warping
reads the source image at (q - offsets(q)) for every target pixel q
(backward bilinear sampling, zero outside the source).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .points import PointSet


@dataclass(frozen=True)
class DisplacementField:
    """(H, W, 2) array of (d_row, d_col) offsets, finite everywhere."""

    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64)
        if off.ndim != 3 or off.shape[2] != 2:
            raise ValueError(f"offsets must be (H, W, 2), got {off.shape}")
        if not np.all(np.isfinite(off)):
            raise ValueError("offsets must be finite")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def shape(self) -> tuple[int, int]:
        return self.offsets.shape[0], self.offsets.shape[1]


def make_affine_flow(A: np.ndarray, b: np.ndarray, h: int, w: int) -> DisplacementField:
    """Field realizing p -> A p + b: offsets(p) = (A p + b) - p."""
    A = np.asarray(A, dtype=np.float64).reshape(2, 2)
    b = np.asarray(b, dtype=np.float64).reshape(2)
    if h < 1 or w < 1:
        raise ValueError("field dimensions must be >= 1")
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    off = np.empty((h, w, 2))
    off[..., 0] = (A[0, 0] - 1.0) * rr + A[0, 1] * cc + b[0]
    off[..., 1] = A[1, 0] * rr + (A[1, 1] - 1.0) * cc + b[1]
    return DisplacementField(off)


def make_smooth_flow(
    affine: DisplacementField, bend_amp: float, bend_freq: float, seed: int
) -> DisplacementField:
    """Add a band-limited sinusoidal bend of magnitude <= bend_amp."""
    if bend_amp < 0:
        raise ValueError("bend_amp must be >= 0")
    if bend_amp == 0:
        return affine
    h, w = affine.shape
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=4)
    theta = rng.uniform(0, 2 * np.pi)
    rr, cc = np.meshgrid(np.arange(h) / max(h - 1, 1),
                         np.arange(w) / max(w - 1, 1), indexing="ij")
    wave_r = np.sin(2 * np.pi * bend_freq * cc + phase[0]) * np.sin(
        2 * np.pi * bend_freq * rr + phase[1])
    wave_c = np.sin(2 * np.pi * bend_freq * rr + phase[2]) * np.sin(
        2 * np.pi * bend_freq * cc + phase[3])
    off = affine.offsets.copy()
    off[..., 0] += bend_amp * np.cos(theta) * wave_r
    off[..., 1] += bend_amp * np.sin(theta) * wave_c
    return DisplacementField(off)


def _bilinear_gather(arr: np.ndarray, pr: np.ndarray, pc: np.ndarray) -> np.ndarray:
    """Sample arr (..., H, W) at float positions, zero outside [0, H-1]x[0, W-1]."""
    h, w = arr.shape[-2:]
    r0 = np.floor(pr).astype(np.int64)
    c0 = np.floor(pc).astype(np.int64)
    fr = pr - r0
    fc = pc - c0
    out = np.zeros(arr.shape[:-2] + pr.shape, dtype=np.float64)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        r = r0 + dr
        c = c0 + dc
        valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        rs = np.clip(r, 0, h - 1)
        cs = np.clip(c, 0, w - 1)
        out += np.where(valid, wgt, 0.0) * arr[..., rs, cs]
    return out


def apply_flow_to_points(p_g: PointSet, field: DisplacementField) -> PointSet:
    """Project garment points through the field: P_H = P_G + M(P_G).

    Offsets are looked up with bilinear interpolation at the (sub-pixel)
    garment coordinates; results are clipped to the person frame.
    """
    h, w = field.shape
    coords = p_g.coords
    if coords.size and (coords[:, 0].max() > h - 1 or coords[:, 1].max() > w - 1):
        raise ValueError("point outside field extent")
    off = np.stack(
        [
            _bilinear_gather(field.offsets[..., 0], coords[:, 0], coords[:, 1]),
            _bilinear_gather(field.offsets[..., 1], coords[:, 0], coords[:, 1]),
        ],
        axis=1,
    )
    moved = coords + off
    moved[:, 0] = np.clip(moved[:, 0], 0, h - 1)
    moved[:, 1] = np.clip(moved[:, 1], 0, w - 1)
    return PointSet(moved, frame=(h, w), unique=False)


def warp_image(image: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Backward-warp ``image`` by the field onto the field's frame.

    Output pixel q reads the source at q - offsets(q) with bilinear
    interpolation; reads outside the source return 0. The source may have a
    different spatial size than the field (garment -> person warping).
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got {image.shape}")
    h, w = field.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pr = rr - field.offsets[..., 0]
    pc = cc - field.offsets[..., 1]
    out = _bilinear_gather(image, pr, pc)
    return out[0] if squeeze else out
