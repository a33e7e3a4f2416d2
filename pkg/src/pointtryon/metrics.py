"""Evaluation metrics: SSIM, patch descriptors, nearest-neighbor matching,
RANSAC homography and point-matching error.

Images follow the repository convention of float arrays in [-1, 1]; SSIM
remaps them to [0, 1] internally and uses the standard 11x11 Gaussian
window (sigma 1.5) with stabilizers C1 = 0.01^2, C2 = 0.03^2 on unit range.
Changing that remapping or those constants is a breaking change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .points import PointSet, detect_interest_points

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_WIN = 11
_SIGMA = 1.5


class HomographyError(RuntimeError):
    """Raised when no valid homography can be estimated."""


@dataclass
class MatchReport:
    """Correspondence summary between a garment image and a synthesized one.

    ``pairs`` is (N, 2, 2): pairs[i, 0] is the garment point, pairs[i, 1]
    the matched point in the output image. ``homography`` is None when
    fewer than 4 matches support an estimate.
    """

    pairs: np.ndarray
    inliers: np.ndarray
    homography: np.ndarray | None
    inlier_rate: float

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _gaussian_kernel(win: int, sigma: float) -> np.ndarray:
    x = np.arange(win) - (win - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity between two [-1, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    a = (a + 1.0) / 2.0
    b = (b + 1.0) / 2.0
    k = _gaussian_kernel(_WIN, _SIGMA)

    def blur(x):
        out = ndimage.correlate1d(x, k, axis=-2, mode="reflect")
        return ndimage.correlate1d(out, k, axis=-1, mode="reflect")

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    smap = num / den
    pad = _WIN // 2
    core = smap[..., pad:-pad, pad:-pad] if min(smap.shape[-2:]) > 2 * pad else smap
    return float(core.mean())


def patch_descriptor(image: np.ndarray, point, radius: int = 4) -> np.ndarray:
    """Mean-subtracted, L2-normalized grayscale patch around a point.

    The image is reflection-padded so border points are valid; a patch with
    zero variance yields a zero vector.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    padded = np.pad(img, radius, mode="reflect")
    r = int(round(float(point[0]))) + radius
    c = int(round(float(point[1]))) + radius
    patch = padded[r - radius: r + radius + 1, c - radius: c + radius + 1].ravel()
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm == 0.0:
        return np.zeros_like(patch)
    return patch / norm


def describe_points(image: np.ndarray, pts: PointSet, radius: int = 4) -> np.ndarray:
    """Stack patch descriptors for every point, shape (K, (2r+1)^2)."""
    if len(pts) == 0:
        return np.zeros((0, (2 * radius + 1) ** 2))
    return np.stack([patch_descriptor(image, p, radius) for p in pts.coords])


def nn_match(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.8) -> list[tuple[int, int]]:
    """Lowe-ratio nearest-neighbor matching with mutual-nearest filtering.

    For each descriptor in ``a`` the nearest in ``b`` is kept iff
    dist1/dist2 < ratio and the pairing is mutual, which enforces a
    one-to-one match list.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    desc_a = np.atleast_2d(np.asarray(desc_a, dtype=np.float64))
    desc_b = np.atleast_2d(np.asarray(desc_b, dtype=np.float64))
    if desc_a.size == 0 or desc_b.size == 0:
        return []
    d2 = ((desc_a[:, None, :] - desc_b[None, :, :]) ** 2).sum(axis=2)
    nearest_b = np.argmin(d2, axis=1)
    nearest_a = np.argmin(d2, axis=0)
    matches = []
    for i, j in enumerate(nearest_b):
        if nearest_a[j] != i:
            continue
        d1 = np.sqrt(d2[i, j])
        if d2.shape[1] == 1:
            matches.append((i, int(j)))
            continue
        d_sorted = np.sqrt(np.partition(d2[i], 1)[:2])
        d2nd = d_sorted[1]
        if d2nd == 0.0:
            continue  # duplicate descriptors: ambiguous, fails the ratio test
        if d1 / d2nd < ratio:
            matches.append((i, int(j)))
    return matches


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    ph = np.hstack([pts, np.ones((len(pts), 1))])
    return (T @ ph.T).T[:, :2], T


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    A[0::2] = np.c_[x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u]
    A[1::2] = np.c_[np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v]
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-10:  # rank-deficient: degenerate configuration
        return None
    H = Vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.hstack([pts, np.ones((len(pts), 1))])
    q = (H @ ph.T).T
    return q[:, :2] / q[:, 2:3]


def _symmetric_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    Hinv = np.linalg.inv(H)
    fwd = ((_project(H, src) - dst) ** 2).sum(axis=1)
    bwd = ((_project(Hinv, dst) - src) ** 2).sum(axis=1)
    return np.sqrt(fwd + bwd)


def _noncollinear(pts: np.ndarray, eps: float = 1e-6) -> bool:
    for i in range(len(pts)):
        others = np.delete(pts, i, axis=0)
        area = 0.5 * abs(np.cross(others[1] - others[0], others[2] - others[0]))
        if area < eps:
            return False
    return True


def estimate_homography(
    src: np.ndarray,
    dst: np.ndarray,
    iters: int = 2000,
    tol_px: float = 2.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC homography via 4-point DLT with a least-squares inlier refit.

    Maximizes the inlier count under symmetric transfer error < tol_px.
    Degenerate (collinear) minimal samples are rejected and resampled.
    Deterministic for a fixed seed. Returns (H with H[2,2] = 1, inlier mask).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 4:
        raise ValueError("need at least 4 point pairs")
    src_n, Ts = _normalize_points(src)
    dst_n, Td = _normalize_points(dst)
    Td_inv = np.linalg.inv(Td)
    rng = np.random.default_rng(seed)
    n = len(src)
    best_inl: np.ndarray | None = None
    best_count = -1
    best_err = np.inf
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        if not (_noncollinear(src_n[idx]) and _noncollinear(dst_n[idx])):
            continue
        Hn = _dlt(src_n[idx], dst_n[idx])
        if Hn is None:
            continue
        H = Td_inv @ Hn @ Ts
        err = _symmetric_error(H, src, dst)
        inl = err < tol_px
        count = int(inl.sum())
        total = float(np.minimum(err, tol_px).sum())
        if count > best_count or (count == best_count and total < best_err):
            best_count, best_err, best_inl = count, total, inl
    if best_inl is None or best_count < 4:
        raise HomographyError("no non-degenerate minimal sample found")
    # least-squares refit on the consensus set
    Hn = _dlt(src_n[best_inl], dst_n[best_inl])
    if Hn is not None:
        H_ref = Td_inv @ Hn @ Ts
        err = _symmetric_error(H_ref, src, dst)
        if int((err < tol_px).sum()) >= best_count:
            best_inl = err < tol_px
            Hn2 = _dlt(src_n[best_inl], dst_n[best_inl])
            if Hn2 is not None:
                H_ref = Td_inv @ Hn2 @ Ts
            return H_ref / H_ref[2, 2], err < tol_px
    # fall back to the best minimal-sample model
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        if _noncollinear(src_n[idx]) and _noncollinear(dst_n[idx]):
            Hn = _dlt(src_n[idx], dst_n[idx])
            if Hn is not None:
                H = Td_inv @ Hn @ Ts
                return H / H[2, 2], _symmetric_error(H, src, dst) < tol_px
    raise HomographyError("degenerate geometry")


def correspondence_rate(
    garment: np.ndarray,
    output: np.ndarray,
    max_n: int = 200,
    response_threshold: float = 0.01,
    radius: int = 4,
    ratio: float = 0.8,
    iters: int = 2000,
    tol_px: float = 2.0,
    seed: int = 0,
) -> MatchReport:
    """Detect, describe and match points across the two images, then score
    the matches with a RANSAC homography. Inlier pairs are the visual
    correspondences preserved by the synthesis."""
    pts_g = detect_interest_points(garment, max_n, response_threshold)
    pts_o = detect_interest_points(output, max_n, response_threshold)
    desc_g = describe_points(garment, pts_g, radius)
    desc_o = describe_points(output, pts_o, radius)
    matches = nn_match(desc_g, desc_o, ratio)
    pairs = np.array(
        [[pts_g.coords[i], pts_o.coords[j]] for i, j in matches], dtype=np.float64
    ).reshape(-1, 2, 2)
    if len(pairs) < 4:
        return MatchReport(pairs, np.zeros(len(pairs), dtype=bool), None, 0.0)
    try:
        H, inl = estimate_homography(pairs[:, 0], pairs[:, 1], iters, tol_px, seed)
    except HomographyError:
        return MatchReport(pairs, np.zeros(len(pairs), dtype=bool), None, 0.0)
    return MatchReport(pairs, inl, H, float(inl.mean()))


def point_match_mse(predicted: PointSet, ground_truth: PointSet) -> float:
    """Mean squared Euclidean distance (px^2) between index-paired points."""
    if len(predicted) != len(ground_truth):
        raise ValueError("point count mismatch")
    d = predicted.coords - ground_truth.coords
    return float((d * d).sum(axis=1).mean())


def match_points_into_image(
    template: np.ndarray,
    output: np.ndarray,
    expected: PointSet,
    radius: int = 4,
    search_radius: int = 5,
) -> PointSet:
    """Locate semantic points in the output by local template search.

    Mirrors warp-based point matching: ``template`` is the flow-warped
    garment (so its patches carry the appearance expected at each point)
    and ``expected`` the flow-projected point locations. Each template
    patch descriptor is matched against every integer position within
    ``search_radius`` of its expected location. On a faithful
    reconstruction the best match sits at the true location; on a degraded
    one it wanders inside the window. Index-paired with ``expected``.
    """
    h, w = output.shape[-2:]
    picked = np.empty((len(expected), 2))
    for k, pe in enumerate(expected.coords):
        target = patch_descriptor(template, pe, radius)
        best, best_d = tuple(pe), np.inf
        r0 = int(round(pe[0]))
        c0 = int(round(pe[1]))
        for r in range(max(r0 - search_radius, 0), min(r0 + search_radius, h - 1) + 1):
            for c in range(max(c0 - search_radius, 0), min(c0 + search_radius, w - 1) + 1):
                d = ((patch_descriptor(output, (r, c), radius) - target) ** 2).sum()
                if d < best_d:
                    best, best_d = (float(r), float(c)), d
        picked[k] = best
    return PointSet(picked, frame=(h, w), unique=False)
