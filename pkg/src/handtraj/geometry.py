"""Planar projective geometry: DLT homography solving, RANSAC, chain
composition to a canvas frame, point reprojection, and the exact homography of
a rotating pinhole camera.

Points are (n, 2) arrays in normalized image coordinates. Homographies are
3x3 row-major arrays normalized to h33 = 1.
"""

from __future__ import annotations

import numpy as np


class RankDeficientError(ValueError):
    """Degenerate correspondence configuration (e.g. 3 collinear of 4)."""


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("homography not normalizable: h33 ~ 0")
    return h / h[2, 2]


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map (n, 2) or (2,) points through h with dehomogenization."""
    h = np.asarray(h, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    mapped = hom @ h.T
    w = mapped[:, 2]
    if np.any(np.abs(w) < 1e-15):
        raise ValueError("point maps to infinity (zero homogeneous depth)")
    out = mapped[:, :2] / w[:, None]
    return out[0] if single else out


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking the centroid to 0 and mean radius to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 1e-15 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography from >= 4 correspondences via normalized DLT.

    Builds the 2n x 9 design matrix in Hartley-normalized coordinates and takes
    the right singular vector of the smallest singular value.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"expected matching (n,2) point arrays, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 4:
        raise ValueError(f"need >= 4 correspondences, got {n}")
    ts = _hartley_normalization(src)
    td = _hartley_normalization(dst)
    sp = apply_homography(ts, src)
    dp = apply_homography(td, dst)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = sp
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -sp * dp[:, :1]
    a[0::2, 8] = -dp[:, 0]
    a[1::2, 3:5] = sp
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -sp * dp[:, 1:2]
    a[1::2, 8] = -dp[:, 1]
    _, sv, vt = np.linalg.svd(a)
    # a rank-deficient system has (at least) two vanishing singular values
    if n == 4 and sv[7] < 1e-9 * max(sv[0], 1e-30):
        raise RankDeficientError("degenerate correspondence set (rank-deficient DLT system)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return normalize_homography(h)


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair sqrt(d(dst, H src)^2 + d(src, H^-1 dst)^2)."""
    hinv = np.linalg.inv(h)
    fwd = apply_homography(h, src) - dst
    bwd = apply_homography(hinv, dst) - src
    return np.sqrt((fwd**2).sum(axis=1) + (bwd**2).sum(axis=1))


def ransac_homography(src: np.ndarray, dst: np.ndarray, threshold: float = 2e-3,
                      max_iters: int = 500, seed: int = 0,
                      confidence: float = 0.999):
    """Robust homography fit. Returns (H, inlier mask).

    Samples minimal 4-point sets, scores by symmetric transfer error, refits on
    the best consensus set. The iteration count adapts downward as the best
    inlier ratio grows (standard stopping rule at the given confidence).
    Raises if no model reaches 4 inliers.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ValueError(f"need >= 4 correspondences, got {len(src)}")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    rng = np.random.default_rng(seed)
    n = len(src)
    # a minimal sample always fits itself, so demand consensus beyond it
    # whenever more data exists ("no consensus" must stay reachable)
    min_support = 4 if n == 4 else 5
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography(src[idx], dst[idx])
        except (RankDeficientError, ValueError, np.linalg.LinAlgError):
            continue
        if abs(np.linalg.det(h)) < 1e-12:
            continue
        err = symmetric_transfer_error(h, src, dst)
        mask = err < threshold
        count = int(mask.sum())
        if count >= min_support and count > best_count:
            best_count = count
            best_mask = mask
            w = best_count / n
            hit = w**4  # chance a minimal sample is all-inlier
            if hit >= 1.0:
                needed = it
            elif hit > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - hit)))
    if best_mask is None or best_count < min_support:
        raise ValueError("RANSAC found no model with sufficient consensus")
    h = dlt_homography(src[best_mask], dst[best_mask])
    # one refinement pass on the refit model's inliers
    err = symmetric_transfer_error(h, src, dst)
    mask = err < threshold
    if mask.sum() >= 4:
        h = dlt_homography(src[mask], dst[mask])
        best_mask = mask
    return h, best_mask


def compose_to_canvas(consecutive: list, canvas_index: int) -> list:
    """From consecutive homographies (frame i -> frame i+1, length T-1) build
    per-frame homographies to the canvas frame `canvas_index` (length T)."""
    chain = [normalize_homography(h) for h in consecutive]
    t_frames = len(chain) + 1
    if not 0 <= canvas_index < t_frames:
        raise ValueError(f"canvas index {canvas_index} out of range for {t_frames} frames")
    out = [None] * t_frames
    out[canvas_index] = np.eye(3)
    # walking backward: H_{t->k} = H_{t+1->k} @ H_{t->t+1}
    for t in range(canvas_index - 1, -1, -1):
        out[t] = normalize_homography(out[t + 1] @ chain[t])
    # walking forward: H_{t+1->k} = H_{t->k} @ inv(H_{t->t+1})
    for t in range(canvas_index, t_frames - 1):
        m = chain[t]
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError(f"singular homography in chain at step {t}")
        out[t + 1] = normalize_homography(out[t] @ np.linalg.inv(m))
    return out


def rotation_camera_homography(k: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Exact image-to-image homography H = K R K^-1 for a camera that rotates
    by R about its center (valid for any scene depth)."""
    k = np.asarray(k, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9:
        raise ValueError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(k)) < 1e-12:
        raise ValueError("intrinsics matrix is singular")
    return normalize_homography(k @ r @ np.linalg.inv(k))
