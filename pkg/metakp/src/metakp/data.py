"""Synthetic corner images, random homographies, and warped training samples
with pseudo-labels and correspondence/negative pairs."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .net import CELL

MATCH_TOL_PX = 0.5
DEFAULT_NEGATIVES = 4


@dataclass
class TrainSample:
    image: np.ndarray          # (H, W) float32 in [0, 1]
    warped: np.ndarray         # (H, W) float32 in [0, 1]
    H: np.ndarray              # 3x3 homography, image -> warped
    kps: np.ndarray            # (N, 2) keypoints in the original image
    warped_kps: np.ndarray     # (N, 2) = H(kps), inside the warped image
    negatives: np.ndarray     # (N, M) indices into warped_kps, all unmatched


def make_corner_image(rng: np.random.Generator, size: int = 64,
                      n_shapes: int = 6):
    """Bright random rectangles over a smooth background.

    Returns (image float32 [0,1], corners (K, 2)) where corners are the
    analytic rectangle corner coordinates.
    """
    img = np.full((size, size), 0.3, dtype=np.float32)
    img += rng.uniform(-0.05, 0.05) * np.linspace(0, 1, size)[None, :]
    corners = []
    for _ in range(n_shapes):
        w = int(rng.integers(10, size // 2))
        h = int(rng.integers(10, size // 2))
        x = int(rng.integers(2, size - w - 2))
        y = int(rng.integers(2, size - h - 2))
        shade = float(rng.uniform(0.55, 1.0))
        img[y:y + h, x:x + w] = shade
        corners += [(x, y), (x + w - 1, y), (x, y + h - 1),
                    (x + w - 1, y + h - 1)]
    return np.clip(img, 0, 1), np.array(corners, dtype=np.float64)


def random_homography(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bounded random homography around the image center: rotation within
    20 degrees, scale in [0.8, 1.2], small translation and perspective
    jitter. Degenerate draws (|det| < 1e-6) are resampled."""
    c = (size - 1) / 2.0
    while True:
        ang = np.radians(rng.uniform(-20.0, 20.0))
        s = rng.uniform(0.8, 1.2)
        tx, ty = rng.uniform(-0.05 * size, 0.05 * size, 2)
        px, py = rng.uniform(-2e-4, 2e-4, 2)
        ca, sa = s * np.cos(ang), s * np.sin(ang)
        A = np.array([[ca, -sa, tx], [sa, ca, ty], [px, py, 1.0]])
        T = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
        Tinv = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
        H = Tinv @ A @ T
        if abs(np.linalg.det(H)) >= 1e-6:
            return H


def apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    q = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    return q[:, :2] / q[:, 2:3]


def harris_labels(image: np.ndarray, max_pts: int = 200) -> np.ndarray:
    """Stand-in pseudo-labeler: Harris corner local maxima."""
    resp = cv2.cornerHarris((image * 255).astype(np.float32), 3, 3, 0.04)
    peak = float(resp.max())
    if peak <= 1e-8:
        return np.zeros((0, 2))
    dil = cv2.dilate(resp, np.ones((3, 3)))
    ys, xs = np.where((resp >= dil) & (resp > 0.01 * peak))
    order = np.argsort(-resp[ys, xs])[:max_pts]
    return np.stack([xs[order], ys[order]], axis=1).astype(np.float64)


def warp_and_label(image: np.ndarray, rng: np.random.Generator,
                   corners: np.ndarray | None = None,
                   n_negatives: int = DEFAULT_NEGATIVES,
                   H: np.ndarray | None = None) -> TrainSample | None:
    """Warp an image by a random homography and build the training sample.

    Keypoint pseudo-labels come from `corners` when the generator knows them
    analytically, otherwise from the Harris stand-in labeler. Warped-image
    labels are the homography images of the original labels, so every matched
    pair satisfies the correspondence by construction; negatives are, for
    each keypoint, the closest other warped keypoints (its vicinity), all of
    which violate the 0.5 px matching bound. Returns None when the image
    yields too few labels to form pairs and negatives.
    """
    h, w = image.shape
    if h < 64 or w < 64:
        raise ValueError("image must be at least 64x64")
    if H is None:
        H = random_homography(rng, min(h, w))
    warped = cv2.warpPerspective(image.astype(np.float32), H.astype(np.float64),
                                 (w, h), flags=cv2.INTER_LINEAR)

    labels = corners if corners is not None else harris_labels(image)
    if len(labels) == 0:
        return None
    mapped = apply_h(H, labels)
    m = CELL  # keep labels a full cell away from the border on both sides
    keep = ((labels[:, 0] >= m) & (labels[:, 0] < w - m)
            & (labels[:, 1] >= m) & (labels[:, 1] < h - m)
            & (mapped[:, 0] >= m) & (mapped[:, 0] < w - m)
            & (mapped[:, 1] >= m) & (mapped[:, 1] < h - m))
    kps = labels[keep]
    wkps = mapped[keep]
    n = len(kps)
    if n < n_negatives + 1:
        return None

    # vicinity negatives: nearest other warped keypoints beyond the match
    # tolerance
    d2 = np.sum((wkps[:, None, :] - wkps[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    d2[d2 <= MATCH_TOL_PX ** 2] = np.inf
    negatives = np.argsort(d2, axis=1)[:, :n_negatives]
    if not np.all(np.isfinite(d2[np.arange(n)[:, None], negatives])):
        return None
    return TrainSample(image.astype(np.float32), warped, H,
                       kps, wkps, negatives)


def cell_labels(kps: np.ndarray, shape) -> np.ndarray:
    """Per-cell detector classes: in-cell position index of the keypoint, or
    the dustbin class for empty cells."""
    hc, wc = shape[0] // CELL, shape[1] // CELL
    labels = np.full((hc, wc), CELL * CELL, dtype=np.int64)
    for x, y in np.atleast_2d(kps):
        cy, cx = int(y) // CELL, int(x) // CELL
        if 0 <= cy < hc and 0 <= cx < wc:
            labels[cy, cx] = (int(y) % CELL) * CELL + (int(x) % CELL)
    return labels


def sample_stream(seed: int, size: int = 64, n_negatives: int = DEFAULT_NEGATIVES):
    """Endless deterministic stream of corner-image training samples."""
    rng = np.random.default_rng(seed)
    while True:
        img, corners = make_corner_image(rng, size)
        s = warp_and_label(img, rng, corners=corners, n_negatives=n_negatives)
        if s is not None:
            yield s
