"""Image pyramids, keypoint budgeting, binary descriptors, sidecar ingestion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import cv2
import numpy as np

__all__ = [
    "ImagePyramid",
    "Keypoint",
    "MalformedSidecarError",
    "build_pyramid",
    "distribute_keypoints",
    "binarize",
    "hamming",
    "hamming_matrix",
    "load_sidecar",
    "save_sidecar",
    "detect_fallback",
    "DESCRIPTOR_DIM",
]

DESCRIPTOR_DIM = 256
SIDECAR_MAGIC = b"DKKP"
SIDECAR_VERSION = 1

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class Keypoint:
    x: float  # level-0 pixel coordinates
    y: float
    octave: int = 0
    score: float = 0.0


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple  # grayscale float32 arrays, intensities 0..255
    scale_factor: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def scale(self, level: int) -> float:
        return self.scale_factor**level


def build_pyramid(image: np.ndarray, n_levels: int, scale_factor: float) -> ImagePyramid:
    """Downsample with area averaging; level k size = floor(size0 / sf^k)."""
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    if scale_factor <= 1 and n_levels > 1:
        raise ValueError("scale_factor must be > 1")
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a grayscale image")
    img = img.astype(np.float32)
    h0, w0 = img.shape
    levels = [img]
    for k in range(1, n_levels):
        w = int(w0 / scale_factor**k)
        h = int(h0 / scale_factor**k)
        if w < 32 or h < 32:
            raise ValueError(f"pyramid level {k} would be {w}x{h}, below 32x32")
        levels.append(cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA))
    if h0 < 32 or w0 < 32:
        raise ValueError(f"input image {w0}x{h0} below 32x32")
    return ImagePyramid(tuple(levels), float(scale_factor))


GRID_COLS = 8
GRID_ROWS = 6


def distribute_keypoints(
    candidates: list[Keypoint],
    budget: int,
    grid: tuple[int, int] = (GRID_ROWS, GRID_COLS),
    pyramid: ImagePyramid | None = None,
    n_levels: int = 1,
    image_size: tuple[int, int] | None = None,
) -> list[Keypoint]:
    """Keep at most `budget` keypoints, balanced across levels and grid cells.

    Per-level quota is proportional to level pixel area; within a level each
    cell keeps its highest-scoring candidates up to ceil(quota / n_cells),
    then unused quota is refilled from the remaining candidates by score.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if not candidates:
        return []
    rows, cols = grid
    if pyramid is not None:
        n_levels = pyramid.n_levels
        h0, w0 = pyramid.levels[0].shape
        areas = [lv.shape[0] * lv.shape[1] for lv in pyramid.levels]
    else:
        if image_size is None:
            w0 = max(kp.x for kp in candidates) + 1
            h0 = max(kp.y for kp in candidates) + 1
        else:
            w0, h0 = image_size
        areas = [1.0] * n_levels

    # largest-remainder split of the budget across levels
    total_area = float(sum(areas))
    raw = [budget * a / total_area for a in areas]
    quotas = [int(q) for q in raw]
    rem = budget - sum(quotas)
    order = sorted(range(n_levels), key=lambda k: raw[k] - quotas[k], reverse=True)
    for k in order[:rem]:
        quotas[k] += 1

    kept: list[Keypoint] = []
    for level in range(n_levels):
        quota = quotas[level]
        pool = [kp for kp in candidates if kp.octave == level]
        if not pool or quota == 0:
            continue
        if len(pool) <= quota:
            kept.extend(pool)
            continue
        cell_quota = math.ceil(quota / (rows * cols))
        cells: dict[tuple[int, int], list[Keypoint]] = {}
        for kp in pool:
            r = min(int(kp.y * rows / h0), rows - 1)
            c = min(int(kp.x * cols / w0), cols - 1)
            cells.setdefault((r, c), []).append(kp)
        taken: list[Keypoint] = []
        leftovers: list[Keypoint] = []
        for members in cells.values():
            members.sort(key=lambda kp: kp.score, reverse=True)
            taken.extend(members[:cell_quota])
            leftovers.extend(members[cell_quota:])
        if len(taken) > quota:
            taken.sort(key=lambda kp: kp.score, reverse=True)
            taken = taken[:quota]
        elif len(taken) < quota and leftovers:
            leftovers.sort(key=lambda kp: kp.score, reverse=True)
            taken.extend(leftovers[: quota - len(taken)])
        kept.extend(taken)
    return kept


def binarize(d: np.ndarray) -> np.ndarray:
    """Sign-threshold float descriptors to packed bits: bit i = 1 iff d[i] >= 0.

    Accepts (D,) or (N, D); returns uint8 packed rows of D/8 bytes.
    """
    d = np.asarray(d)
    bits = (d >= 0).astype(np.uint8)
    return np.packbits(bits, axis=-1)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of XOR between two packed descriptors of equal width."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"descriptor widths differ: {a.shape} vs {b.shape}")
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed rows: (N, M) int array."""
    A = np.atleast_2d(np.asarray(A, dtype=np.uint8))
    B = np.atleast_2d(np.asarray(B, dtype=np.uint8))
    if A.shape[1] != B.shape[1]:
        raise ValueError("descriptor widths differ")
    if A.shape[1] % 8 == 0:  # word-wide popcount when rows pack into uint64
        a = np.ascontiguousarray(A).view(np.uint64)
        b = np.ascontiguousarray(B).view(np.uint64)
        x = np.bitwise_xor(a[:, None, :], b[None, :, :])
        return np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    x = np.bitwise_xor(A[:, None, :], B[None, :, :])
    return _POPCOUNT[x].sum(axis=2).astype(np.int32)


class MalformedSidecarError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_sidecar(path, frames: dict, descriptor_dim: int = DESCRIPTOR_DIM,
                 normalized: bool = True) -> None:
    """Write per-frame keypoints + float descriptors.

    frames: frame_id -> (list[Keypoint], float32 array (N, D)).
    """
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<IIB", SIDECAR_VERSION, descriptor_dim, int(normalized)))
        for frame_id in sorted(frames):
            kps, desc = frames[frame_id]
            desc = np.asarray(desc, dtype="<f4").reshape(len(kps), descriptor_dim)
            f.write(struct.pack("<QI", frame_id, len(kps)))
            for kp, dv in zip(kps, desc):
                f.write(struct.pack("<ffBf", kp.x, kp.y, kp.octave, kp.score))
                f.write(dv.tobytes())


def load_sidecar(path) -> dict:
    """Read a sidecar file: frame_id -> (list[Keypoint], float32 (N, D)).

    Descriptors are L2-normalized on load when the file is flagged
    unnormalized. Truncation and bad headers raise MalformedSidecarError
    with the offending byte offset.
    """
    with open(path, "rb") as f:
        data = f.read()

    def need(offset, n, what):
        if offset + n > len(data):
            raise MalformedSidecarError(f"truncated {what}", offset)

    off = 0
    need(off, 4, "magic")
    if data[:4] != SIDECAR_MAGIC:
        raise MalformedSidecarError("bad magic", 0)
    off = 4
    need(off, 9, "header")
    version, dim, normalized = struct.unpack_from("<IIB", data, off)
    if version != SIDECAR_VERSION:
        raise MalformedSidecarError(f"unsupported version {version}", off)
    off += 9

    frames = {}
    rec_size = 13 + 4 * dim  # f32 x, f32 y, u8 octave, f32 score, D f32
    while off < len(data):
        need(off, 12, "frame header")
        frame_id, n = struct.unpack_from("<QI", data, off)
        off += 12
        need(off, n * rec_size, "descriptor block")
        kps = []
        desc = np.empty((n, dim), dtype=np.float32)
        for i in range(n):
            x, y, octave, score = struct.unpack_from("<ffBf", data, off)
            off += 13
            desc[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            kps.append(Keypoint(x, y, octave, score))
        if not normalized and n:
            norms = np.linalg.norm(desc, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            desc = desc / norms
        frames[frame_id] = (kps, desc)
    return frames


_PATTERN_SEED = 20240501
_PATCH_HALF = 8


def _brief_pattern(dim: int) -> np.ndarray:
    rng = np.random.default_rng(_PATTERN_SEED)
    # pairs of pixel offsets inside a 16x16 patch
    return rng.integers(-_PATCH_HALF, _PATCH_HALF, size=(dim, 2, 2)).astype(np.int32)


def detect_fallback(pyramid: ImagePyramid, budget: int,
                    dim: int = DESCRIPTOR_DIM) -> tuple[list[Keypoint], np.ndarray]:
    """Harris corners + BRIEF-style signed intensity-difference descriptors.

    Deterministic: the comparison pattern is seeded with a fixed constant.
    Descriptors are L2-normalized floats so sign binarization applies
    downstream.
    """
    pattern = _brief_pattern(dim)
    all_kps: list[Keypoint] = []
    all_desc: list[np.ndarray] = []
    for level, img in enumerate(pyramid.levels):
        h, w = img.shape
        resp = cv2.cornerHarris(img.astype(np.float32), 3, 3, 0.04)
        peak = float(resp.max())
        if peak <= 1e-6:
            continue
        thresh = 0.01 * peak
        # 3x3 local maxima above threshold
        dil = cv2.dilate(resp, np.ones((3, 3)))
        ys, xs = np.where((resp >= dil) & (resp > thresh))
        scale = pyramid.scale(level)
        m = _PATCH_HALF
        for x, y in zip(xs, ys):
            if x < m or y < m or x >= w - m or y >= h - m:
                continue
            a = img[y + pattern[:, 0, 1], x + pattern[:, 0, 0]]
            b = img[y + pattern[:, 1, 1], x + pattern[:, 1, 0]]
            d = (a - b).astype(np.float32)
            n = float(np.linalg.norm(d))
            if n < 1e-6:
                continue
            all_kps.append(Keypoint(x * scale, y * scale, level, float(resp[y, x])))
            all_desc.append(d / n)
    if not all_kps:
        return [], np.zeros((0, dim), dtype=np.float32)
    kept = distribute_keypoints(all_kps, budget, pyramid=pyramid)
    index = {id(kp): i for i, kp in enumerate(all_kps)}
    desc = np.stack([all_desc[index[id(kp)]] for kp in kept])
    return kept, desc
