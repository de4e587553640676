"""Keypoint sidecar export.

The sidecar binary format is the boundary contract with the SLAM engine; it
is written here independently (no import of the engine):

    magic  b"DKKP"
    header <IIB  : version (1), descriptor dim, normalized flag
    frames, ascending frame id:
        <QI  : frame id, keypoint count N
        N x (<ffBf : x, y, octave, score) followed by dim little-endian f32
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from .net import CELL, sample_descriptors, score_map

SIDECAR_MAGIC = b"DKKP"
SIDECAR_VERSION = 1
SCORE_THRESHOLD = 1.0 / (CELL * CELL + 1)   # above a uniform detector


def detect(net, image: np.ndarray, budget: int,
           threshold: float = SCORE_THRESHOLD):
    """Top-scoring keypoints of one image.

    image: (H, W) float32 in [0, 1], sides divisible by 8. Returns
    (points (N, 3) of x, y, score — descending score, N <= budget,
     descriptors (N, D) unit-norm float32).
    """
    net.eval()
    with torch.no_grad():
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        logits, desc = net(t[None, None])
        scores = score_map(logits)[0]
        flat = scores.flatten()
        order = torch.argsort(flat, descending=True, stable=True)
        keep = order[flat[order] > threshold][:budget]
        ys = torch.div(keep, scores.shape[1], rounding_mode="floor")
        xs = keep % scores.shape[1]
        pts = np.stack([xs.numpy().astype(np.float32),
                        ys.numpy().astype(np.float32),
                        flat[keep].numpy().astype(np.float32)], axis=1)
        if len(pts) == 0:
            return pts.reshape(0, 3), np.zeros((0, net.dim), dtype=np.float32)
        d = sample_descriptors(desc[0], pts[:, :2]).numpy().astype(np.float32)
    return pts, d


def export_sidecars(net, images, budget: int, path,
                    threshold: float = SCORE_THRESHOLD) -> dict:
    """Detect on every image and write one sidecar file.

    images: iterable of (H, W) float arrays in [0, 1], indexed by position.
    Returns {frame_id: (points (N, 3), descriptors (N, D))} as written.
    """
    out = {}
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<IIB", SIDECAR_VERSION, net.dim, 1))
        for fid, image in enumerate(images):
            pts, desc = detect(net, image, budget, threshold)
            out[fid] = (pts, desc)
            f.write(struct.pack("<QI", fid, len(pts)))
            for (x, y, score), dv in zip(pts, desc):
                f.write(struct.pack("<ffBf", float(x), float(y), 0,
                                    float(score)))
                f.write(np.ascontiguousarray(dv, dtype="<f4").tobytes())
    return out
