"""Small convolutional keypoint network: shared encoder, detector head
(per-cell keypoint-location classification with a dustbin class), and an
L2-normalized descriptor head."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

CELL = 8                      # detector cell side in pixels
N_CLASSES = CELL * CELL + 1   # 64 in-cell positions + dustbin


class KeypointNet(nn.Module):
    """Encoder of four conv+batch-norm blocks (three 2x pools -> 1/8
    resolution), then 1x1 detector and descriptor heads.

    Batch-norm layers do not track running statistics so the forward pass is
    a pure function of (parameters, input) — required for the functional
    parameter copies used during meta-training.
    """

    def __init__(self, dim: int = 256, channels=(32, 32, 64, 64)):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("encoder takes exactly four channel widths")
        self.dim = dim
        layers: list[nn.Module] = []
        c_in = 1
        for i, c in enumerate(channels):
            layers.append(nn.Conv2d(c_in, c, 3, padding=1))
            layers.append(nn.BatchNorm2d(c, track_running_stats=False))
            layers.append(nn.ReLU(inplace=True))
            if i < 3:
                layers.append(nn.MaxPool2d(2))
            c_in = c
        self.encoder = nn.Sequential(*layers)
        self.detector = nn.Conv2d(c_in, N_CLASSES, 1)
        self.descriptor = nn.Conv2d(c_in, dim, 1)

    def forward(self, img: torch.Tensor):
        """img: (B, 1, H, W) in [0, 1]; H and W divisible by 8.

        Returns (detector logits (B, 65, H/8, W/8),
                 unit-norm descriptors (B, D, H/8, W/8)).
        """
        feat = self.encoder(img)
        logits = self.detector(feat)
        desc = self.descriptor(feat)
        desc = F.normalize(desc, p=2, dim=1, eps=1e-12)
        return logits, desc


def detector_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-cell class probabilities (softmax over the 65 classes)."""
    return F.softmax(logits, dim=1)


def score_map(logits: torch.Tensor) -> torch.Tensor:
    """Full-resolution keypoint score map (B, H, W): per-cell probabilities
    of the 64 in-cell positions, spread back onto pixels."""
    probs = detector_probs(logits)[:, :CELL * CELL]   # drop the dustbin
    return F.pixel_shuffle(probs, CELL)[:, 0]


def sample_descriptors(desc: torch.Tensor, pts) -> torch.Tensor:
    """Descriptor of the cell containing each full-resolution point.

    desc: (D, Hc, Wc) unit-norm map; pts: (N, 2) array-like of (x, y).
    Returns (N, D) unit-norm descriptors.
    """
    pts = torch.as_tensor(pts, dtype=torch.long)
    cx = torch.div(pts[:, 0], CELL, rounding_mode="floor")
    cy = torch.div(pts[:, 1], CELL, rounding_mode="floor")
    cx = cx.clamp(0, desc.shape[2] - 1)
    cy = cy.clamp(0, desc.shape[1] - 1)
    return desc[:, cy, cx].T
