"""Training losses: per-cell detector cross-entropy, sparse triplet
descriptor loss, and their weighted sum."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .data import TrainSample, cell_labels
from .net import sample_descriptors


def detector_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the 65 per-cell classes.

    logits: (65, Hc, Wc) or (B, 65, Hc, Wc); labels: matching (Hc, Wc) grids.
    """
    if logits.dim() == 3:
        logits = logits[None]
        labels = labels[None]
    return F.cross_entropy(logits, labels)


def descriptor_loss(d_i: torch.Tensor, d_m: torch.Tensor,
                    d_neg: torch.Tensor, z: float = 1.0) -> torch.Tensor:
    """Hinge triplet loss over matched and vicinity-negative descriptors.

    d_i: (N, D) original-image descriptors; d_m: (N, D) matched warped
    descriptors; d_neg: (N, M, D) negative warped descriptors. Per pair:
    max(0, z + |d_i - d_m|^2 - mean_j |d_i - d_neg_j|^2), averaged over pairs.
    """
    l_dm = torch.sum((d_i - d_m) ** 2, dim=1)
    l_dn = torch.mean(torch.sum((d_i[:, None, :] - d_neg) ** 2, dim=2), dim=1)
    return torch.mean(torch.clamp(z + l_dm - l_dn, min=0.0))


def total_loss(l_p: torch.Tensor, l_wp: torch.Tensor, l_d: torch.Tensor,
               lam: float = 1.0) -> torch.Tensor:
    """(L_p + L_wp) + lambda * L_d."""
    if lam < 0:
        raise ValueError("loss balance weight must be >= 0")
    return (l_p + l_wp) + lam * l_d


def sample_loss(net, sample: TrainSample, z: float = 1.0, lam: float = 1.0,
                params: dict | None = None):
    """Full training loss of one sample, optionally under substituted
    parameters (torch.func functional call). Returns (L_all, parts dict)."""
    ref = next(net.parameters())
    dev = ref.device
    imgs = torch.stack([
        torch.from_numpy(sample.image),
        torch.from_numpy(sample.warped),
    ]).unsqueeze(1).to(device=dev, dtype=ref.dtype)
    if params is None:
        logits, desc = net(imgs)
    else:
        logits, desc = torch.func.functional_call(net, params, (imgs,))

    lab_i = torch.from_numpy(cell_labels(sample.kps, sample.image.shape)).to(dev)
    lab_w = torch.from_numpy(cell_labels(sample.warped_kps,
                                         sample.warped.shape)).to(dev)
    l_p = detector_loss(logits[0], lab_i)
    l_wp = detector_loss(logits[1], lab_w)

    d_i = sample_descriptors(desc[0], sample.kps)
    d_w = sample_descriptors(desc[1], sample.warped_kps)
    d_neg = d_w[torch.from_numpy(sample.negatives).to(dev)]
    l_d = descriptor_loss(d_i, d_w, d_neg, z=z)

    l_all = total_loss(l_p, l_wp, l_d, lam=lam)
    return l_all, {"loss_p": l_p, "loss_wp": l_wp, "loss_d": l_d}
